"""Triplet loss, exact gradients, Adam and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
import numpy as np

from ..volume import PatchPairSpec, TsdfVolume, extract_two_scale_batch
from . import layers as L
from .model import DescriptorModel, encode_scales, forward

log = logging.getLogger(__name__)

FREEZE_MODES = ("none", "sse_frozen")


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 1.0
    learning_rate: float = 0.001
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def triplet_loss(f_a, f_p, f_n, margin: float = 1.0):
    """``max(0, |f_a - f_p|^2 - |f_a - f_n|^2 + margin)``; rows are triplets
    when inputs are 2D."""
    f_a, f_p, f_n = (np.asarray(f, dtype=np.float64) for f in (f_a, f_p, f_n))
    if not (f_a.shape == f_p.shape == f_n.shape):
        raise ValueError("feature dimensions differ")
    d_pos = np.sum((f_a - f_p) ** 2, axis=-1)
    d_neg = np.sum((f_a - f_n) ** 2, axis=-1)
    loss = np.maximum(0.0, d_pos - d_neg + margin)
    return float(loss) if loss.ndim == 0 else loss


@dataclass
class TripletBatch:
    """Stacked patches: ``patches[role][scale]`` has shape (n, r, r, r)."""

    patches: dict[str, dict[str, np.ndarray]]

    def __len__(self):
        return len(self.patches["anchor"]["fine"])

    def subset(self, idx) -> "TripletBatch":
        return TripletBatch({r: {s: a[idx] for s, a in d.items()} for r, d in self.patches.items()})

    @classmethod
    def from_triplets(cls, triplets) -> "TripletBatch":
        if isinstance(triplets, TripletBatch):
            return triplets
        out = {}
        for role in ("anchor", "positive", "negative"):
            pairs = [getattr(t, role) for t in triplets]
            out[role] = {"fine": np.stack([p[0] for p in pairs]).astype(np.float32),
                         "coarse": np.stack([p[1] for p in pairs]).astype(np.float32)}
        return cls(out)


def _stack_inputs(model: DescriptorModel, batch: TripletBatch) -> dict[str, np.ndarray]:
    r = model.resolution
    inputs = {}
    for s in model.scales:
        x = np.concatenate([batch.patches[role][s] for role in ("anchor", "positive", "negative")])
        inputs[s] = x.astype(model.dtype).reshape(-1, 1, r, r, r)
    return inputs


def _loss_grad(f: np.ndarray, n: int, margin: float):
    fa, fp, fn = f[:n], f[n:2 * n], f[2 * n:]
    d_pos = np.sum((fa - fp) ** 2, axis=1)
    d_neg = np.sum((fa - fn) ** 2, axis=1)
    hinge = d_pos - d_neg + margin
    active = (hinge > 0)[:, None].astype(f.dtype)
    scale = active * (2.0 / n)
    df = np.concatenate([scale * (fn - fp), -scale * (fa - fp), scale * (fa - fn)])
    return float(np.maximum(hinge, 0).mean()), df


def _mse_backward(model, h, margin, need_dh):
    f, cache = L.forward(model.arch["mse"], model.params, "mse", h)
    n = len(h) // 3
    loss, df = _loss_grad(f, n, margin)
    dh, grads = L.backward(model.arch["mse"], model.params, "mse", df, cache, need_dx=need_dh)
    if dh is None and need_dh:
        dh = df
    return loss, dh, grads


def backward(model: DescriptorModel, triplets, config: TripletLossConfig = TripletLossConfig(),
             freeze: str = "none") -> tuple[float, dict[str, np.ndarray]]:
    """Mean triplet loss over the batch and its exact gradient for every
    trainable parameter (all of them unless the encoders are frozen)."""
    if freeze not in FREEZE_MODES:
        raise ValueError(f"freeze must be one of {FREEZE_MODES}")
    batch = TripletBatch.from_triplets(triplets)
    inputs = _stack_inputs(model, batch)
    h, caches = encode_scales(model, inputs, keep_cache=freeze == "none")
    loss, dh, grads = _mse_backward(model, h, config.margin, need_dh=freeze == "none")
    if freeze == "none" and model.arch["sse"]:
        r = model.resolution
        out_shape = tuple(L.output_shape(model.arch["sse"], (1, r, r, r))[-1])
        width = h.shape[1] // len(model.scales)
        for j, s in enumerate(model.scales):
            dy = dh[:, j * width:(j + 1) * width].reshape((len(h),) + out_shape)
            _, g = L.backward(model.arch["sse"], model.params, f"sse_{s}", dy, caches[s])
            grads.update(g)
    return loss, grads


class Adam:
    def __init__(self, names, params, cfg: TripletLossConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(params[k]) for k in names}
        self.v = {k: np.zeros_like(params[k]) for k in names}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for k in self.m:
            g = grads[k].astype(params[k].dtype)
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            params[k] -= (c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)).astype(params[k].dtype)


@dataclass
class TrainResult:
    model: DescriptorModel
    epoch_losses: list[float] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    # epochs kept in the returned model (fewer than run when validation stops early)
    epochs_kept: int = 0


def encode_batch(model: DescriptorModel, batch: TripletBatch, chunk: int = 16) -> np.ndarray:
    """Concatenated encoder codes for all triplet patches, ordered
    anchor/positive/negative blocks of length n."""
    n = len(batch)
    r = model.resolution
    blocks = []
    for role in ("anchor", "positive", "negative"):
        parts = []
        for s0 in range(0, n, chunk):
            inputs = {s: batch.patches[role][s][s0:s0 + chunk].astype(model.dtype)
                      .reshape(-1, 1, r, r, r) for s in model.scales}
            h, _ = encode_scales(model, inputs)
            parts.append(h)
        blocks.append(np.concatenate(parts))
    return np.concatenate(blocks)


def train(model: DescriptorModel, triplets, config: TripletLossConfig = TripletLossConfig(),
          freeze: str = "none", epochs: int = 1, seed: int = 0, stage: str | None = None,
          progress=None, validation=None) -> TrainResult:
    """Adam on the mean triplet loss; returns a new model and the loss curve.

    With ``freeze="sse_frozen"`` only the fusion head is updated; encoder
    codes are computed once up front since they cannot change. With
    ``validation`` triplets the returned weights are those after the epoch
    with the lowest validation loss.
    """
    if freeze not in FREEZE_MODES:
        raise ValueError(f"freeze must be one of {FREEZE_MODES}")
    if freeze == "sse_frozen" and model.meta.get("epoch", 0) == 0 \
            and model.meta.get("stage") != "dynamic":
        raise ValueError("freezing the encoders requires a pre-trained model")
    out = model.copy()
    batch = TripletBatch.from_triplets(triplets) if len(triplets) else None
    if batch is None or epochs <= 0:
        return TrainResult(out)
    n = len(batch)
    rng = np.random.default_rng(seed)
    update = config.learning_rate > 0
    names = out.mse_names() if freeze == "sse_frozen" else list(out.params)
    opt = Adam(names, out.params, config)
    codes = encode_batch(out, batch) if freeze == "sse_frozen" else None
    val = TripletBatch.from_triplets(validation) if validation else None
    vcodes = encode_batch(out, val) if val is not None and codes is not None else None
    result = TrainResult(out)
    best = None
    for ep in range(epochs):
        order = rng.permutation(n)
        losses = []
        for s0 in range(0, n, config.batch_size):
            idx = np.sort(order[s0:s0 + config.batch_size])
            if codes is not None:
                h = np.concatenate([codes[idx], codes[n + idx], codes[2 * n + idx]])
                loss, _, grads = _mse_backward(out, h, config.margin, need_dh=False)
            else:
                loss, grads = backward(out, batch.subset(idx), config)
            if update:
                opt.step(out.params, grads)
            losses.append(loss)
            result.batch_losses.append(loss)
        result.epoch_losses.append(float(np.mean(losses)))
        if val is not None:
            h = vcodes if vcodes is not None else encode_batch(out, val)
            result.val_losses.append(_code_loss(out, h, len(val), config.margin))
            if best is None or result.val_losses[-1] < best[0]:
                best = (result.val_losses[-1], ep + 1, {k: v.copy() for k, v in out.params.items()})
        if progress:
            progress(ep, result.epoch_losses[-1])
    result.epochs_kept = epochs
    if best is not None:
        out.params.update(best[2])
        result.epochs_kept = best[1]
    if update:
        out.meta["epoch"] = int(out.meta.get("epoch", 0)) + result.epochs_kept
        if stage is not None:
            out.meta["stage"] = stage
        elif freeze == "sse_frozen":
            out.meta["stage"] = "dynamic"
    return result


def _code_loss(model: DescriptorModel, h: np.ndarray, n: int, margin: float) -> float:
    f, _ = L.forward(model.arch["mse"], model.params, "mse", h)
    return float(np.mean(triplet_loss(f[:n], f[n:2 * n], f[2 * n:], margin)))


def mean_loss(model: DescriptorModel, triplets, margin: float = 1.0, chunk: int = 16) -> float:
    batch = TripletBatch.from_triplets(triplets)
    return _code_loss(model, encode_batch(model, batch, chunk), len(batch), margin)


def describe_keypoints(model: DescriptorModel, volume: TsdfVolume, keypoints,
                       spec: PatchPairSpec | None = None, batch: int = 16,
                       rotation: np.ndarray | None = None) -> np.ndarray:
    """Features for each keypoint (Keypoint objects or an (n, 3) array), in
    input order; shape (n, dim). ``rotation`` turns every sampling grid."""
    spec = spec or PatchPairSpec(resolution=model.resolution)
    if spec.resolution != model.resolution:
        raise ValueError("patch resolution does not match the model")
    pos = np.array([getattr(k, "position", k) for k in keypoints], dtype=np.float64).reshape(-1, 3)
    if len(pos) == 0:
        return np.zeros((0, model.output_dim), dtype=model.dtype)
    out = []
    for s0 in range(0, len(pos), batch):
        fine, coarse = extract_two_scale_batch(volume, pos[s0:s0 + batch], spec, rotation=rotation)
        out.append(forward(model, fine, coarse).reshape(-1, model.output_dim))
    return np.concatenate(out)
