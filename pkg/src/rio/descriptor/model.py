"""The two-scale patch encoder and its ``RIOM`` file format."""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L

RIOM_MAGIC = b"RIOM"
RIOM_VERSION = 1
SCALES = ("fine", "coarse")


def default_arch(scales=SCALES, resolution: int = 32) -> dict:
    """Per-scale encoder 32^3 -> 30 -> 28 -> 14 -> 12 -> 10 -> 5 (x64) -> 256,
    then the fusion head over the concatenated branch outputs."""
    sse = [
        {"type": "conv", "out": 8, "k": 3}, {"type": "relu"},
        {"type": "conv", "out": 16, "k": 3}, {"type": "relu"},
        {"type": "pool", "size": 2},
        {"type": "conv", "out": 32, "k": 3}, {"type": "relu"},
        {"type": "conv", "out": 64, "k": 3}, {"type": "relu"},
        {"type": "pool", "size": 2},
        {"type": "flatten"},
        {"type": "fc", "out": 256}, {"type": "relu"},
    ]
    mse = [{"type": "fc", "out": 512}, {"type": "relu"}, {"type": "fc", "out": 512}]
    return {"resolution": resolution, "scales": list(scales), "sse": sse, "mse": mse}


def tiny_arch(scales=SCALES, resolution: int = 8, channels: int = 2) -> dict:
    """A small stack with every layer type, for gradient checks."""
    sse = [
        {"type": "conv", "out": channels, "k": 3}, {"type": "relu"},
        {"type": "conv", "out": channels, "k": 3}, {"type": "relu"},
        {"type": "pool", "size": 2},
        {"type": "flatten"},
        {"type": "fc", "out": 4}, {"type": "relu"},
    ]
    mse = [{"type": "fc", "out": 6}, {"type": "relu"}, {"type": "fc", "out": 5}]
    return {"resolution": resolution, "scales": list(scales), "sse": sse, "mse": mse}


def _branch_shapes(arch):
    r = arch["resolution"]
    sse_out = L.output_shape(arch["sse"], (1, r, r, r))[-1] if arch["sse"] else (1, r, r, r)
    # encoder outputs are flattened before concatenation
    mse_in = (int(np.prod(sse_out)) * len(arch["scales"]),)
    return (1, r, r, r), mse_in


def param_layout(arch) -> list[tuple[str, tuple]]:
    """Parameter names and shapes in declaration order."""
    sse_in, mse_in = _branch_shapes(arch)
    out = []
    for s in arch["scales"]:
        out += [(f"sse_{s}.{i}.{n}", shp) for i, n, shp in L.param_shapes(arch["sse"], sse_in)]
    out += [(f"mse.{i}.{n}", shp) for i, n, shp in L.param_shapes(arch["mse"], mse_in)]
    return out


@dataclass
class DescriptorModel:
    """Parameters of the per-scale encoders and the fusion head.

    The branches never share weights; one parameter set per branch is
    evaluated for anchor, positive and negative alike.
    """

    arch: dict
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=lambda: {"stage": "static", "seed": 0, "epoch": 0})

    @property
    def scales(self) -> list[str]:
        return list(self.arch["scales"])

    @property
    def resolution(self) -> int:
        return int(self.arch["resolution"])

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def output_dim(self) -> int:
        _, mse_in = _branch_shapes(self.arch)
        if not self.arch["mse"]:
            return mse_in[0]
        return L.output_shape(self.arch["mse"], mse_in)[-1][0]

    def branch(self, name: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(name + ".")}

    def sse_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("sse_")]

    def mse_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("mse.")]

    def copy(self) -> "DescriptorModel":
        return DescriptorModel(copy.deepcopy(self.arch),
                               {k: v.copy() for k, v in self.params.items()}, dict(self.meta))

    def astype(self, dtype) -> "DescriptorModel":
        return DescriptorModel(copy.deepcopy(self.arch),
                               {k: v.astype(dtype) for k, v in self.params.items()}, dict(self.meta))

    def checksum(self, names=None) -> str:
        h = hashlib.sha256()
        for k in names or self.params:
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def __call__(self, volume, positions, spec=None, rotation=None):
        from .train import describe_keypoints
        return describe_keypoints(self, volume, positions, spec, rotation=rotation)


def init_model(arch: dict | None = None, seed: int = 0, dtype=np.float32,
               stage: str = "static") -> DescriptorModel:
    """He-normal weights, zero biases; deterministic per seed."""
    arch = copy.deepcopy(arch or default_arch())
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_layout(arch):
        if name.endswith("bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return DescriptorModel(arch, params, {"stage": stage, "seed": int(seed), "epoch": 0})


def _as_batch(patches, res, dtype):
    x = np.asarray(patches, dtype=dtype)
    if x.shape[-3:] != (res, res, res):
        raise ValueError(f"patches must be {res}^3 grids, got shape {x.shape}")
    if x.ndim == 3:
        x = x[None]
    return x.reshape(-1, 1, res, res, res)


def encode_scales(model: DescriptorModel, inputs: dict[str, np.ndarray], keep_cache=False):
    """Run every single-scale encoder; returns the concatenated codes."""
    outs, caches = [], {}
    for s in model.scales:
        y, c = L.forward(model.arch["sse"], model.params, f"sse_{s}", inputs[s])
        outs.append(y.reshape(y.shape[0], -1))
        if keep_cache:
            caches[s] = c
    return np.concatenate(outs, axis=1), caches


def forward(model: DescriptorModel, fine, coarse=None) -> np.ndarray:
    """Feature vector(s) for (batches of) inverted fine/coarse patches.

    Single patches give a 1D vector, stacked patches a (n, dim) array. A
    single-scale model ignores the patch of the scale it lacks.
    """
    res = model.resolution
    single = np.asarray(fine).ndim == 3
    inputs = {}
    if "fine" in model.scales:
        inputs["fine"] = _as_batch(fine, res, model.dtype)
    if "coarse" in model.scales:
        if coarse is None:
            raise ValueError("model needs a coarse patch")
        inputs["coarse"] = _as_batch(coarse, res, model.dtype)
    n = {v.shape[0] for v in inputs.values()}
    if len(n) != 1:
        raise ValueError("fine and coarse batches differ in size")
    h, _ = encode_scales(model, inputs)
    f, _ = L.forward(model.arch["mse"], model.params, "mse", h)
    return f[0] if single else f


# -- RIOM format ---------------------------------------------------------------------

def model_to_bytes(model: DescriptorModel) -> bytes:
    header = {"arch": model.arch, "stage": model.meta.get("stage", "static"),
              "seed": int(model.meta.get("seed", 0)), "epoch": int(model.meta.get("epoch", 0)),
              "params": [[k, list(v.shape)] for k, v in model.params.items()]}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(v.astype("<f4").tobytes() for v in model.params.values())
    return RIOM_MAGIC + struct.pack("<II", RIOM_VERSION, len(hb)) + hb + body


def model_from_bytes(data: bytes) -> DescriptorModel:
    if data[:4] != RIOM_MAGIC:
        raise ValueError("not a RIOM model file")
    version, n = struct.unpack("<II", data[4:12])
    if version != RIOM_VERSION:
        raise ValueError(f"unsupported RIOM version {version}")
    header = json.loads(data[12:12 + n])
    off = 12 + n
    params = {}
    expected = dict(param_layout(header["arch"]))
    for name, shape in header["params"]:
        if tuple(expected.get(name, ())) != tuple(shape):
            raise ValueError(f"parameter {name} shape {shape} does not match the layer spec")
        cnt = int(np.prod(shape))
        params[name] = np.frombuffer(data, "<f4", cnt, off).reshape(shape).astype(np.float32)
        off += 4 * cnt
    if off != len(data):
        raise ValueError("trailing bytes in model file")
    meta = {"stage": header["stage"], "seed": header["seed"], "epoch": header["epoch"]}
    return DescriptorModel(header["arch"], params, meta)


def save_model(model: DescriptorModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> DescriptorModel:
    return model_from_bytes(Path(path).read_bytes())
