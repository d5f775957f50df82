"""End-to-end glue: synthetic corpora, scene volumes, training-triplet
collection, and relocalization of every changed instance in a scan pair."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .datasynth.manifest import assign_splits
from .datasynth.render import render_scene_frames
from .datasynth.scene import (ChangeConfig, SceneConfig, ScenePairManifest, SyntheticScene,
                              apply_changes, generate_scene, object_labels)
from .descriptor import DescriptorModel, TripletLossConfig, default_arch, init_model, train
from .evaluation import EvalReport, Prediction, benchmark
from .keypoints import (HarrisConfig, NegativePool, ResponseCache, TrainingTriplet, detect,
                        harris_response, sample_dynamic_triplets, sample_static_triplets)
from .registration import AlignmentFailure, RansacConfig, SceneFeatures, relocalize_instance
from .volume import PatchPairSpec, TsdfVolume, analytic_tsdf, grid_for_bounds

log = logging.getLogger(__name__)


@dataclass
class CorpusConfig:
    n_pairs: int = 50
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    change: ChangeConfig = field(default_factory=ChangeConfig)
    split_ratio: tuple[int, int, int] = (385, 47, 46)
    voxel_size: float = 0.025
    truncation: float = 0.1
    margin: float = 0.1
    # band around an object's surface that counts as its segment
    segment_band: float = 0.05

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be positive")
        if not (self.voxel_size > 0 and self.truncation >= 2 * self.voxel_size):
            raise ValueError("need voxel_size > 0 and truncation >= 2 voxels")

    def grid(self, scene: SyntheticScene) -> dict:
        lo = np.asarray(scene.room_min) - self.margin
        hi = np.asarray(scene.room_max) + self.margin
        dims, origin = grid_for_bounds(lo, hi, self.voxel_size)
        return {"dims": dims, "voxel_size": self.voxel_size, "origin": origin,
                "truncation": self.truncation}


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_corpus(cfg: CorpusConfig = CorpusConfig()) -> list[ScenePairManifest]:
    """``n_pairs`` scene pairs with train/val/test tags; deterministic per seed."""
    out = []
    for i in range(cfg.n_pairs):
        s = pair_seed(cfg.seed, i)
        scene = generate_scene(cfg.scene, s)
        _, man = apply_changes(scene, cfg.change, s, f"scene{i:04d}", cfg.scene)
        out.append(man)
    splits = assign_splits([m.scan_pair_id for m in out], cfg.split_ratio, cfg.seed)
    for m in out:
        m.split = splits[m.scan_pair_id]
    return out


def scene_volume(scene: SyntheticScene, cfg: CorpusConfig = CorpusConfig()) -> TsdfVolume:
    return analytic_tsdf(scene, **cfg.grid(scene))


@dataclass
class PairData:
    """A scan pair with its volumes; derived maps are computed on demand."""

    manifest: ScenePairManifest
    source: TsdfVolume
    target: TsdfVolume
    cfg: CorpusConfig = field(default_factory=CorpusConfig)

    @classmethod
    def build(cls, manifest: ScenePairManifest, cfg: CorpusConfig = CorpusConfig()) -> "PairData":
        return cls(manifest, scene_volume(manifest.reference, cfg),
                   scene_volume(manifest.rescan, cfg), cfg)

    @cached_property
    def labels(self) -> np.ndarray:
        pts = self.source.grid_points().reshape(-1, 3)
        return object_labels(self.manifest.reference, pts, self.cfg.segment_band
                             ).reshape(self.source.dims)

    def mask(self, instance_id: int) -> np.ndarray:
        return self.labels == instance_id

    def source_response(self, harris: HarrisConfig) -> np.ndarray:
        key = ("src", harris.k, harris.gradient_radius)
        cache = self.__dict__.setdefault("_responses", {})
        if key not in cache:
            cache[key] = harris_response(self.source, harris.k, harris.gradient_radius)
        return cache[key]

    def target_cache(self, harris: HarrisConfig) -> ResponseCache:
        key = ("tgt", harris)
        cache = self.__dict__.setdefault("_responses", {})
        if key not in cache:
            cache[key] = ResponseCache(self.target, harris)
        return cache[key]

    def target_keypoints(self, harris: HarrisConfig) -> np.ndarray:
        pos, _ = detect(self.target, harris, response=self.target_cache(harris).response)
        return pos


# -- training triplets ---------------------------------------------------------------

@dataclass
class TripletConfig:
    per_pair: int = 15
    augmentation: str = "yaw"
    removed_fraction: float = 0.25
    scene_negative_fraction: float = 0.5
    negative_scenes: int = 5
    static_frames: int = 12
    # align anchors to the nearest yaw hypothesis (degrees; 0 disables)
    yaw_step: float = 90.0


def dynamic_triplets(pairs: Sequence[PairData], spec: PatchPairSpec = PatchPairSpec(),
                     cfg: TripletConfig = TripletConfig(), seed: int = 0,
                     harris: HarrisConfig = HarrisConfig()) -> list[TrainingTriplet]:
    """Triplets around moved objects. Negatives come from a few other
    scenes, from removed objects and from elsewhere in the same rescan."""
    kps = [p.target_keypoints(harris) for p in pairs]
    out = []
    for i, p in enumerate(pairs):
        others = [j for j in range(len(pairs)) if j != i]
        rng = np.random.default_rng(pair_seed(seed, i))
        pick = rng.permutation(others)[:cfg.negative_scenes] if others else []
        pool = NegativePool([pairs[j].target for j in pick], [kps[j] for j in pick])
        removed = [c.instance_id for c in p.manifest.changes if c.kind == "removed"]
        sites = [detect(p.source, harris, mask=p.mask(r), response=p.source_response(harris))[0]
                 for r in removed]
        masks = {r.instance_id: p.mask(r.instance_id) for r in p.manifest.instances}
        out += sample_dynamic_triplets(
            p.source, p.target, p.manifest.instances, spec, cfg.per_pair, pair_seed(seed, i),
            object_masks=masks, negatives=pool, removed_sites=sites, removed_ids=removed,
            harris=harris, augmentation=cfg.augmentation, removed_fraction=cfg.removed_fraction,
            scene_negative_fraction=cfg.scene_negative_fraction,
            rescan_cache=p.target_cache(harris), yaw_step=cfg.yaw_step)
    return out


def static_triplets(scenes: Sequence[SyntheticScene], corpus: CorpusConfig = CorpusConfig(),
                    spec: PatchPairSpec = PatchPairSpec(), cfg: TripletConfig = TripletConfig(),
                    seed: int = 0, harris: HarrisConfig = HarrisConfig(),
                    negatives: NegativePool | None = None) -> list[TrainingTriplet]:
    """Triplets from two partial reconstructions of each static scene, fused
    from disjoint subsets of rendered depth frames."""
    out = []
    for i, scene in enumerate(scenes):
        s = pair_seed(seed, i)
        frames = render_scene_frames(scene, cfg.static_frames, seed=s)
        out += sample_static_triplets(frames, spec, cfg.per_pair, s, grid=corpus.grid(scene),
                                      negatives=negatives, harris=harris,
                                      augmentation=cfg.augmentation)
    return out


# -- relocalization ------------------------------------------------------------------

@dataclass
class RelocalizeConfig:
    spec: PatchPairSpec = field(default_factory=PatchPairSpec)
    harris: HarrisConfig = field(default_factory=HarrisConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    k: int = 4
    min_keypoints: int = 8
    n_yaw: int = 4


def relocalize_pair(describe, pair: PairData, cfg: RelocalizeConfig = RelocalizeConfig(),
                    instance_ids: Sequence[int] | None = None
                    ) -> tuple[list[Prediction], dict[int, dict]]:
    """Predictions (``failed`` where alignment fails) for every moved
    instance of the pair, plus per-instance diagnostics."""
    man = pair.manifest
    ids = list(man.moved_ids if instance_ids is None else instance_ids)
    tf: SceneFeatures | None = None
    preds, diags = [], {}
    for iid in ids:
        if tf is None:
            pos = pair.target_keypoints(cfg.harris)
            feats = describe(pair.target, pos, cfg.spec) if len(pos) else np.zeros((0, 1))
            tf = SceneFeatures(pos, np.asarray(feats))
        try:
            pose, d = relocalize_instance(
                describe, pair.source, pair.mask(iid), pair.target, cfg.spec, cfg.harris,
                cfg.ransac, cfg.k, cfg.min_keypoints, tf, pair.source_response(cfg.harris),
                cfg.n_yaw)
            preds.append(Prediction(man.scan_pair_id, iid, pose, "ok"))
            diags[iid] = d.to_dict()
        except AlignmentFailure as e:
            preds.append(Prediction(man.scan_pair_id, iid, None, "failed"))
            diags[iid] = {"error": f"{type(e).__name__}: {e}"}
    return preds, diags


def evaluate_pairs(describe, pairs: Sequence[PairData],
                   cfg: RelocalizeConfig = RelocalizeConfig()) -> tuple[EvalReport, list[Prediction]]:
    preds = []
    for p in pairs:
        preds += relocalize_pair(describe, p, cfg)[0]
    gt = [{"scan_pair_id": p.manifest.scan_pair_id, "instances": p.manifest.instances}
          for p in pairs]
    return benchmark(preds, gt), preds


# -- the synthetic benchmark recipe ----------------------------------------------------

def benchmark_corpus() -> CorpusConfig:
    """Upright, mostly box-shaped furniture moved about the vertical axis.
    Spheres carry no corners for the detector, so they are left out."""
    return CorpusConfig(
        scene=SceneConfig(n_objects=8, primitive_weights={"box": 0.85, "cylinder": 0.15}),
        change=ChangeConfig(move_fraction=0.75, rotation_axis="vertical"))


@dataclass
class RecipeConfig:
    corpus: CorpusConfig = field(default_factory=benchmark_corpus)
    triplets: TripletConfig = field(default_factory=TripletConfig)
    static_loss: TripletLossConfig = field(default_factory=TripletLossConfig)
    dynamic_loss: TripletLossConfig = field(default_factory=TripletLossConfig)
    static_epochs: int = 1
    dynamic_epochs: int = 8
    relocalize: RelocalizeConfig = field(default_factory=RelocalizeConfig)
    init_seed: int = 0
    seed: int = 0


@dataclass
class TrainingData:
    static: list[TrainingTriplet]
    dynamic: list[TrainingTriplet]
    validation: list[TrainingTriplet]


def collect_training_data(train_pairs: Sequence[PairData], val_pairs: Sequence[PairData],
                          cfg: RecipeConfig) -> TrainingData:
    spec, harris, tc = cfg.relocalize.spec, cfg.relocalize.harris, cfg.triplets
    pool_pairs = list(train_pairs)[:tc.negative_scenes]
    pool = NegativePool([p.target for p in pool_pairs],
                        [p.target_keypoints(harris) for p in pool_pairs])
    static = static_triplets([p.manifest.reference for p in train_pairs], cfg.corpus, spec, tc,
                             cfg.seed, harris, pool)
    dynamic = dynamic_triplets(train_pairs, spec, tc, cfg.seed + 1, harris)
    val = dynamic_triplets(val_pairs, spec, tc, cfg.seed + 2, harris) if val_pairs else []
    return TrainingData(static, dynamic, val)


def train_descriptor(data: TrainingData, cfg: RecipeConfig, scales=("fine", "coarse")
                     ) -> tuple[DescriptorModel, dict]:
    """Static pre-training of the whole network, then dynamic fine-tuning of
    the fusion head with the per-scale encoders frozen."""
    model = init_model(default_arch(scales, cfg.relocalize.spec.resolution), cfg.init_seed)
    t0 = time.perf_counter()
    st = train(model, data.static, cfg.static_loss, "none", cfg.static_epochs, cfg.seed,
               stage="static")
    t1 = time.perf_counter()
    dy = train(st.model, data.dynamic, cfg.dynamic_loss, "sse_frozen", cfg.dynamic_epochs,
               cfg.seed + 1, stage="dynamic", validation=data.validation or None)
    info = {"static_losses": st.epoch_losses, "dynamic_losses": dy.epoch_losses,
            "validation_losses": dy.val_losses, "dynamic_epochs_kept": dy.epochs_kept,
            "static_seconds": t1 - t0, "dynamic_seconds": time.perf_counter() - t1}
    return dy.model, info


@dataclass
class RecipeResult:
    reports: dict[str, EvalReport]
    training: dict[str, dict]
    counts: dict[str, int]
    seconds: float


def run_recipe(cfg: RecipeConfig | None = None, progress=None) -> RecipeResult:
    """Generate the corpus, train the multi-scale descriptor and its
    single-scale ablation, and score both plus an untrained network on the
    test split. ``progress(message)`` receives stage updates."""
    cfg = cfg or RecipeConfig()
    say = progress or (lambda msg: log.info(msg))
    t0 = time.perf_counter()
    manifests = make_corpus(cfg.corpus)
    pairs = {s: [PairData.build(m, cfg.corpus) for m in manifests if m.split == s]
             for s in ("train", "val", "test")}
    counts = {s: len(v) for s, v in pairs.items()}
    counts["test_instances"] = sum(len(p.manifest.moved_ids) for p in pairs["test"])
    say(f"corpus built: {counts}")
    data = collect_training_data(pairs["train"], pairs["val"], cfg)
    counts.update(static_triplets=len(data.static), dynamic_triplets=len(data.dynamic),
                  validation_triplets=len(data.validation))
    say(f"triplets: {len(data.static)} static, {len(data.dynamic)} dynamic, "
        f"{len(data.validation)} validation")
    models = {"random": init_model(default_arch(("fine", "coarse"),
                                                cfg.relocalize.spec.resolution), cfg.init_seed)}
    training = {}
    for name, scales in (("multi-scale", ("fine", "coarse")), ("single-scale", ("fine",))):
        models[name], info = train_descriptor(data, cfg, scales)
        training[name] = info
        say(f"trained {name} in {info['static_seconds'] + info['dynamic_seconds']:.0f} s")
    reports = {}
    for name, model in models.items():
        reports[name], _ = evaluate_pairs(model, pairs["test"], cfg.relocalize)
        say(f"{name}: recall {reports[name].recall_at((0.2, 20)):.1f}% at 0.2 m / 20 deg")
    return RecipeResult(reports, training, counts, time.perf_counter() - t0)
