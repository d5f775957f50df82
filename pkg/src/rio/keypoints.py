"""Harris-3D keypoints on TSDF volumes, non-maxima suppression and
training-triplet sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .evaluation import InstanceRecord
from .geometry import RigidPose, cube_rotations, random_rotation, rot_z
from .volume import (DepthFrame, PatchPairSpec, TsdfVolume, extract_two_scale, fuse_depth,
                     load_volume, rotate_patch_90, save_volume)

log = logging.getLogger(__name__)

NEAR_SURFACE = 0.5
AUGMENTATIONS = ("none", "cube", "yaw90", "yaw", "arbitrary")


@dataclass(frozen=True)
class Keypoint:
    position: tuple[float, float, float]
    response: float

    def to_dict(self) -> dict:
        return {"position": [float(x) for x in self.position], "response": float(self.response)}


@dataclass(frozen=True)
class HarrisConfig:
    # positive responses need k < 1/27 with the cubic trace term
    k: float = 0.01
    gradient_radius: int = 2
    min_response: float = 1e-3
    nms_radius: float = 0.1
    pairing_radius: float = 0.0375
    pairing_fraction: float = 0.1

    def __post_init__(self):
        if not (0 < self.k <= 0.25):
            raise ValueError("k must lie in (0, 0.25]")
        if self.gradient_radius < 1:
            raise ValueError("gradient_radius must be at least 1 voxel")
        if self.nms_radius <= 0 or self.pairing_radius <= 0:
            raise ValueError("radii must be positive")


def harris_response(volume: TsdfVolume, k: float = 0.01, gradient_radius: int = 2) -> np.ndarray:
    """Per-voxel ``det(M) - k trace(M)^3`` with ``M`` the sum of gradient
    outer products over a (2r+1)^3 window. Gradients are central differences
    in index units."""
    v = volume.values.astype(np.float64)
    if min(v.shape) < 3:
        return np.zeros(v.shape)
    g = np.gradient(v)
    size = 2 * gradient_radius + 1
    scale = float(size ** 3)

    def box(a):
        return ndimage.uniform_filter(a, size=size, mode="constant") * scale

    xx, yy, zz = box(g[0] * g[0]), box(g[1] * g[1]), box(g[2] * g[2])
    xy, xz, yz = box(g[0] * g[1]), box(g[0] * g[2]), box(g[1] * g[2])
    det = xx * (yy * zz - yz * yz) - xy * (xy * zz - yz * xz) + xz * (xy * yz - yy * xz)
    tr = xx + yy + zz
    return det - k * tr ** 3


def harris_candidates(volume: TsdfVolume, cfg: HarrisConfig = HarrisConfig(),
                      response: np.ndarray | None = None, mask: np.ndarray | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Positions and responses of near-surface voxels above ``min_response``
    that are local maxima among their near-surface 3x3x3 neighbours, sorted by
    descending response (ties by position)."""
    if response is None:
        response = harris_response(volume, cfg.k, cfg.gradient_radius)
    near = _near_surface(volume)
    local = np.where(near, response, -np.inf)
    peak = ndimage.maximum_filter(local, size=3, mode="constant", cval=-np.inf)
    sel = near & (response >= cfg.min_response) & (local >= peak)
    if mask is not None:
        sel &= mask
    idx = np.argwhere(sel)
    pos = volume.voxel_centers(idx)
    resp = response[sel]
    order = np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0], -resp))
    return pos[order], resp[order]


def harris3d(volume: TsdfVolume, k: float = 0.01, gradient_radius: int = 2,
             min_response: float = 1e-3) -> list[Keypoint]:
    cfg = HarrisConfig(k=k, gradient_radius=gradient_radius, min_response=min_response)
    pos, resp = harris_candidates(volume, cfg)
    return [Keypoint(tuple(p), float(r)) for p, r in zip(pos, resp)]


def nms_arrays(positions: np.ndarray, responses: np.ndarray, radius: float
               ) -> tuple[np.ndarray, np.ndarray]:
    if radius <= 0:
        raise ValueError("radius must be positive")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    responses = np.asarray(responses, dtype=np.float64).reshape(-1)
    if len(positions) == 0:
        return positions, responses
    order = np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0], -responses))
    positions, responses = positions[order], responses[order]
    tree = cKDTree(positions)
    suppressed = np.zeros(len(positions), dtype=bool)
    keep = []
    for i in range(len(positions)):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in tree.query_ball_point(positions[i], radius):
            if j > i and np.linalg.norm(positions[j] - positions[i]) < radius:
                suppressed[j] = True
    keep = np.asarray(keep, dtype=np.int64)
    return positions[keep], responses[keep]


def nms(keypoints: Sequence[Keypoint], radius: float) -> list[Keypoint]:
    """Greedy suppression: strongest first, drop anything closer than
    ``radius`` to an already kept keypoint."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not keypoints:
        return []
    pos = np.array([k.position for k in keypoints], dtype=np.float64)
    resp = np.array([k.response for k in keypoints], dtype=np.float64)
    p, r = nms_arrays(pos, resp, radius)
    return [Keypoint(tuple(a), float(b)) for a, b in zip(p, r)]


def detect(volume: TsdfVolume, cfg: HarrisConfig = HarrisConfig(),
           mask: np.ndarray | None = None, response: np.ndarray | None = None
           ) -> tuple[np.ndarray, np.ndarray]:
    """Harris candidates followed by NMS, as arrays."""
    pos, resp = harris_candidates(volume, cfg, response, mask)
    return nms_arrays(pos, resp, cfg.nms_radius)


def _near_surface(volume: TsdfVolume) -> np.ndarray:
    near = np.abs(volume.values) < NEAR_SURFACE
    if volume.weights is not None:
        near &= volume.weights > 0
    return near


class ResponseCache:
    """Harris response map of one volume plus the pairing threshold."""

    def __init__(self, volume: TsdfVolume, cfg: HarrisConfig = HarrisConfig()):
        self.volume = volume
        self.cfg = cfg
        self.response = harris_response(volume, cfg.k, cfg.gradient_radius)
        near = _near_surface(volume)
        self.near = near
        peak = self.response[near].max() if near.any() else 0.0
        self.threshold = max(cfg.pairing_fraction * peak, cfg.min_response)
        self.has_surface = bool(near.any()) and peak > 0


def refine_on(volume_b: TsdfVolume, keypoint_from_a, search_radius: float,
              cfg: HarrisConfig = HarrisConfig(), cache: ResponseCache | None = None
              ) -> Keypoint | None:
    """Strongest near-surface voxel of ``volume_b`` within ``search_radius``
    of the query position (ties go to the closest), or None when it falls below the pairing threshold
    (a fraction of the volume's peak response)."""
    cache = cache or ResponseCache(volume_b, cfg)
    if not cache.has_surface:
        return None
    pos = np.asarray(getattr(keypoint_from_a, "position", keypoint_from_a), dtype=np.float64)
    vs = volume_b.voxel_size
    c = volume_b.world_to_index(pos)
    r = int(np.ceil(search_radius / vs))
    lo = np.maximum(np.floor(c).astype(int) - r, 0)
    hi = np.minimum(np.ceil(c).astype(int) + r + 1, np.asarray(volume_b.dims))
    if np.any(hi <= lo):
        return None
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    resp = cache.response[sl]
    near = cache.near[sl]
    grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), -1)
    world = volume_b.voxel_centers(grid)
    dist = np.linalg.norm(world - pos, axis=-1)
    within = near & (dist <= search_radius + 1e-9)
    if not within.any():
        return None
    r_in, d_in, w_in = resp[within], dist[within], world[within]
    best = np.lexsort((d_in, -r_in))[0]
    if r_in[best] < cache.threshold:
        return None
    return Keypoint(tuple(w_in[best]), float(r_in[best]))


def save_keypoints(keypoints: Sequence[Keypoint], path) -> None:
    Path(path).write_text(json.dumps([k.to_dict() for k in keypoints], indent=1))


def load_keypoints(path) -> list[Keypoint]:
    return [Keypoint(tuple(d["position"]), float(d["response"]))
            for d in json.loads(Path(path).read_text())]


# -- training triplets -------------------------------------------------------------

PatchPair = tuple[np.ndarray, np.ndarray]


@dataclass
class TrainingTriplet:
    anchor: PatchPair
    positive: PatchPair
    negative: PatchPair
    provenance: str
    anchor_position: tuple = (0.0, 0.0, 0.0)
    positive_position: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)


def _augmentation(mode: str, rng: np.random.Generator):
    """Return (grid_rotation or None, permutation rotation or None)."""
    if mode == "none":
        return None, None
    if mode == "cube":
        rots = cube_rotations()
        return None, rots[int(rng.integers(len(rots)))]
    if mode == "yaw90":
        return None, rot_z(90.0 * int(rng.integers(4)))
    if mode == "yaw":
        return rot_z(float(rng.uniform(0, 360))), None
    if mode == "arbitrary":
        return random_rotation(rng), None
    raise ValueError(f"unknown augmentation {mode!r}; expected one of {AUGMENTATIONS}")


def augment_pair(pair: PatchPair, R90: np.ndarray | None) -> PatchPair:
    if R90 is None:
        return pair
    return rotate_patch_90(pair[0], R90), rotate_patch_90(pair[1], R90)


def _surface_points(volume: TsdfVolume, rng, n: int) -> np.ndarray:
    near = np.abs(volume.values) < NEAR_SURFACE
    if volume.weights is not None:
        near &= volume.weights > 0
    idx = np.argwhere(near)
    if len(idx) == 0:
        return np.zeros((0, 3))
    pick = idx[rng.integers(len(idx), size=n)]
    return volume.voxel_centers(pick)


@dataclass
class NegativePool:
    """Volumes (and optional keypoints) to draw negatives from.

    When keypoints are supplied for a volume, negatives are drawn from them
    with probability ``keypoint_fraction``; otherwise at random surface voxels.
    """

    volumes: list[TsdfVolume] = field(default_factory=list)
    keypoints: list[np.ndarray | None] = field(default_factory=list)
    keypoint_fraction: float = 0.5

    def draw(self, rng: np.random.Generator) -> tuple[TsdfVolume, np.ndarray] | None:
        if not self.volumes:
            return None
        i = int(rng.integers(len(self.volumes)))
        vol = self.volumes[i]
        kps = self.keypoints[i] if i < len(self.keypoints) else None
        if kps is not None and len(kps) and rng.random() < self.keypoint_fraction:
            return vol, kps[int(rng.integers(len(kps)))]
        pts = _surface_points(vol, rng, 1)
        if len(pts) == 0:
            return None
        return vol, pts[0]


def _make_triplet(vol_a, pos_a, vol_b, pos_b, neg, spec, aug, rng, provenance, meta=None,
                  anchor_turn=None):
    grid_R, R90 = _augmentation(aug, rng)
    grid_A = grid_R
    if anchor_turn is not None:
        grid_A = anchor_turn if grid_R is None else anchor_turn @ grid_R
    anchor = augment_pair(extract_two_scale(vol_a, pos_a, spec, grid_A), R90)
    positive = augment_pair(extract_two_scale(vol_b, pos_b, spec, grid_R), R90)
    ngrid, nR90 = _augmentation(aug, rng)
    negative = augment_pair(extract_two_scale(neg[0], neg[1], spec, ngrid), nR90)
    return TrainingTriplet(anchor, positive, negative, provenance, tuple(map(float, pos_a)),
                           tuple(map(float, pos_b)), meta or {})


def split_frames(frames: Sequence[DepthFrame], rng: np.random.Generator,
                 subset_size: int | None = None) -> tuple[list, list]:
    """Two disjoint, non-empty frame subsets (random, fixed by ``rng``)."""
    order = rng.permutation(len(frames))
    half = len(frames) // 2 if subset_size is None else min(subset_size, len(frames) // 2)
    a = [frames[i] for i in sorted(order[:half])]
    b = [frames[i] for i in sorted(order[half:2 * half])]
    return a, b


def sample_static_triplets(frames: Sequence[DepthFrame], spec: PatchPairSpec, count: int,
                           rng_seed: int, *, grid: dict, negatives: NegativePool | None = None,
                           harris: HarrisConfig = HarrisConfig(), augmentation: str = "cube",
                           subsets: tuple[Sequence[DepthFrame], Sequence[DepthFrame]] | None = None
                           ) -> list[TrainingTriplet]:
    """Triplets from two partial reconstructions of one static scene.

    ``grid`` holds ``dims``, ``voxel_size``, ``origin`` and ``truncation`` for
    fusion. ``subsets`` overrides the random disjoint split.
    """
    if count <= 0:
        return []
    rng = np.random.default_rng(rng_seed)
    if subsets is None:
        if len(frames) < 2:
            log.warning("static sampling needs at least 2 frames, got %d", len(frames))
            return []
        subsets = split_frames(frames, rng)
    fa, fb = subsets
    if not fa or not fb:
        log.warning("static sampling got an empty frame subset")
        return []
    vol_a = fuse_depth(fa, **grid)
    vol_b = fuse_depth(fb, **grid)
    pos, _ = detect(vol_a, harris)
    cache = ResponseCache(vol_b, harris)
    pairs = []
    for p in pos:
        kp = refine_on(vol_b, p, harris.pairing_radius, harris, cache)
        if kp is not None:
            pairs.append((p, np.asarray(kp.position)))
    if not pairs:
        log.warning("no keypoint pairs survived refinement")
        return []
    negatives = negatives or NegativePool()
    out = []
    order = rng.permutation(len(pairs))
    for n in range(count):
        pa, pb = pairs[order[n % len(pairs)]]
        neg = negatives.draw(rng) or _same_volume_negative(vol_a, pa, spec, rng)
        if neg is None:
            continue
        out.append(_make_triplet(vol_a, pa, vol_b, pb, neg, spec, augmentation, rng, "static"))
    return out


def _same_volume_negative(vol, anchor, spec, rng, tries=50):
    pts = _surface_points(vol, rng, tries)
    far = np.linalg.norm(pts - anchor, axis=1) > spec.coarse_extent
    if not far.any():
        return None
    return vol, pts[np.argmax(far)]


def _nearest_yaw_turn(R: np.ndarray, step: float) -> np.ndarray | None:
    if step <= 0:
        return None
    yaw = np.degrees(np.arctan2(R[1, 0], R[0, 0]))
    return rot_z(step * round(yaw / step)).T


def dynamic_positive_centers(anchors: np.ndarray, gt_pose: RigidPose) -> np.ndarray:
    return gt_pose.apply(np.asarray(anchors, dtype=np.float64).reshape(-1, 3))


def sample_dynamic_triplets(source: TsdfVolume, rescan: TsdfVolume,
                            instances: Sequence[InstanceRecord], spec: PatchPairSpec,
                            count: int, rng_seed: int, *, object_masks: dict,
                            negatives: NegativePool | None = None,
                            removed_sites: Sequence[np.ndarray] = (),
                            removed_ids: Sequence[int] = (),
                            harris: HarrisConfig = HarrisConfig(), augmentation: str = "cube",
                            removed_fraction: float = 0.25,
                            scene_negative_fraction: float = 0.0,
                            rescan_cache: ResponseCache | None = None,
                            yaw_step: float = 0.0,
                            ) -> list[TrainingTriplet]:
    """Triplets around keypoints of moved objects.

    Anchors are keypoints on each source object (``object_masks`` maps
    instance id to a boolean mask over the source grid); positives are the
    anchors mapped by the ground-truth pose and refined in the rescan.
    Negatives come from ``negatives`` (other scenes) and, with probability
    ``removed_fraction``, from ``removed_sites`` (positions of removed objects
    in the source). ``scene_negative_fraction`` optionally draws hard
    negatives from rescan keypoints away from the positive.

    ``yaw_step`` > 0 turns each anchor's sampling grid by the multiple of
    ``yaw_step`` degrees nearest the object's yaw change, so anchor and
    positive differ only by the rotation left over after the closest
    yaw hypothesis tried at re-localization time.
    """
    if count <= 0:
        return []
    rng = np.random.default_rng(rng_seed)
    cache = rescan_cache or ResponseCache(rescan, harris)
    pairs = []
    for rec in instances:
        if rec.gt_pose is None:
            if rec.instance_id not in removed_ids:
                log.warning("instance %s has no pose in the rescan and is not marked removed; "
                            "skipped", rec.instance_id)
            continue
        mask = object_masks.get(rec.instance_id)
        if mask is None:
            log.warning("no source mask for instance %s; skipped", rec.instance_id)
            continue
        anchors, _ = detect(source, harris, mask=mask)
        for a, c in zip(anchors, dynamic_positive_centers(anchors, rec.gt_pose)):
            kp = refine_on(rescan, c, harris.pairing_radius, harris, cache)
            if kp is not None:
                pairs.append((a, np.asarray(kp.position), rec.instance_id,
                              _nearest_yaw_turn(rec.gt_pose.rotation, yaw_step)))
    if not pairs:
        return []
    negatives = negatives or NegativePool()
    removed = [np.asarray(s).reshape(-1, 3) for s in removed_sites if len(s)]
    scene_kps = None
    if scene_negative_fraction > 0:
        scene_kps, _ = detect(rescan, harris, response=cache.response)
    out = []
    order = rng.permutation(len(pairs))
    for n in range(count):
        pa, pb, iid, turn = pairs[order[n % len(pairs)]]
        u = rng.random()
        neg = None
        if removed and u < removed_fraction:
            sites = removed[int(rng.integers(len(removed)))]
            neg = (source, sites[int(rng.integers(len(sites)))])
        elif scene_kps is not None and u < removed_fraction + scene_negative_fraction:
            far = scene_kps[np.linalg.norm(scene_kps - pb, axis=1) > 4 * harris.pairing_radius]
            if len(far):
                neg = (rescan, far[int(rng.integers(len(far)))])
        if neg is None:
            neg = negatives.draw(rng) or _same_volume_negative(rescan, pb, spec, rng)
        if neg is None:
            continue
        out.append(_make_triplet(source, pa, rescan, pb, neg, spec, augmentation, rng, "dynamic",
                                 {"instance_id": iid}, turn))
    return out


# -- triplet store -------------------------------------------------------------------

def _patch_volume(patch: np.ndarray) -> TsdfVolume:
    return TsdfVolume(patch, 1.0, (0.0, 0.0, 0.0), 1.0)


def save_triplets(triplets: Sequence[TrainingTriplet], directory) -> None:
    """Write each patch as a RIOT file plus an ``index.json``."""
    d = Path(directory)
    (d / "patches").mkdir(parents=True, exist_ok=True)
    index = {}
    for i, t in enumerate(triplets):
        entry = {"provenance": t.provenance, "anchor_position": list(t.anchor_position),
                 "positive_position": list(t.positive_position)}
        for role in ("anchor", "positive", "negative"):
            pair = getattr(t, role)
            paths = []
            for scale, patch in zip(("fine", "coarse"), pair):
                rel = f"patches/{i:06d}_{role}_{scale}.tsdf"
                save_volume(_patch_volume(patch), d / rel)
                paths.append(rel)
            entry[role] = paths
        index[f"{i:06d}"] = entry
    (d / "index.json").write_text(json.dumps(index, indent=1))


def load_triplets(directory) -> list[TrainingTriplet]:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    out = []
    for key in sorted(index):
        e = index[key]
        pairs = {role: tuple(np.array(load_volume(d / p).values) for p in e[role])
                 for role in ("anchor", "positive", "negative")}
        out.append(TrainingTriplet(pairs["anchor"], pairs["positive"], pairs["negative"],
                                   e["provenance"], tuple(e["anchor_position"]),
                                   tuple(e["positive_position"])))
    return out
