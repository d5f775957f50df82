"""Descriptor matching, Kabsch alignment, RANSAC and per-object
re-localization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import DegenerateInputError, RigidPose, rot_z
from .keypoints import HarrisConfig, detect
from .volume import PatchPairSpec, TsdfVolume

log = logging.getLogger(__name__)

# smallest-to-largest singular value ratio below which a point set counts as collinear
COLLINEAR_TOL = 1e-9


class AlignmentFailure(RuntimeError):
    """No pose could be estimated from the correspondences."""


class ObjectTooSmall(AlignmentFailure):
    """The object segment yields too few keypoints to attempt alignment."""


@dataclass(frozen=True)
class Correspondence:
    source_point: tuple[float, float, float]
    target_point: tuple[float, float, float]
    descriptor_distance: float = 0.0
    source_index: int = -1
    target_index: int = -1

    def __post_init__(self):
        if not (np.all(np.isfinite(self.source_point)) and np.all(np.isfinite(self.target_point))):
            raise ValueError("correspondence coordinates must be finite")
        if not self.descriptor_distance >= 0:
            raise ValueError("descriptor distance must be non-negative")


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 4096
    inlier_threshold: float = 0.05
    min_inliers: int = 5
    seed: int = 0
    # extra draws allowed per iteration when the sample is degenerate
    max_resamples: int = 8

    def __post_init__(self):
        if self.max_iterations < 1 or self.min_inliers < 1 or self.max_resamples < 0:
            raise ValueError("iteration and inlier counts must be positive")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def _as_arrays(correspondences) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(correspondences, tuple) and len(correspondences) == 2:
        P, Q = correspondences
        P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
        Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
        if len(P) != len(Q):
            raise ValueError("source and target point counts differ")
        return P, Q
    P = np.array([c.source_point for c in correspondences], dtype=np.float64).reshape(-1, 3)
    Q = np.array([c.target_point for c in correspondences], dtype=np.float64).reshape(-1, 3)
    return P, Q


def match_knn(source_features, target_features, k: int = 4, source_points=None,
              target_points=None) -> list[Correspondence]:
    """Exact k nearest target features (L2) for every source feature.

    Ties go to the lower target index. Points, when given, are copied onto
    the correspondences; otherwise they are left at the origin.
    """
    if k < 1:
        raise ValueError("k must be positive")
    A = np.asarray(source_features, dtype=np.float64)
    B = np.asarray(target_features, dtype=np.float64)
    if A.size == 0 or B.size == 0:
        return []
    A = A.reshape(len(A), -1)
    B = B.reshape(len(B), -1)
    if A.shape[1] != B.shape[1]:
        raise ValueError("feature dimensions differ")
    sp = np.zeros((len(A), 3)) if source_points is None else np.asarray(source_points, float)
    tp = np.zeros((len(B), 3)) if target_points is None else np.asarray(target_points, float)
    kk = min(k, len(B))
    out = []
    for i, a in enumerate(A):
        d = np.sqrt(np.sum((B - a) ** 2, axis=1))
        order = np.argsort(d, kind="stable")[:kk]
        for j in order:
            out.append(Correspondence(tuple(sp[i]), tuple(tp[j]), float(d[j]), i, int(j)))
    return out


def _is_degenerate(P: np.ndarray) -> bool:
    if len(P) < 3:
        return True
    s = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    return bool(s[0] <= 0 or s[1] <= COLLINEAR_TOL * s[0])


def kabsch(correspondences) -> RigidPose:
    """Least-squares rigid pose mapping source points onto target points.

    Accepts Correspondence objects or a ``(P, Q)`` pair of (n, 3) arrays.
    """
    P, Q = _as_arrays(correspondences)
    if len(P) < 3:
        raise DegenerateInputError(f"need at least 3 correspondences, got {len(P)}")
    if _is_degenerate(P):
        raise DegenerateInputError("source points are collinear")
    p0, q0 = P.mean(axis=0), Q.mean(axis=0)
    H = (P - p0).T @ (Q - q0)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidPose(R, q0 - R @ p0)


def _batched_kabsch(P: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Kabsch over a stack of (m, 3, 3) minimal samples."""
    p0 = P.mean(axis=1, keepdims=True)
    q0 = Q.mean(axis=1, keepdims=True)
    H = np.einsum("mni,mnj->mij", P - p0, Q - q0)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ np.swapaxes(U, 1, 2)
    t = q0[:, 0] - np.einsum("mij,mj->mi", R, p0[:, 0])
    return R, t


def _triangles_ok(A: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Non-collinearity of stacked point triples (m, 3, 3)."""
    u, v = A[:, 1] - A[:, 0], A[:, 2] - A[:, 0]
    nu, nv = np.linalg.norm(u, axis=1), np.linalg.norm(v, axis=1)
    w = np.linalg.norm(np.cross(u, v), axis=1)
    return (nu > 0) & (nv > 0) & (w > tol * nu * nv)


def _draw_samples(n: int, seed: int, iterations: int, P: np.ndarray, Q: np.ndarray,
                  resamples: int) -> np.ndarray:
    """One non-degenerate 3-sample per iteration, or -1 rows where every
    attempt was degenerate. Attempts for iteration ``i`` come from a stream
    keyed by ``(seed, i)`` alone."""

    def stream(i):
        return np.random.Generator(np.random.Philox(key=[seed, i]))

    S = np.array([stream(i).choice(n, 3, replace=False) for i in range(iterations)])
    ok = _triangles_ok(P[S]) & _triangles_ok(Q[S])
    for i in np.nonzero(~ok)[0]:
        rng = stream(int(i))
        rng.choice(n, 3, replace=False)
        S[i] = -1
        for _ in range(resamples):
            idx = rng.choice(n, 3, replace=False)
            if _triangles_ok(P[idx][None])[0] and _triangles_ok(Q[idx][None])[0]:
                S[i] = idx
                break
    return S


@dataclass
class RansacResult:
    pose: RigidPose
    inliers: np.ndarray
    iterations: int
    valid_samples: int


def ransac_align(correspondences, config: RansacConfig = RansacConfig(), chunk: int = 512
                 ) -> tuple[RigidPose, np.ndarray]:
    """Robust pose from putative correspondences.

    Each iteration draws a non-degenerate 3-sample, solves Kabsch and counts
    correspondences with residual <= ``inlier_threshold``. The best model
    (most inliers, then lower mean inlier residual, then earlier iteration)
    is refit on all of its inliers. Returns the pose and the indices of those
    inliers.
    """
    res = ransac(correspondences, config, chunk)
    return res.pose, res.inliers


def ransac(correspondences, config: RansacConfig = RansacConfig(), chunk: int = 512
           ) -> RansacResult:
    P, Q = _as_arrays(correspondences)
    n = len(P)
    if n < 3:
        raise AlignmentFailure(f"need at least 3 correspondences, got {n}")
    S = _draw_samples(n, config.seed, config.max_iterations, P, Q, config.max_resamples)
    S = S[S[:, 0] >= 0]
    if len(S) == 0:
        raise AlignmentFailure("every RANSAC sample was degenerate")
    thr = config.inlier_threshold
    best = (-1, np.inf, -1)
    best_mask = None
    for c0 in range(0, len(S), chunk):
        s = S[c0:c0 + chunk]
        R, t = _batched_kabsch(P[s], Q[s])
        pred = np.einsum("mij,nj->mni", R, P) + t[:, None, :]
        r = np.sqrt(np.sum((pred - Q[None]) ** 2, axis=2))
        inl = r <= thr
        counts = inl.sum(axis=1)
        mean_res = np.where(counts > 0, (r * inl).sum(axis=1) / np.maximum(counts, 1), np.inf)
        # lexsort is stable, so the earliest iteration wins exact ties
        m = int(np.lexsort((mean_res, -counts))[0])
        key = (int(counts[m]), -float(mean_res[m]))
        if key > best[:2]:
            best = (key[0], key[1], c0 + m)
            best_mask = inl[m].copy()
    if best[0] < config.min_inliers:
        raise AlignmentFailure(f"best model has {max(best[0], 0)} inliers, "
                               f"need {config.min_inliers}")
    inliers = np.nonzero(best_mask)[0]
    try:
        pose = kabsch((P[inliers], Q[inliers]))
    except DegenerateInputError as e:
        raise AlignmentFailure(f"inlier set is degenerate: {e}") from e
    return RansacResult(pose, inliers, config.max_iterations, len(S))


# -- per-object re-localization ------------------------------------------------------

Describe = Callable[[TsdfVolume, np.ndarray, PatchPairSpec], np.ndarray]


@dataclass
class SceneFeatures:
    """Keypoints and descriptors of a whole target scene, reusable across
    the objects of one scan pair."""

    positions: np.ndarray
    features: np.ndarray


def scene_features(describe: Describe, volume: TsdfVolume, spec: PatchPairSpec | None = None,
                   harris: HarrisConfig = HarrisConfig()) -> SceneFeatures:
    spec = spec or PatchPairSpec()
    pos, _ = detect(volume, harris)
    feats = describe(volume, pos, spec) if len(pos) else np.zeros((0, 1))
    return SceneFeatures(pos, np.asarray(feats))


@dataclass
class RelocalizationDiagnostics:
    object_keypoints: int = 0
    target_keypoints: int = 0
    matches: int = 0
    inliers: int = 0
    inlier_ratio: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"object_keypoints": self.object_keypoints,
                "target_keypoints": self.target_keypoints, "matches": self.matches,
                "inliers": self.inliers, "inlier_ratio": self.inlier_ratio, **self.extra}


def yaw_hypotheses(n: int) -> list[np.ndarray]:
    """``n`` rotations about the vertical axis, evenly spaced from 0."""
    if n < 1:
        raise ValueError("need at least one yaw hypothesis")
    return [rot_z(360.0 * h / n) for h in range(n)]


def relocalize_instance(describe: Describe, source: TsdfVolume, mask: np.ndarray,
                        target: TsdfVolume, spec: PatchPairSpec | None = None,
                        harris: HarrisConfig = HarrisConfig(),
                        ransac_config: RansacConfig = RansacConfig(), k: int = 4,
                        min_keypoints: int = 8, target_features: SceneFeatures | None = None,
                        source_response: np.ndarray | None = None, n_yaw: int = 1
                        ) -> tuple[RigidPose, RelocalizationDiagnostics]:
    """Pose that maps the masked source object into the target scene.

    ``describe(volume, positions, spec)`` returns one feature row per
    position; a DescriptorModel works directly. ``target_features`` and
    ``source_response`` let callers share work across the objects of one
    scan pair.

    With ``n_yaw > 1`` the source patches are also described on sampling
    grids turned by each yaw hypothesis (``describe`` must then accept a
    ``rotation`` keyword); every hypothesis gets its own matching and RANSAC
    run and the pose with the most inliers wins, the earliest on ties.
    """
    spec = spec or PatchPairSpec()
    diag = RelocalizationDiagnostics()
    obj_pos, _ = detect(source, harris, mask=mask, response=source_response)
    diag.object_keypoints = len(obj_pos)
    if len(obj_pos) < min_keypoints:
        raise ObjectTooSmall(f"object has {len(obj_pos)} keypoints, need {min_keypoints}")
    tf = target_features or scene_features(describe, target, spec, harris)
    diag.target_keypoints = len(tf.positions)
    if len(tf.positions) < 3:
        raise AlignmentFailure("target scene has fewer than 3 keypoints")
    best, best_h, n_matches = None, -1, 0
    for h, Rh in enumerate(yaw_hypotheses(n_yaw)):
        # a target patch at R p sees the source around p through R^T
        obj_feat = (describe(source, obj_pos, spec) if n_yaw == 1
                    else describe(source, obj_pos, spec, rotation=Rh.T))
        corr = match_knn(obj_feat, tf.features, k, obj_pos, tf.positions)
        try:
            res = ransac(corr, ransac_config)
        except AlignmentFailure:
            continue
        if best is None or len(res.inliers) > len(best.inliers):
            best, best_h, n_matches = res, h, len(corr)
    if best is None:
        log.info("alignment failed: %d object keypoints, %d yaw hypotheses",
                 len(obj_pos), n_yaw)
        raise AlignmentFailure(f"no hypothesis reached {ransac_config.min_inliers} inliers")
    diag.matches = n_matches
    diag.inliers = len(best.inliers)
    diag.inlier_ratio = len(best.inliers) / n_matches
    if n_yaw > 1:
        diag.extra["yaw_hypothesis_deg"] = 360.0 * best_h / n_yaw
    return best.pose, diag
