"""TSDF volumes: analytic construction, depth fusion, patch extraction and
the binary ``RIOT`` file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import RigidPose

RIOT_MAGIC = b"RIOT"
RIOT_VERSION = 1
DEFAULT_TRUNCATION = 0.15


def _f32(x) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class TsdfVolume:
    """Dense grid of truncated signed distances normalised to [-1, 1].

    ``origin`` is the world position of the center of voxel (0, 0, 0).
    ``values`` has shape ``dims`` and is indexed ``[x, y, z]``. Unobserved
    voxels hold +1 with weight 0. Scalars are rounded to float32 so that the
    on-disk format reproduces the volume exactly.
    """

    values: np.ndarray
    voxel_size: float
    origin: tuple[float, float, float]
    truncation: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError("values must be a non-empty 3D array")
        if not np.all(np.isfinite(v)) or v.min() < -1 or v.max() > 1:
            raise ValueError("TSDF values must be finite and lie in [-1, 1]")
        if not (np.isfinite(self.voxel_size) and self.voxel_size > 0):
            raise ValueError("voxel_size must be positive")
        if not (np.isfinite(self.truncation) and self.truncation > 0):
            raise ValueError("truncation must be positive")
        origin = tuple(_f32(o) for o in np.asarray(self.origin, dtype=np.float64).reshape(3))
        if not all(np.isfinite(origin)):
            raise ValueError("origin must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "voxel_size", _f32(self.voxel_size))
        object.__setattr__(self, "truncation", _f32(self.truncation))
        object.__setattr__(self, "origin", origin)
        if self.weights is not None:
            w = np.array(self.weights, dtype=np.float32)
            if w.shape != v.shape or w.min() < 0 or not np.all(np.isfinite(w)):
                raise ValueError("weights must be non-negative and match values")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin)
        return lo, lo + self.voxel_size * (np.asarray(self.dims) - 1)

    def voxel_centers(self, indices) -> np.ndarray:
        return np.asarray(self.origin) + self.voxel_size * np.asarray(indices, dtype=np.float64)

    def world_to_index(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.voxel_size

    def contains(self, points) -> np.ndarray:
        idx = self.world_to_index(points)
        return np.all((idx >= -1e-9) & (idx <= np.asarray(self.dims) - 1 + 1e-9), axis=-1)

    def grid_points(self) -> np.ndarray:
        axes = [self.origin[i] + self.voxel_size * np.arange(n) for i, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_values(self, values, weights=None) -> "TsdfVolume":
        return TsdfVolume(values, self.voxel_size, self.origin, self.truncation, weights)


@dataclass(frozen=True)
class PatchPairSpec:
    """Side lengths (m) of the two patch scales and their voxel resolution."""

    fine_extent: float = 0.6
    coarse_extent: float = 1.2
    resolution: int = 32

    def __post_init__(self):
        if not (self.coarse_extent > self.fine_extent > 0):
            raise ValueError("need coarse_extent > fine_extent > 0")
        if self.resolution < 8 or self.resolution % 2:
            raise ValueError("resolution must be even and at least 8")

    @property
    def fine_voxel_size(self) -> float:
        return self.fine_extent / self.resolution

    @property
    def coarse_voxel_size(self) -> float:
        return self.coarse_extent / self.resolution


@dataclass(frozen=True)
class DepthFrame:
    """Depth image in meters (0 = invalid), pinhole intrinsics and the
    camera-to-world pose. Camera looks down +z, x right, y down."""

    depth: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    camera_pose: RigidPose = field(default_factory=RigidPose)

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2 or not np.all(np.isfinite(d)) or d.min(initial=0) < 0:
            raise ValueError("depth must be a finite, non-negative 2D array")
        if not all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise ValueError("intrinsics must be finite")
        object.__setattr__(self, "depth", d)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def _check_grid(dims, voxel_size, origin, truncation):
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError("dims must be three positive integers")
    if not (np.isfinite(voxel_size) and voxel_size > 0):
        raise ValueError("voxel_size must be positive")
    if not (np.isfinite(truncation) and truncation > 0):
        raise ValueError("truncation must be positive")
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    return dims, _f32(voxel_size), tuple(_f32(o) for o in origin), _f32(truncation)


def _axes(dims, voxel_size, origin):
    return [origin[i] + voxel_size * np.arange(n, dtype=np.float64) for i, n in enumerate(dims)]


def analytic_tsdf(scene, dims, voxel_size, origin, truncation=DEFAULT_TRUNCATION) -> TsdfVolume:
    """Sample a scene's exact signed distance on the grid, clamp and normalise."""
    dims, voxel_size, origin, truncation = _check_grid(dims, voxel_size, origin, truncation)
    if not getattr(scene, "objects", None) and not getattr(scene, "walls", False):
        raise ValueError("scene is empty")
    ax, ay, az = _axes(dims, voxel_size, origin)
    out = np.empty(dims, dtype=np.float32)
    yz = np.stack(np.meshgrid(ay, az, indexing="ij"), axis=-1)
    for i, x in enumerate(ax):
        pts = np.concatenate([np.full(yz.shape[:-1] + (1,), x), yz], axis=-1)
        out[i] = np.clip(scene.sdf(pts) / truncation, -1.0, 1.0)
    return TsdfVolume(out, voxel_size, origin, truncation)


def grid_for_bounds(lo, hi, voxel_size: float, margin: float = 0.0):
    """``(dims, origin)`` of a grid covering the axis-aligned box [lo, hi]."""
    lo = np.asarray(lo, dtype=np.float64) - margin
    hi = np.asarray(hi, dtype=np.float64) + margin
    dims = tuple(int(np.ceil((h - l) / voxel_size)) + 1 for l, h in zip(lo, hi))
    return dims, tuple(lo)


def fuse_depth(frames: Sequence[DepthFrame], dims, voxel_size, origin,
               truncation=DEFAULT_TRUNCATION) -> TsdfVolume:
    """Projective TSDF integration with unit weight per observation.

    A voxel is updated by a frame when it projects onto a valid depth pixel
    and its projective distance lies within the truncation band. The result
    is the per-voxel mean, so frame order does not matter.
    """
    if not frames:
        raise ValueError("fuse_depth needs at least one frame")
    dims, voxel_size, origin, truncation = _check_grid(dims, voxel_size, origin, truncation)
    if truncation < 2 * voxel_size - 1e-7:
        raise ValueError("truncation must be at least twice the voxel size")
    ax, ay, az = _axes(dims, voxel_size, origin)
    pts = np.stack(np.meshgrid(ax, ay, az, indexing="ij"), axis=-1).reshape(-1, 3)
    acc = np.zeros(len(pts))
    cnt = np.zeros(len(pts))
    for f in frames:
        R, t = f.camera_pose.rotation, f.camera_pose.translation
        cam = (pts - t) @ R
        z = cam[:, 2]
        front = z > 1e-9
        u = np.full(len(pts), -1, dtype=np.int64)
        v = np.full(len(pts), -1, dtype=np.int64)
        u[front] = np.round(f.fx * cam[front, 0] / z[front] + f.cx).astype(np.int64)
        v[front] = np.round(f.fy * cam[front, 1] / z[front] + f.cy).astype(np.int64)
        ok = front & (u >= 0) & (u < f.width) & (v >= 0) & (v < f.height)
        d = np.zeros(len(pts))
        d[ok] = f.depth[v[ok], u[ok]]
        ok &= d > 0
        sdf = d - z
        ok &= np.abs(sdf) <= truncation
        acc[ok] += np.clip(sdf[ok] / truncation, -1.0, 1.0)
        cnt[ok] += 1.0
    values = np.ones(len(pts))
    seen = cnt > 0
    values[seen] = acc[seen] / cnt[seen]
    return TsdfVolume(values.reshape(dims), voxel_size, origin, truncation, cnt.reshape(dims))


# -- patches ---------------------------------------------------------------------

def patch_offsets(extent: float, resolution: int) -> np.ndarray:
    """Sample offsets of a patch grid, shape (res, res, res, 3).

    Sample ``i`` sits at ``(i - res/2) * step`` so index ``res/2`` hits the
    center exactly.
    """
    step = extent / resolution
    r = (np.arange(resolution) - resolution // 2) * step
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1)


def sample_trilinear(volume: TsdfVolume, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at world points; +1 outside the grid."""
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape[:-1]
    idx = volume.world_to_index(pts.reshape(-1, 3))
    dims = np.asarray(volume.dims)
    inside = np.all((idx >= -1e-9) & (idx <= dims - 1 + 1e-9), axis=1)
    out = np.ones(len(idx), dtype=np.float64)
    q = np.clip(idx[inside], 0, dims - 1)
    i0 = np.minimum(np.floor(q).astype(np.int64), np.maximum(dims - 2, 0))
    fr = q - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    V = volume.values
    acc = np.zeros(len(q))
    for cx in (0, 1):
        wx = fr[:, 0] if cx else 1 - fr[:, 0]
        ix = i1[:, 0] if cx else i0[:, 0]
        for cy in (0, 1):
            wy = fr[:, 1] if cy else 1 - fr[:, 1]
            iy = i1[:, 1] if cy else i0[:, 1]
            for cz in (0, 1):
                wz = fr[:, 2] if cz else 1 - fr[:, 2]
                iz = i1[:, 2] if cz else i0[:, 2]
                acc += wx * wy * wz * V[ix, iy, iz]
    out[inside] = acc
    return np.clip(out, -1.0, 1.0).reshape(shape)


def extract_patch(volume: TsdfVolume, center, extent: float, resolution: int,
                  rotation: np.ndarray | None = None) -> np.ndarray:
    """Resample a cube of side ``extent`` around ``center`` into a
    ``resolution``-cubed grid. ``rotation`` turns the sampling grid about the
    center (the patch then shows the volume rotated by its inverse)."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(center)):
        raise ValueError("patch center must be finite")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    off = patch_offsets(extent, resolution)
    if rotation is not None:
        off = off @ np.asarray(rotation, dtype=np.float64).T
    return sample_trilinear(volume, center + off).astype(np.float32)


def invert_tsdf(patch) -> np.ndarray:
    """Map distances to surface proximity: ``1 - |v|`` (surface 1, far 0)."""
    p = np.asarray(patch)
    return (1 - np.abs(p)).astype(p.dtype if p.dtype.kind == "f" else np.float64)


def extract_two_scale(volume: TsdfVolume, center, spec: PatchPairSpec | None = None,
                      rotation: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Inverted (fine, coarse) patches sharing one center."""
    spec = spec or PatchPairSpec()
    fine = extract_patch(volume, center, spec.fine_extent, spec.resolution, rotation)
    coarse = extract_patch(volume, center, spec.coarse_extent, spec.resolution, rotation)
    return invert_tsdf(fine), invert_tsdf(coarse)


def extract_two_scale_batch(volume: TsdfVolume, centers, spec: PatchPairSpec | None = None,
                            chunk: int = 16, rotation: np.ndarray | None = None
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Stacked inverted patches for many centers, shapes (n, res, res, res)."""
    spec = spec or PatchPairSpec()
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    r = spec.resolution
    fine = np.empty((len(centers), r, r, r), np.float32)
    coarse = np.empty_like(fine)
    of = patch_offsets(spec.fine_extent, r)
    oc = patch_offsets(spec.coarse_extent, r)
    if rotation is not None:
        R = np.asarray(rotation, dtype=np.float64)
        of, oc = of @ R.T, oc @ R.T
    for s in range(0, len(centers), chunk):
        c = centers[s:s + chunk, None, None, None, :]
        fine[s:s + chunk] = invert_tsdf(sample_trilinear(volume, c + of).astype(np.float32))
        coarse[s:s + chunk] = invert_tsdf(sample_trilinear(volume, c + oc).astype(np.float32))
    return fine, coarse


def rotate_patch_90(patch: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Apply an axis-aligned rotation to a cubic patch by permuting axes.

    ``out[R @ (i - c) + c] = patch[i]`` with ``c`` the index center, so the
    content turns by ``R``.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.allclose(R, np.rint(R), atol=1e-6):
        raise ValueError("R must be one of the 24 axis-aligned rotations")
    R = np.rint(R).astype(int)
    if not np.allclose(np.abs(R).sum(axis=0), 1) or round(np.linalg.det(R)) != 1:
        raise ValueError("R must be one of the 24 axis-aligned rotations")
    # output axis a reads input axis k with R[a, k] != 0, reversed when negative
    axes = [int(np.nonzero(R[a])[0][0]) for a in range(3)]
    out = np.transpose(patch, axes=axes)
    for a in range(3):
        if R[a, axes[a]] < 0:
            out = np.flip(out, axis=a)
    return np.ascontiguousarray(out)


# -- RIOT binary format ------------------------------------------------------------

def volume_to_bytes(volume: TsdfVolume) -> bytes:
    has_w = volume.weights is not None
    head = RIOT_MAGIC + struct.pack("<I3I f 3f f B", RIOT_VERSION, *volume.dims, volume.voxel_size,
                                    *volume.origin, volume.truncation, int(has_w))
    body = volume.values.astype("<f4").ravel(order="F").tobytes()
    if has_w:
        body += volume.weights.astype("<f4").ravel(order="F").tobytes()
    return head + body


def volume_from_bytes(data: bytes) -> TsdfVolume:
    if data[:4] != RIOT_MAGIC:
        raise ValueError("not a RIOT volume file")
    fmt = "<I3I f 3f f B"
    n = struct.calcsize(fmt)
    version, nx, ny, nz, vs, ox, oy, oz, tr, has_w = struct.unpack(fmt, data[4:4 + n])
    if version != RIOT_VERSION:
        raise ValueError(f"unsupported RIOT version {version}")
    count = nx * ny * nz
    off = 4 + n
    vals = np.frombuffer(data, "<f4", count, off).reshape((nx, ny, nz), order="F")
    weights = None
    if has_w:
        weights = np.frombuffer(data, "<f4", count, off + 4 * count).reshape((nx, ny, nz),
                                                                            order="F")
    expected = off + 4 * count * (2 if has_w else 1)
    if len(data) != expected:
        raise ValueError(f"RIOT payload size mismatch: {len(data)} != {expected}")
    return TsdfVolume(vals, vs, (ox, oy, oz), tr, weights)


def save_volume(volume: TsdfVolume, path) -> None:
    Path(path).write_bytes(volume_to_bytes(volume))


def load_volume(path) -> TsdfVolume:
    return volume_from_bytes(Path(path).read_bytes())
