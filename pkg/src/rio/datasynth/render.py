"""Depth rendering of analytic scenes by sphere tracing."""

from __future__ import annotations

import numpy as np

from ..geometry import RigidPose
from ..volume import DepthFrame


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """Camera-to-world pose for a camera at ``eye`` looking at ``target``
    (camera +z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return RigidPose(np.stack([right, down, fwd], axis=1), eye)


def render_depth(sdf, pose: RigidPose, width: int = 80, height: int = 60, fov_deg: float = 70.0,
                 max_depth: float = 8.0, max_steps: int = 96, eps: float = 1e-4) -> DepthFrame:
    """Sphere-trace ``sdf`` (callable on (n, 3) points) from a pinhole camera."""
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    cx, cy = (width - 1) / 2, (height - 1) / 2
    u, v = np.meshgrid(np.arange(width), np.arange(height))
    dirs_cam = np.stack([(u - cx) / f, (v - cy) / f, np.ones_like(u, dtype=float)], -1).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T
    norms = np.linalg.norm(dirs, axis=1)
    dirs /= norms[:, None]
    origin = pose.translation
    t = np.zeros(len(dirs))
    active = np.ones(len(dirs), dtype=bool)
    hit = np.zeros(len(dirs), dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        d = sdf(origin + t[idx, None] * dirs[idx])
        done = np.abs(d) < eps
        hit[idx[done]] = True
        t[idx] += np.maximum(d, 0.0) * ~done
        gone = t[idx] > max_depth
        active[idx[done | gone]] = False
    # depth is distance along the optical axis
    depth = np.where(hit, t / norms, 0.0).reshape(height, width)
    return DepthFrame(depth, f, f, cx, cy, pose)


def orbit_poses(center, radius: float, height: float, n: int, phase: float = 0.0,
                target_height: float | None = None) -> list[RigidPose]:
    c = np.asarray(center, dtype=np.float64)
    tz = c[2] if target_height is None else target_height
    poses = []
    for k in range(n):
        a = phase + 2 * np.pi * k / n
        eye = c + np.array([radius * np.cos(a), radius * np.sin(a), 0.0])
        eye[2] = height
        poses.append(look_at(eye, [c[0], c[1], tz]))
    return poses


def render_scene_frames(scene, n_frames: int = 12, width: int = 80, height: int = 60,
                        seed: int = 0) -> list[DepthFrame]:
    """Frames from cameras circling inside the room, looking across it."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(scene.room_min), np.asarray(scene.room_max)
    center = (lo + hi) / 2
    radius = 0.35 * min(hi[0] - lo[0], hi[1] - lo[1])
    frames = []
    for k in range(n_frames):
        a = 2 * np.pi * k / n_frames + rng.uniform(-0.1, 0.1)
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), 0.0])
        eye[2] = lo[2] + rng.uniform(1.2, 1.6)
        # look across the room, away from the nearest wall
        target = center - 0.6 * (eye - center)
        target[2] = lo[2] + 0.2
        frames.append(render_depth(scene.sdf, look_at(eye, target), width, height))
    return frames
