import numpy as np
import pytest

from rio.datasynth.scene import SceneObject, SyntheticScene
from rio.geometry import RigidPose, random_rotation
from rio.volume import analytic_tsdf


def exact_pose_points(rng, n, R=None, t=None, spread=1.0):
    R = random_rotation(rng) if R is None else R
    t = rng.uniform(-2, 2, 3) if t is None else t
    P = rng.uniform(-spread, spread, (n, 3))
    return P, P @ R.T + t, RigidPose(R, t)


def box_scene(center=(1.0, 1.0, 0.3), half=(0.3, 0.2, 0.3), walls=False, pose=None):
    pose = pose or RigidPose(np.eye(3), center)
    obj = SceneObject(1, "box", tuple(half), pose)
    return SyntheticScene((obj,), (0.0, 0.0, 0.0), (2.0, 2.0, 1.2), walls=walls)


def scene_volume(scene, voxel=0.025, trunc=0.1, margin=0.1):
    lo = np.asarray(scene.room_min) - margin
    hi = np.asarray(scene.room_max) + margin
    dims = tuple(int(np.ceil((h - l) / voxel)) + 1 for l, h in zip(lo, hi))
    return analytic_tsdf(scene, dims, voxel, tuple(lo), trunc)


@pytest.fixture(scope="session")
def box_volume():
    return scene_volume(box_scene())


# acceptance criterion -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} - {detail}")
