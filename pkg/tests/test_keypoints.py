import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import box_scene, scene_volume
from rio.datasynth.render import render_scene_frames
from rio.datasynth.scene import SceneObject, SyntheticScene
from rio.evaluation import InstanceRecord
from rio.geometry import RigidPose, rot_z
from rio.keypoints import (HarrisConfig, Keypoint, NegativePool, detect, dynamic_positive_centers,
                           harris3d, harris_response, load_keypoints, load_triplets, nms,
                           nms_arrays, refine_on, sample_dynamic_triplets,
                           sample_static_triplets, save_keypoints, save_triplets)
from rio.volume import PatchPairSpec, TsdfVolume, analytic_tsdf, rotate_patch_90

SMALL = PatchPairSpec(0.3, 0.6, 8)


def _brute_response(v, idx, k=0.01, r=2):
    """Structure tensor summed over the window by explicit loops."""
    def grad(i, j, l):
        g = []
        for a in range(3):
            p = [i, j, l]
            lo, hi = list(p), list(p)
            lo[a] -= 1
            hi[a] += 1
            if lo[a] < 0:
                g.append(v[tuple(hi)] - v[tuple(p)])
            elif hi[a] >= v.shape[a]:
                g.append(v[tuple(p)] - v[tuple(lo)])
            else:
                g.append((v[tuple(hi)] - v[tuple(lo)]) / 2)
        return np.array(g)
    M = np.zeros((3, 3))
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            for dl in range(-r, r + 1):
                q = (idx[0] + di, idx[1] + dj, idx[2] + dl)
                if all(0 <= q[a] < v.shape[a] for a in range(3)):
                    g = grad(*q)
                    M += np.outer(g, g)
    return np.linalg.det(M) - k * np.trace(M) ** 3


def test_response_matches_brute_force(box_volume):
    R = harris_response(box_volume)
    v = box_volume.values.astype(np.float64)
    rng = np.random.default_rng(0)
    idx = [tuple(rng.integers(0, d) for d in box_volume.dims) for _ in range(10)]
    idx += [(0, 0, 0), (52, 44, 28)]
    for i in idx:
        assert R[i] == pytest.approx(_brute_response(v, i), rel=1e-9, abs=1e-12)


def test_box_corner_is_local_response_maximum(box_volume):
    corner = np.array([1.3, 1.2, 0.6])
    c = np.rint(box_volume.world_to_index(corner)).astype(int)
    v = box_volume.values.astype(np.float64)
    # exhaustive brute-force evaluation over a window around the corner
    win = [(c[0] + a, c[1] + b, c[2] + d) for a in range(-3, 4) for b in range(-3, 4)
           for d in range(-3, 4)]
    brute = np.array([_brute_response(v, w) for w in win])
    best = np.array(win[int(np.argmax(brute))])
    # the peak sits on the corner voxel or one step inside it along each axis
    assert np.all(np.abs(box_volume.voxel_centers(best[None])[0] - corner)
                  <= box_volume.voxel_size + 1e-9)
    kps = harris3d(box_volume)
    near = min(kps, key=lambda k: np.linalg.norm(np.asarray(k.position) - corner))
    np.testing.assert_allclose(near.position, box_volume.voxel_centers(best[None])[0])


def test_plane_has_no_keypoints():
    box = SceneObject(1, "box", (5.0, 5.0, 5.0), RigidPose(np.eye(3), (0, 0, -5.0)))
    scene = SyntheticScene((box,), (-1, -1, -1), (1, 1, 1), walls=False)
    vol = analytic_tsdf(scene, (25, 25, 25), 0.05, (-0.6, -0.6, -0.6), 0.15)
    assert harris3d(vol) == []


def test_empty_volume_has_no_keypoints():
    vol = TsdfVolume(np.ones((10, 10, 10)), 0.05, (0, 0, 0), 0.15)
    assert harris3d(vol) == []
    assert len(detect(vol)[0]) == 0


def test_box_has_eight_corner_keypoints(box_volume):
    pos, _ = detect(box_volume)
    corners = np.array([[x, y, z] for x in (0.7, 1.3) for y in (0.8, 1.2) for z in (0.0, 0.6)])
    d = np.linalg.norm(pos[:, None] - corners[None], axis=2).min(axis=0)
    # the bottom corners touch the grid floor and are cut by z = 0
    assert np.all(d[corners[:, 2] > 0] < 0.05)


def test_harris_config_validation():
    with pytest.raises(ValueError):
        HarrisConfig(k=0.0)
    with pytest.raises(ValueError):
        HarrisConfig(gradient_radius=0)


# -- NMS ---------------------------------------------------------------------------

def test_close_pair_keeps_stronger():
    kps = [Keypoint((0, 0, 0), 1.0), Keypoint((0.01, 0, 0), 2.0)]
    assert nms(kps, 0.1) == [Keypoint((0.01, 0.0, 0.0), 2.0)]


def test_sparse_grid_all_kept():
    kps = [Keypoint((0.2 * i, 0.2 * j, 0.0), 1.0 + i + j) for i in range(4) for j in range(4)]
    assert len(nms(kps, 0.1)) == 16


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.floats(0.05, 0.5), st.integers(0, 2**31 - 1))
def test_nms_output_is_separated_and_covers_input(n, radius, seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 1, (n, 3))
    resp = rng.uniform(0, 1, n)
    kp, kr = nms_arrays(pos, resp, radius)
    d = np.linalg.norm(kp[:, None] - kp[None], axis=2) + np.eye(len(kp)) * 9
    assert d.min() >= radius
    # every input point is within radius of a kept point at least as strong
    for p, r in zip(pos, resp):
        close = np.linalg.norm(kp - p, axis=1) < radius
        assert np.any(close & (kr >= r)) or np.any(np.all(kp == p, axis=1))
    assert kr.max() == resp.max()


# -- refinement --------------------------------------------------------------------

def test_refine_on_same_volume_stays_put(box_volume):
    pos, _ = detect(box_volume)
    for p in pos:
        kp = refine_on(box_volume, p, 0.0375)
        assert np.linalg.norm(np.asarray(kp.position) - p) <= box_volume.voxel_size + 1e-9


def test_refine_on_empty_volume_is_none():
    vol = TsdfVolume(np.ones((10, 10, 10)), 0.05, (0, 0, 0), 0.15)
    assert refine_on(vol, (0.2, 0.2, 0.2), 0.1) is None


def test_refine_through_known_transform(box_volume):
    pose = RigidPose(rot_z(90), (2.1, 0.2, 0.0))
    moved = box_scene(pose=RigidPose(rot_z(90), pose.apply([[1.0, 1.0, 0.3]])[0]))
    vol_b = scene_volume(moved)
    pos, _ = detect(box_volume)
    top = pos[pos[:, 2] > 0.3]
    for p in top:
        kp = refine_on(vol_b, pose.apply(p[None])[0], 0.0375)
        back = pose.inverse().apply(np.asarray(kp.position)[None])[0]
        assert np.linalg.norm(back - p) <= box_volume.voxel_size * 1.001


# -- triplets ----------------------------------------------------------------------

def _grid(scene, vs=0.025):
    lo = np.asarray(scene.room_min) - 0.1
    hi = np.asarray(scene.room_max) + 0.1
    dims = tuple(int(np.ceil((h - l) / vs)) + 1 for l, h in zip(lo, hi))
    return {"dims": dims, "voxel_size": vs, "origin": tuple(lo), "truncation": 0.1}


@pytest.fixture(scope="module")
def frames():
    return render_scene_frames(box_scene(walls=True), 6, seed=0)


def test_identical_subsets_give_equal_anchor_and_positive(frames):
    tri = sample_static_triplets(frames, SMALL, 5, 0, grid=_grid(box_scene()),
                                 subsets=(frames, frames), augmentation="none")
    assert len(tri) == 5
    for t in tri:
        np.testing.assert_array_equal(t.anchor[0], t.positive[0])
        np.testing.assert_array_equal(t.anchor[1], t.positive[1])


def test_static_pairs_lie_within_pairing_radius(frames):
    harris = HarrisConfig()
    tri = sample_static_triplets(frames, SMALL, 30, 2, grid=_grid(box_scene()), harris=harris)
    assert tri
    d = [np.linalg.norm(np.subtract(t.anchor_position, t.positive_position)) for t in tri]
    assert max(d) <= harris.pairing_radius + 1e-9


def test_zero_count_gives_no_triplets(frames):
    assert sample_static_triplets(frames, SMALL, 0, 0, grid=_grid(box_scene())) == []


def test_too_few_frames_gives_no_triplets(frames):
    assert sample_static_triplets(frames[:1], SMALL, 3, 0, grid=_grid(box_scene())) == []


def test_static_sampling_is_seeded(frames):
    a = sample_static_triplets(frames, SMALL, 4, 7, grid=_grid(box_scene()))
    b = sample_static_triplets(frames, SMALL, 4, 7, grid=_grid(box_scene()))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.anchor[0], y.anchor[0])
        np.testing.assert_array_equal(x.negative[1], y.negative[1])


def _record(pose):
    return InstanceRecord(1, "box", pose)


def test_translated_object_positive_centers():
    pose = RigidPose(np.eye(3), (1.0, 0.0, 0.0))
    anchors = np.array([[0.7, 0.8, 0.6], [1.3, 1.2, 0.6]])
    np.testing.assert_allclose(dynamic_positive_centers(anchors, pose), anchors + [1, 0, 0])


def test_identity_pose_reduces_to_static_sampling(box_volume):
    mask = np.ones(box_volume.dims, dtype=bool)
    tri = sample_dynamic_triplets(box_volume, box_volume, [_record(RigidPose())], SMALL, 6, 0,
                                  object_masks={1: mask}, augmentation="none")
    assert len(tri) == 6
    for t in tri:
        assert t.anchor_position == t.positive_position
        np.testing.assert_array_equal(t.anchor[0], t.positive[0])


def test_translated_pair_positives_follow_object():
    src = scene_volume(box_scene(center=(0.6, 1.0, 0.3)))
    moved = scene_volume(box_scene(center=(1.6, 1.0, 0.3)))
    shift = RigidPose(np.eye(3), (1.0, 0.0, 0.0))
    tri = sample_dynamic_triplets(src, moved, [_record(shift)], SMALL, 6, 0,
                                  object_masks={1: np.ones(src.dims, bool)})
    assert tri
    for t in tri:
        d = np.subtract(t.positive_position, np.add(t.anchor_position, [1.0, 0.0, 0.0]))
        assert np.linalg.norm(d) <= 0.0375 + 1e-9


def test_instance_without_pose_is_skipped(box_volume, caplog):
    rec = InstanceRecord(1, "box", None)
    tri = sample_dynamic_triplets(box_volume, box_volume, [rec], SMALL, 3, 0,
                                  object_masks={1: np.ones(box_volume.dims, bool)})
    assert tri == [] and "skipped" in caplog.text


def test_yaw90_augmentation_is_a_permutation(box_volume):
    mask = np.ones(box_volume.dims, dtype=bool)
    plain = sample_dynamic_triplets(box_volume, box_volume, [_record(RigidPose())], SMALL, 3, 5,
                                    object_masks={1: mask}, augmentation="none")
    aug = sample_dynamic_triplets(box_volume, box_volume, [_record(RigidPose())], SMALL, 3, 5,
                                  object_masks={1: mask}, augmentation="yaw90")
    for p, a in zip(plain, aug):
        assert p.anchor_position == a.anchor_position
        hits = [k for k in range(4)
                if np.array_equal(rotate_patch_90(p.anchor[0], rot_z(90 * k)), a.anchor[0])]
        assert hits


def test_aligned_anchor_undoes_the_object_turn(box_volume):
    # object turned by 90 degrees about its own center; anchors turned to match
    pose = RigidPose(rot_z(90), np.array([1.0, 1.0, 0.0]) - rot_z(90) @ [1.0, 1.0, 0.0])
    moved = scene_volume(box_scene(pose=RigidPose(rot_z(90), (1.0, 1.0, 0.3))))
    tri = sample_dynamic_triplets(box_volume, moved, [_record(pose)], SMALL, 4, 0,
                                  object_masks={1: np.ones(box_volume.dims, bool)},
                                  augmentation="none", yaw_step=90.0)
    for t in tri:
        mapped = pose.apply(np.asarray(t.anchor_position)[None])[0]
        if np.allclose(mapped, t.positive_position, atol=1e-6):
            np.testing.assert_allclose(t.anchor[0], t.positive[0], atol=1e-5)


def test_negative_pool_draws_from_its_volumes(box_volume):
    pool = NegativePool([box_volume], [np.array([[1.0, 1.0, 0.6]])], keypoint_fraction=1.0)
    vol, pos = pool.draw(np.random.default_rng(0))
    assert vol is box_volume and np.allclose(pos, [1.0, 1.0, 0.6])
    assert NegativePool().draw(np.random.default_rng(0)) is None


# -- files -------------------------------------------------------------------------

def test_keypoint_file_roundtrip(tmp_path, box_volume):
    kps = harris3d(box_volume)[:20]
    save_keypoints(kps, tmp_path / "k.json")
    assert load_keypoints(tmp_path / "k.json") == kps


def test_triplet_store_roundtrip(tmp_path, box_volume):
    tri = sample_dynamic_triplets(box_volume, box_volume, [_record(RigidPose())], SMALL, 3, 0,
                                  object_masks={1: np.ones(box_volume.dims, bool)})
    save_triplets(tri, tmp_path / "t")
    back = load_triplets(tmp_path / "t")
    assert len(back) == 3
    for a, b in zip(tri, back):
        for role in ("anchor", "positive", "negative"):
            for s in range(2):
                np.testing.assert_array_equal(getattr(a, role)[s], getattr(b, role)[s])
        assert a.provenance == b.provenance and a.anchor_position == b.anchor_position
