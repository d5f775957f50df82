import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rio.datasynth import (ChangeConfig, GenerationError, ManifestError, SceneConfig,
                           apply_changes, assign_splits, export_benchmark_bundle,
                           generate_scene, load_scan_manifest, manifest_from_dict,
                           manifest_to_dict, save_manifest)
from rio.datasynth.manifest import find_gt_keys
from rio.datasynth.render import look_at, render_depth, render_scene_frames
from rio.datasynth.scene import (SceneObject, SyntheticScene, object_labels, object_mask,
                                 sdf_box, sdf_cylinder, sdf_sphere)
from rio.evaluation import Prediction, benchmark
from rio.geometry import RigidPose, rot_z
from rio.pipeline import CorpusConfig, make_corpus
from rio.volume import analytic_tsdf, grid_for_bounds


def _coarse_volume(scene):
    dims, origin = grid_for_bounds(np.asarray(scene.room_min) - 0.1,
                                   np.asarray(scene.room_max) + 0.1, 0.1)
    return analytic_tsdf(scene, dims, 0.1, origin, 0.3)


def _pair(seed=0, **change):
    scene = generate_scene(SceneConfig(n_objects=5), seed)
    return apply_changes(scene, ChangeConfig(**change), seed, f"p{seed}")


# -- primitive SDFs ----------------------------------------------------------------

def test_primitive_sdf_values():
    assert sdf_box(np.array([[0, 0, 0.0]]), np.array([1, 1, 1.0]))[0] == -1.0
    assert sdf_box(np.array([[2, 0, 0.0]]), np.array([1, 1, 1.0]))[0] == 1.0
    assert sdf_box(np.array([[2, 2, 1.0]]), np.array([1, 1, 1.0]))[0] == pytest.approx(np.sqrt(2))
    assert sdf_sphere(np.array([[0, 3, 0.0]]), 1.0)[0] == pytest.approx(2.0)
    assert sdf_cylinder(np.array([[0, 0, 3.0]]), 1.0, 1.0)[0] == pytest.approx(2.0)
    assert sdf_cylinder(np.array([[2, 0, 0.0]]), 1.0, 1.0)[0] == pytest.approx(1.0)


def test_surface_samples_lie_on_surface():
    rng = np.random.default_rng(0)
    for prim, size in [("box", (0.2, 0.3, 0.1)), ("sphere", (0.25,)), ("cylinder", (0.2, 0.3))]:
        obj = SceneObject(1, prim, size, RigidPose(rot_z(33), (1, 2, 0.5)))
        pts = obj.surface_samples(200, rng)
        assert np.abs(obj.sdf(pts)).max() < 1e-9


# -- generate_scene ----------------------------------------------------------------

def test_zero_objects_gives_empty_room():
    s = generate_scene(SceneConfig(n_objects=0), 3)
    assert s.objects == () and s.sdf(np.array([[1.6, 1.6, 0.8]]))[0] == pytest.approx(0.8)


def test_same_seed_same_scene():
    assert generate_scene(SceneConfig(), 7) == generate_scene(SceneConfig(), 7)
    assert generate_scene(SceneConfig(), 7) != generate_scene(SceneConfig(), 8)


def test_twenty_objects_do_not_interpenetrate():
    cfg = SceneConfig(n_objects=20, room_size=(5.0, 5.0, 1.6))
    scene = generate_scene(cfg, 11)
    rng = np.random.default_rng(0)
    assert len(scene.objects) == 20
    for a in scene.objects:
        pts = a.surface_samples(400, rng)
        for b in scene.objects:
            if a.id != b.id:
                assert b.sdf(pts).min() >= -0.01, (a.id, b.id)
    lo, hi = np.asarray(scene.room_min), np.asarray(scene.room_max)
    for o in scene.objects:
        p = o.surface_samples(200, rng)
        assert np.all(p[:, :2] >= lo[:2]) and np.all(p[:, :2] <= hi[:2])
        assert p[:, 2].min() >= lo[2] - 1e-9


def test_placement_failure_reports_diagnostics():
    cfg = SceneConfig(n_objects=30, room_size=(1.0, 1.0, 1.0), max_attempts=20)
    with pytest.raises(GenerationError, match="could not place object"):
        generate_scene(cfg, 0)


def test_scene_dict_round_trip():
    s = generate_scene(SceneConfig(), 4)
    assert SyntheticScene.from_dict(json.loads(json.dumps(s.to_dict()))) == s


# -- apply_changes -----------------------------------------------------------------

def test_zero_fractions_leave_scene_unchanged():
    scene = generate_scene(SceneConfig(n_objects=5), 1)
    rescan, man = apply_changes(scene, ChangeConfig(move_fraction=0.0), 1)
    assert rescan.objects == scene.objects and man.changes == [] and man.instances == []


@pytest.mark.parametrize("axis", ["random", "vertical"])
def test_moved_objects_map_reference_surface_onto_rescan(axis):
    rng = np.random.default_rng(2)
    for seed in range(4):
        scene = generate_scene(SceneConfig(n_objects=4), seed)
        rescan, man = apply_changes(scene, ChangeConfig(move_fraction=1.0, rotation_axis=axis),
                                    seed)
        assert len(man.moved_ids) >= 1
        for rec in man.instances:
            assert rec.gt_pose is not None
            pts = scene.object(rec.instance_id).surface_samples(300, rng)
            moved = rec.gt_pose.apply(pts)
            assert np.abs(rescan.object(rec.instance_id).sdf(moved)).max() < 1e-3
            t = np.linalg.norm(rescan.object(rec.instance_id).center
                               - scene.object(rec.instance_id).center)
            assert 0.02 - 1e-9 <= t <= 3.0 + 1e-9


def test_remove_all_leaves_room_only():
    rescan, man = _pair(3, move_fraction=0.0, remove_fraction=1.0)
    assert rescan.objects == ()
    assert {c.kind for c in man.changes} == {"removed"}


def test_added_objects_only_in_rescan():
    scene = generate_scene(SceneConfig(n_objects=3), 5)
    rescan, man = apply_changes(scene, ChangeConfig(move_fraction=0.0, add_fraction=1.0), 5)
    added = [c.instance_id for c in man.changes if c.kind == "added"]
    assert added and all(i not in scene.ids and i in rescan.ids for i in added)


@pytest.mark.parametrize("field", ["move_fraction", "remove_fraction", "add_fraction"])
def test_bad_fraction_raises(field):
    with pytest.raises(ValueError):
        apply_changes(generate_scene(SceneConfig(n_objects=2), 0), ChangeConfig(**{field: 1.5}))


def test_changes_are_deterministic():
    a, b = _pair(9, move_fraction=0.6), _pair(9, move_fraction=0.6)
    assert a[0] == b[0]
    assert json.dumps(manifest_to_dict(a[1])) == json.dumps(manifest_to_dict(b[1]))


def test_identical_twins_get_swap_ambiguity():
    box = SceneObject(1, "box", (0.2, 0.3, 0.25), RigidPose(np.eye(3), (0.8, 0.8, 0.25)))
    twin = SceneObject(2, "box", (0.2, 0.3, 0.25), RigidPose(rot_z(90), (2.4, 2.4, 0.25)))
    scene = SyntheticScene((box, twin))
    _, man = apply_changes(scene, ChangeConfig(move_fraction=0.5, rotation_axis="vertical"), 0)
    rec = man.instances[0]
    other = 2 if rec.instance_id == 1 else 1
    cands = rec.candidates()
    assert any(np.allclose(c.rotation @ scene.object(rec.instance_id).center + c.translation,
                           scene.object(other).center) for c in cands)
    assert rec.ambiguity_poses[0] == RigidPose()


def test_object_labels_agree_with_object_mask():
    scene = generate_scene(SceneConfig(n_objects=5), 2)
    pts = np.random.default_rng(0).uniform(scene.room_min, scene.room_max, (4000, 3))
    labels = object_labels(scene, pts, 0.05)
    for o in scene.objects:
        np.testing.assert_array_equal(labels == o.id, object_mask(scene, o.id, pts, 0.05))


# -- rendering ---------------------------------------------------------------------

def test_render_plane_depth_is_exact():
    plane = lambda p: p[:, 2]  # noqa: E731
    frame = render_depth(plane, look_at((0, 0, 2.0), (0, 0, 0), up=(0, 1, 0)), 16, 12)
    np.testing.assert_allclose(frame.depth, 2.0, atol=1e-3)


def test_scene_frames_see_the_scene():
    scene = generate_scene(SceneConfig(n_objects=3), 0)
    frames = render_scene_frames(scene, n_frames=3, width=20, height=15)
    assert len(frames) == 3 and all((f.depth > 0).mean() > 0.9 for f in frames)


# -- manifests and splits ----------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    _, man = _pair(4, move_fraction=0.6, remove_fraction=0.2, add_fraction=0.2)
    save_manifest(man, tmp_path / "m.json")
    back = load_scan_manifest(tmp_path / "m.json").manifests[man.scan_pair_id]
    assert manifest_to_dict(back) == manifest_to_dict(man)


def test_reflection_in_manifest_names_instance():
    _, man = _pair(4, move_fraction=0.6)
    d = manifest_to_dict(man)
    iid = d["instances"][0]["instance_id"]
    d["instances"][0]["gt_pose"]["rotation"] = [1, 0, 0, 0, 1, 0, 0, 0, -1]
    with pytest.raises(ManifestError, match=f"instance {iid}"):
        manifest_from_dict(d)


def test_every_violation_is_reported():
    _, man = _pair(4, move_fraction=0.6)
    d = manifest_to_dict(man)
    d["instances"][0]["symmetry"]["type"] = "C7"
    del d["instances"][-1]["gt_pose"]
    with pytest.raises(ManifestError) as e:
        manifest_from_dict(d)
    assert len(e.value.violations) == 2


def test_moved_without_pose_is_rejected():
    _, man = _pair(4, move_fraction=0.6)
    d = manifest_to_dict(man)
    for c in d["changes"]:
        c.pop("gt_pose", None)
    with pytest.raises(ManifestError, match="no gt_pose"):
        manifest_from_dict(d)


def test_split_ratio_on_478_scene_corpus():
    corpus = make_corpus(CorpusConfig(n_pairs=478, scene=SceneConfig(n_objects=1),
                                      change=ChangeConfig(move_fraction=0.0)))
    counts = {s: sum(m.split == s for m in corpus) for s in ("train", "val", "test")}
    assert counts == {"train": 385, "val": 47, "test": 46}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 300), st.integers(0, 1000))
def test_splits_partition_ids(n, seed):
    ids = [f"s{i}" for i in range(n)]
    out = assign_splits(ids, seed=seed)
    assert list(out) == ids and set(out.values()) <= {"train", "val", "test"}
    exact = n * np.array([385, 47, 46]) / 478
    got = np.array([sum(v == s for v in out.values()) for s in ("train", "val", "test")])
    assert np.all(np.abs(got - exact) < 1)


# -- benchmark bundles -------------------------------------------------------------

def _bundle_manifests():
    return [_pair(s, move_fraction=0.5)[1] for s in range(2)]


def test_hidden_bundle_has_no_ground_truth(tmp_path):
    root = export_benchmark_bundle(_bundle_manifests(), tmp_path / "b", _coarse_volume,
                                   hidden=True)
    for f in root.rglob("*.json"):
        assert find_gt_keys(json.loads(f.read_text())) == [], f
    ds = load_scan_manifest(root)
    assert all(r.gt_pose is None for r in ds.instances())


def test_bundle_oracle_predictions_score_full_recall(tmp_path):
    root = export_benchmark_bundle(_bundle_manifests(), tmp_path / "b", _coarse_volume)
    ds = load_scan_manifest(root)
    assert ds.volume_path(ds.ids()[0]).exists()
    preds = [Prediction(pid, r.instance_id, r.gt_pose).to_dict()
             for pid, m in ds.manifests.items() for r in m.instances]
    gts = [json.loads((root / "scenes" / pid / "manifest.json").read_text()) for pid in ds.ids()]
    rep = benchmark(preds, gts)
    assert all(r.recall == 100.0 for r in rep.thresholds)
    template = json.loads((root / "predictions_template.json").read_text())
    assert len(template) == len(preds) and all(t["status"] == "failed" for t in template)


def test_bundle_export_is_byte_identical(tmp_path):
    a = export_benchmark_bundle(_bundle_manifests(), tmp_path / "a", _coarse_volume)
    b = export_benchmark_bundle(_bundle_manifests(), tmp_path / "b", _coarse_volume)
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert fa == fb and len(fa) == 2 + 3 * 2
    for rel in fa:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_unwritable_bundle_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_benchmark_bundle(_bundle_manifests(), blocker / "sub", _coarse_volume)
