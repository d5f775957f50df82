import numpy as np
import pytest

from rio.datasynth import ChangeConfig, SceneConfig
from rio.datasynth.scene import Change, SceneObject, ScenePairManifest, SyntheticScene
from rio.evaluation import InstanceRecord
from rio.geometry import RigidPose
from rio.evaluation import benchmark
from rio.keypoints import HarrisConfig
from rio.pipeline import (CorpusConfig, PairData, RelocalizeConfig, TripletConfig,
                          dynamic_triplets, make_corpus, relocalize_pair)

CORPUS = CorpusConfig(n_pairs=3, seed=5, voxel_size=0.04, truncation=0.12,
                      scene=SceneConfig(n_objects=4, primitive_weights={"box": 1.0}),
                      change=ChangeConfig(move_fraction=0.5, rotation_axis="vertical"))


@pytest.fixture(scope="module")
def pairs():
    return [PairData.build(m, CORPUS) for m in make_corpus(CORPUS)]


def _cheat(pair, iid):
    """Features are positions in rescan coordinates: source points are moved
    by the ground-truth pose, so true correspondences have equal features."""
    gt = pair.manifest.record(iid).gt_pose

    def describe(volume, positions, spec=None, rotation=None):
        pos = np.asarray(positions, dtype=np.float64)
        return gt.apply(pos) if volume is pair.source else pos
    return describe


def test_corpus_is_deterministic_and_split():
    a, b = make_corpus(CORPUS), make_corpus(CORPUS)
    assert [m.reference for m in a] == [m.reference for m in b]
    assert all(m.split in ("train", "val", "test") for m in a)


def test_pair_labels_mark_each_object(pairs):
    p = pairs[0]
    for oid in p.manifest.reference.ids:
        assert p.mask(oid).sum() > 0


@pytest.mark.parametrize("n_yaw", [1, 4])
def test_cheat_descriptor_relocalizes_every_instance(pairs, n_yaw):
    preds = []
    # exact features: a single neighbour avoids symmetric corner layouts aliasing
    cfg = RelocalizeConfig(k=1, min_keypoints=4, n_yaw=n_yaw)
    for p in pairs:
        for iid in p.manifest.moved_ids:
            pr, _ = relocalize_pair(_cheat(p, iid), p, cfg, [iid])
            preds += pr
    gt = [{"scan_pair_id": p.manifest.scan_pair_id, "instances": p.manifest.instances}
          for p in pairs]
    rep = benchmark(preds, gt)
    assert preds and rep.recall_at((0.1, 10)) == 100.0


def test_dynamic_triplets_pair_true_correspondences(pairs):
    radius = HarrisConfig().pairing_radius
    checked = 0
    for p in pairs:
        tr = dynamic_triplets([p], cfg=TripletConfig(per_pair=6, augmentation="none"), seed=1)
        for t in tr:
            gt = p.manifest.record(t.meta["instance_id"]).gt_pose
            moved = gt.apply(np.asarray(t.anchor_position)[None])[0]
            assert np.linalg.norm(moved - np.asarray(t.positive_position)) <= radius + 1e-9
            checked += 1
    assert checked > 0


def test_translated_box_recovered_exactly_with_hash_descriptor():
    box = SceneObject(1, "box", (0.3, 0.2, 0.25), RigidPose(np.eye(3), (1.0, 1.6, 0.25)))
    shift = np.array([0.8, 0.0, 0.0])
    ref = SyntheticScene((box,), (0, 0, 0), (3.2, 3.2, 1.6), walls=False)
    res = SyntheticScene((box.with_pose(RigidPose(np.eye(3), box.pose.translation + shift)),),
                         (0, 0, 0), (3.2, 3.2, 1.6), walls=False)
    gt = RigidPose(np.eye(3), shift)
    man = ScenePairManifest("hash", ref, res, [Change(1, "moved", gt)],
                            [InstanceRecord(1, "box", gt)])
    cfg = CorpusConfig(voxel_size=0.05, truncation=0.15)
    pair = PairData.build(man, cfg)

    def describe(volume, positions, spec=None, rotation=None):
        # a hash of the object-relative grid position: equal only for true matches
        pos = np.asarray(positions, dtype=np.float64)
        local = pos - (shift if volume is pair.target else 0.0)
        keys = np.rint(local / cfg.voxel_size).astype(np.int64)
        h = (keys * np.array([73856093, 19349663, 83492791])).sum(1) % 1_000_003
        return np.stack([h, h * 0.5], axis=1).astype(np.float64)

    preds, _ = relocalize_pair(describe, pair, RelocalizeConfig(k=1, min_keypoints=4, n_yaw=1))
    assert not preds[0].failed
    np.testing.assert_allclose(preds[0].pose.translation, shift, atol=1e-9)
    np.testing.assert_allclose(preds[0].pose.rotation, np.eye(3), atol=1e-9)
