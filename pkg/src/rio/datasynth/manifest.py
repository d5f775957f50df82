"""Scan-pair manifests, train/val/test splits and benchmark bundles."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..evaluation import SYMMETRY_TYPES, InstanceRecord, Prediction
from ..geometry import RigidPose, is_rotation
from ..volume import TsdfVolume, save_volume
from .scene import Change, ScenePairManifest, SyntheticScene

log = logging.getLogger(__name__)

SCHEMA = "3rscan-lite/1"
SPLITS = ("train", "val", "test")
# scene counts of the reference dataset's train/val/test splits
DEFAULT_SPLIT_RATIO = (385, 47, 46)


class ManifestError(ValueError):
    """Schema or invariant violations; ``violations`` lists all of them."""

    def __init__(self, violations: Sequence[str], source: str = ""):
        self.violations = list(violations)
        where = f"{source}: " if source else ""
        super().__init__(where + "; ".join(self.violations))


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def manifest_to_dict(m: ScenePairManifest, hidden: bool = False) -> dict:
    """JSON form; ``hidden`` drops every ground-truth pose and the rescan
    scene description (which would reveal the new placements)."""
    d = {"schema": SCHEMA, "scan_pair_id": m.scan_pair_id, "split": m.split,
         "hidden": hidden, "reference": m.reference.to_dict(),
         "changes": [c.to_dict(hidden) for c in m.changes],
         "instances": [r.to_dict(hidden) for r in m.instances]}
    if not hidden and m.rescan is not None:
        d["rescan"] = m.rescan.to_dict()
    return d


def _check_pose(d, what: str, errors: list[str]) -> RigidPose | None:
    try:
        R = np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3)
        t = np.asarray(d["translation"], dtype=np.float64).reshape(3)
    except (KeyError, TypeError, ValueError) as e:
        errors.append(f"{what}: malformed pose ({e})")
        return None
    if not is_rotation(R):
        det = np.linalg.det(R) if np.all(np.isfinite(R)) else float("nan")
        errors.append(f"{what}: rotation is not orthonormal with det +1 (det={det:.3g})")
        return None
    return RigidPose(R, t)


def _check_symmetry(d, what: str, errors: list[str]):
    sym = d.get("symmetry", {})
    if sym.get("type", "none") not in SYMMETRY_TYPES:
        errors.append(f"{what}: unknown symmetry tag {sym.get('type')!r}")
        return False
    axis = np.asarray(sym.get("axis", (0, 0, 1)), dtype=np.float64)
    if axis.shape != (3,) or not np.all(np.isfinite(axis)) or np.linalg.norm(axis) == 0:
        errors.append(f"{what}: symmetry axis must be a non-zero 3-vector")
        return False
    return True


def validate_manifest_dict(d: dict) -> list[str]:
    """Every schema and invariant violation in a manifest dict."""
    errors: list[str] = []
    if d.get("schema") != SCHEMA:
        errors.append(f"schema must be {SCHEMA!r}, got {d.get('schema')!r}")
    for key in ("scan_pair_id", "reference", "changes", "instances"):
        if key not in d:
            errors.append(f"missing field {key!r}")
    if errors and any(e.startswith("missing") for e in errors):
        return errors
    hidden = bool(d.get("hidden", False))
    if d.get("split", "train") not in SPLITS:
        errors.append(f"split must be one of {SPLITS}, got {d.get('split')!r}")

    def scene_ids(sd, name):
        ids = set()
        for o in sd.get("objects", []):
            what = f"{name} object {o.get('id')}"
            ids.add(int(o.get("id", -1)))
            _check_pose(o.get("pose", {}), what, errors)
            _check_symmetry(o, what, errors)
        return ids

    ref_ids = scene_ids(d["reference"], "reference")
    res_ids = scene_ids(d["rescan"], "rescan") if "rescan" in d else None
    if res_ids is None and not hidden:
        errors.append("missing field 'rescan'")

    for c in d["changes"]:
        iid, kind = c.get("instance_id"), c.get("kind")
        what = f"change for instance {iid}"
        if kind not in ("moved", "removed", "added"):
            errors.append(f"{what}: unknown kind {kind!r}")
            continue
        if kind == "moved":
            if "gt_pose" in c:
                _check_pose(c["gt_pose"], what, errors)
            elif not hidden:
                errors.append(f"{what}: moved instance has no gt_pose")
            if iid not in ref_ids or (res_ids is not None and iid not in res_ids):
                errors.append(f"{what}: moved instance must exist in both scenes")
        elif kind == "removed":
            if iid not in ref_ids or (res_ids is not None and iid in res_ids):
                errors.append(f"{what}: removed instance must exist only in the reference")
        elif kind == "added":
            if iid in ref_ids or (res_ids is not None and iid not in res_ids):
                errors.append(f"{what}: added instance must exist only in the rescan")

    for r in d["instances"]:
        iid = r.get("instance_id")
        what = f"instance {iid}"
        _check_symmetry(r, what, errors)
        if r.get("gt_pose") is not None:
            _check_pose(r["gt_pose"], what, errors)
        elif not hidden:
            errors.append(f"{what}: missing gt_pose")
        for k, a in enumerate(r.get("ambiguity_poses", [])):
            _check_pose(a, f"{what} ambiguity pose {k}", errors)
    return errors


def manifest_from_dict(d: dict, source: str = "") -> ScenePairManifest:
    errors = validate_manifest_dict(d)
    if errors:
        raise ManifestError(errors, source)
    changes = [Change(int(c["instance_id"]), c["kind"],
                      RigidPose.from_dict(c["gt_pose"]) if "gt_pose" in c else None)
               for c in d["changes"]]
    rescan = SyntheticScene.from_dict(d["rescan"]) if "rescan" in d else None
    return ScenePairManifest(str(d["scan_pair_id"]), SyntheticScene.from_dict(d["reference"]),
                             rescan, changes, [InstanceRecord.from_dict(r) for r in d["instances"]],
                             d.get("split", "train"))


def save_manifest(m: ScenePairManifest, path, hidden: bool = False) -> None:
    Path(path).write_text(_dumps(manifest_to_dict(m, hidden)))


def assign_splits(ids: Sequence[str], ratio: Sequence[int] = DEFAULT_SPLIT_RATIO,
                  seed: int = 0) -> dict[str, str]:
    """Shuffle ``ids`` and cut them into train/val/test in proportion to
    ``ratio`` (largest-remainder rounding)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    if ratio.shape != (3,) or np.any(ratio < 0) or ratio.sum() == 0:
        raise ValueError("ratio must be three non-negative weights")
    n = len(ids)
    exact = n * ratio / ratio.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[:n - counts.sum()]:
        counts[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    out, start = {}, 0
    for split, c in zip(SPLITS, counts):
        for i in order[start:start + c]:
            out[ids[i]] = split
        start += c
    return {k: out[k] for k in ids}


@dataclass
class ScanDataset:
    manifests: dict[str, ScenePairManifest] = field(default_factory=dict)
    splits: dict[str, str] = field(default_factory=dict)
    root: Path | None = None

    def ids(self, split: str | None = None) -> list[str]:
        return [k for k in self.manifests if split is None or self.splits.get(k) == split]

    def instances(self) -> list[InstanceRecord]:
        return [r for m in self.manifests.values() for r in m.instances]

    def volume_path(self, scan_pair_id: str, which: str = "reference") -> Path:
        return self.root / "scenes" / scan_pair_id / f"{which}.tsdf"


def load_scan_manifest(path) -> ScanDataset:
    """Read one manifest file or a bundle directory (``splits.json`` plus
    ``scenes/<id>/manifest.json``). All violations across all manifests are
    reported together."""
    p = Path(path)
    files = [p] if p.is_file() else sorted((p / "scenes").glob("*/manifest.json"))
    if not files:
        raise ManifestError([f"no manifests found under {p}"])
    errors, out = [], ScanDataset(root=p if p.is_dir() else p.parent)
    for f in files:
        try:
            d = json.loads(f.read_text())
        except json.JSONDecodeError as e:
            errors.append(f"{f}: invalid JSON ({e})")
            continue
        errs = validate_manifest_dict(d)
        if errs:
            errors += [f"{f}: {e}" for e in errs]
            continue
        m = manifest_from_dict(d)
        out.manifests[m.scan_pair_id] = m
        out.splits[m.scan_pair_id] = m.split
    if errors:
        raise ManifestError(errors)
    split_file = p / "splits.json" if p.is_dir() else None
    if split_file is not None and split_file.exists():
        splits = json.loads(split_file.read_text())
        bad = [f"splits.json: {k} -> {v!r}" for k, v in splits.items() if v not in SPLITS]
        if bad:
            raise ManifestError(bad)
        out.splits.update({k: v for k, v in splits.items() if k in out.manifests})
    return out


def predictions_template(manifests: Iterable[ScenePairManifest]) -> list[dict]:
    """One ``failed`` placeholder row per moved instance."""
    rows = []
    for m in manifests:
        for iid in m.moved_ids:
            rows.append(Prediction(m.scan_pair_id, iid, None, "failed").to_dict())
    return rows


VolumeFn = Callable[[SyntheticScene], TsdfVolume]


def export_benchmark_bundle(manifests: Sequence[ScenePairManifest], out_dir, volume_fn: VolumeFn,
                            hidden: bool = False) -> Path:
    """Write ``scenes/<id>/{reference.tsdf, rescan-0.tsdf, manifest.json}``,
    ``splits.json`` and ``predictions_template.json``.

    ``volume_fn`` turns a scene into its TSDF. Output bytes depend only on
    the inputs. The hidden variant omits all ground-truth poses.
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create bundle directory {root}: {e}") from e
    splits = {}
    for m in manifests:
        if m.rescan is None:
            raise ValueError(f"scan pair {m.scan_pair_id} has no rescan scene to export")
        d = root / "scenes" / m.scan_pair_id
        d.mkdir(parents=True, exist_ok=True)
        save_volume(volume_fn(m.reference), d / "reference.tsdf")
        save_volume(volume_fn(m.rescan), d / "rescan-0.tsdf")
        save_manifest(m, d / "manifest.json", hidden)
        splits[m.scan_pair_id] = m.split
    (root / "splits.json").write_text(_dumps(splits))
    (root / "predictions_template.json").write_text(_dumps(predictions_template(manifests)))
    return root


def find_gt_keys(obj, keys=("gt_pose", "ambiguity_poses", "rescan")) -> list[str]:
    """Paths of any ground-truth keys inside a JSON structure."""
    found = []

    def walk(o, path):
        if isinstance(o, dict):
            for k, v in o.items():
                if k in keys:
                    found.append(f"{path}/{k}")
                walk(v, f"{path}/{k}")
        elif isinstance(o, list):
            for i, v in enumerate(o):
                walk(v, f"{path}/{i}")

    walk(obj, "")
    return found
