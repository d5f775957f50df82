"""Benchmark scoring: pose errors, symmetry handling, recall tables and
descriptor matching metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import RigidPose, axis_angle_matrix, is_rotation, rotation_angle

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS: tuple[tuple[float, float], ...] = ((0.10, 10.0), (0.20, 20.0))

SYMMETRY_TYPES = ("none", "C2", "C4", "Cinf")

# Grouping of fine-grained labels for the per-class table; unknown labels fall into "other".
CLASS_GROUPS: dict[str, str] = {
    "chair": "seating", "stool": "seating", "bench": "seating", "armchair": "seating",
    "table": "table / cabinet", "desk": "table / cabinet", "commode": "table / cabinet",
    "shelf": "table / cabinet", "cabinet": "table / cabinet", "nightstand": "table / cabinet",
    "bed": "bed / sofa", "sofa": "bed / sofa", "couch": "bed / sofa",
    "appliance": "appliances", "toilet": "appliances", "sink": "appliances",
    "washing machine": "appliances", "refrigerator": "appliances",
    "pillow": "cushions", "cushion": "cushions", "bean bag": "cushions", "ottoman": "cushions",
    "box": "items", "item": "items", "basket": "items", "bin": "items", "ball": "items",
    "window": "structure", "door": "structure",
}
CLASS_TABLE_ORDER = ("seating", "table / cabinet", "items", "bed / sofa", "cushions",
                     "appliances", "structure")


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class SymmetryClass:
    type: str = "none"
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.type not in SYMMETRY_TYPES:
            raise ValueError(f"unknown symmetry type {self.type!r}")
        a = np.asarray(self.axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(a)
        if not np.isfinite(n) or n == 0:
            raise ValueError("symmetry axis must be a non-zero finite vector")
        object.__setattr__(self, "axis", tuple(float(x) for x in a / n))

    @property
    def order(self) -> int | None:
        return {"none": 1, "C2": 2, "C4": 4, "Cinf": None}[self.type]

    def to_dict(self) -> dict:
        return {"type": self.type, "axis": list(self.axis)}

    @classmethod
    def from_dict(cls, d: dict) -> "SymmetryClass":
        return cls(d.get("type", "none"), tuple(d.get("axis", (0.0, 0.0, 1.0))))


@dataclass
class InstanceRecord:
    """One changed object with its ground-truth pose and ambiguity set.

    ``center`` is the object's reference-scan centroid. Translation errors are
    measured on poses expressed about this point, so symmetric objects spun
    about their own axis are not penalised through the lever arm. It defaults
    to the origin, which gives the plain ``t_p - t_gt`` difference.
    """

    instance_id: int
    class_label: str
    gt_pose: RigidPose | None
    symmetry: SymmetryClass = field(default_factory=SymmetryClass)
    ambiguity_poses: list[RigidPose] = field(default_factory=lambda: [RigidPose()])
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not any(a == RigidPose() for a in self.ambiguity_poses):
            self.ambiguity_poses = [RigidPose()] + list(self.ambiguity_poses)

    @property
    def class_group(self) -> str:
        return class_group(self.class_label)

    def candidates(self) -> list[RigidPose]:
        if self.gt_pose is None:
            raise ScoringError(f"instance {self.instance_id} has no ground-truth pose")
        return [self.gt_pose @ a for a in self.ambiguity_poses]

    def to_dict(self, hidden: bool = False) -> dict:
        d = {"instance_id": self.instance_id, "class_label": self.class_label,
             "symmetry": self.symmetry.to_dict(), "center": list(self.center)}
        if not hidden:
            d["gt_pose"] = None if self.gt_pose is None else self.gt_pose.to_dict()
            d["ambiguity_poses"] = [a.to_dict() for a in self.ambiguity_poses]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceRecord":
        gt = d.get("gt_pose")
        amb = [RigidPose.from_dict(a) for a in d.get("ambiguity_poses", [])] or [RigidPose()]
        return cls(int(d["instance_id"]), d.get("class_label", "other"),
                   None if gt is None else RigidPose.from_dict(gt),
                   SymmetryClass.from_dict(d.get("symmetry", {})), amb,
                   tuple(d.get("center", (0.0, 0.0, 0.0))))


def class_group(label: str, mapping: dict[str, str] | None = None) -> str:
    mapping = CLASS_GROUPS if mapping is None else mapping
    return mapping.get(label.lower(), "other")


@dataclass
class Prediction:
    scan_pair_id: str
    instance_id: int
    pose: RigidPose | None
    status: str = "ok"

    @property
    def failed(self) -> bool:
        return self.status != "ok" or self.pose is None

    def to_dict(self) -> dict:
        pose = self.pose if self.pose is not None else RigidPose()
        return {"scan_pair_id": self.scan_pair_id, "instance_id": self.instance_id,
                "rotation": [float(x) for x in pose.rotation.ravel()],
                "translation": [float(x) for x in pose.translation],
                "status": "failed" if self.failed else "ok"}

    @classmethod
    def from_dict(cls, d: dict) -> "Prediction":
        status = d.get("status", "ok")
        if status not in ("ok", "failed"):
            raise ScoringError(f"bad status {status!r} for instance {d.get('instance_id')}")
        pose = None
        if status == "ok":
            R = np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3)
            if not is_rotation(R):
                raise ScoringError(f"prediction for instance {d['instance_id']} "
                                   "has a non-orthonormal rotation")
            pose = RigidPose(R, d["translation"])
        return cls(str(d["scan_pair_id"]), int(d["instance_id"]), pose, status)


# -- pose errors -----------------------------------------------------------------

def translation_error(t_p, t_gt) -> float:
    """Euclidean norm of ``t_p - t_gt`` in meters."""
    d = np.asarray(t_p, dtype=np.float64).reshape(3) - np.asarray(t_gt, dtype=np.float64).reshape(3)
    return float(np.linalg.norm(d))


def _check_rot(R, name):
    R = np.asarray(R, dtype=np.float64)
    if not is_rotation(R):
        raise ValueError(f"{name} is not a proper rotation matrix")
    return R


def rotation_error(R_p, R_gt, symmetry: SymmetryClass | None = None) -> float:
    """Axis-angle magnitude of ``R_p^-1 R_gt`` in degrees, minimised over the
    rotations the symmetry class makes indistinguishable."""
    R_p = _check_rot(R_p, "R_p")
    R_gt = _check_rot(R_gt, "R_gt")
    symmetry = symmetry or SymmetryClass()
    axis = np.asarray(symmetry.axis)
    if symmetry.type == "Cinf":
        a, b = R_p @ axis, R_gt @ axis
        return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))
    n = symmetry.order
    best = math.inf
    for k in range(n):
        S = axis_angle_matrix(axis, 2 * math.pi * k / n) if k else np.eye(3)
        best = min(best, math.degrees(rotation_angle(R_p.T @ R_gt @ S)))
    return best


def _centered_translation(pose: RigidPose, center: np.ndarray) -> np.ndarray:
    return pose.rotation @ center + pose.translation - center


@dataclass
class Judgement:
    hits: dict[tuple[float, float], bool]
    rotation_error: float | None
    translation_error: float | None
    candidate: int | None
    failed: bool

    def hit(self, threshold) -> bool:
        return self.hits[tuple(threshold)]


def judge_instance(prediction: Prediction, record: InstanceRecord,
                   thresholds: Sequence[tuple[float, float]] = DEFAULT_THRESHOLDS) -> Judgement:
    """Score one prediction against every admissible ground-truth candidate."""
    thresholds = [tuple(map(float, t)) for t in thresholds]
    if prediction.failed:
        return Judgement({t: False for t in thresholds}, None, None, None, True)
    center = np.asarray(record.center, dtype=np.float64)
    best = None
    for idx, cand in enumerate(record.candidates()):
        r = rotation_error(prediction.pose.rotation, cand.rotation, record.symmetry)
        t = translation_error(_centered_translation(prediction.pose, center),
                              _centered_translation(cand, center))
        if best is None or (r, t) < best[:2]:
            best = (r, t, idx)
    r, t, idx = best
    hits = {thr: (t <= thr[0] and r <= thr[1]) for thr in thresholds}
    return Judgement(hits, r, t, idx, False)


# -- benchmark -------------------------------------------------------------------

@dataclass
class ThresholdResult:
    threshold: tuple[float, float]
    recall: float
    mre: float | None
    mte: float | None
    mre_hits: float | None
    mte_hits: float | None


@dataclass
class EvalReport:
    thresholds: list[ThresholdResult]
    per_class: dict[str, dict[str, float | None]]
    class_average: dict[str, float | None]
    attempted: int
    failed: int
    missing: int
    per_instance: list[dict]

    def to_dict(self) -> dict:
        return {
            "thresholds": [
                {"translation_m": r.threshold[0], "rotation_deg": r.threshold[1],
                 "recall": r.recall, "mre_deg": r.mre, "mte_m": r.mte,
                 "mre_hits_deg": r.mre_hits, "mte_hits_m": r.mte_hits}
                for r in self.thresholds],
            "per_class": self.per_class,
            "class_average": self.class_average,
            "counts": {"attempted": self.attempted, "failed": self.failed,
                       "missing": self.missing},
            "instances": self.per_instance,
        }

    def recall_at(self, threshold) -> float:
        threshold = tuple(map(float, threshold))
        for r in self.thresholds:
            if r.threshold == threshold:
                return r.recall
        raise KeyError(threshold)

    def table(self, method: str = "method") -> str:
        return format_report_table({method: self})


def _thr_key(thr) -> str:
    return f"{thr[0]:g}m/{thr[1]:g}deg"


def _median(values):
    return float(np.median(values)) if len(values) else None


def _load_json(obj):
    if isinstance(obj, (str, Path)):
        return json.loads(Path(obj).read_text())
    return obj


def load_ground_truth(manifests) -> dict[tuple[str, int], InstanceRecord]:
    """Accept one manifest dict/path or a list of them; key records by (pair, instance)."""
    manifests = _load_json(manifests)
    if isinstance(manifests, dict):
        manifests = [manifests]
    out: dict[tuple[str, int], InstanceRecord] = {}
    for m in manifests:
        m = _load_json(m)
        pair = str(m["scan_pair_id"])
        for inst in m["instances"]:
            rec = inst if isinstance(inst, InstanceRecord) else InstanceRecord.from_dict(inst)
            if rec.gt_pose is None:
                continue
            out[(pair, rec.instance_id)] = rec
    return out


def load_predictions(preds) -> list[Prediction]:
    preds = _load_json(preds)
    return [p if isinstance(p, Prediction) else Prediction.from_dict(p) for p in preds]


def benchmark(predictions, ground_truth,
              thresholds: Sequence[tuple[float, float]] = DEFAULT_THRESHOLDS,
              class_mapping: dict[str, str] | None = None) -> EvalReport:
    """Score a predictions file against ground-truth manifests.

    Instances without a prediction row count as misses. Median errors are
    taken over non-failed predictions; failures only lower recall.
    """
    thresholds = [tuple(map(float, t)) for t in thresholds]
    gt = load_ground_truth(ground_truth)
    preds = load_predictions(predictions)
    by_key: dict[tuple[str, int], Prediction] = {}
    for p in preds:
        key = (p.scan_pair_id, p.instance_id)
        if key not in gt:
            raise ScoringError(f"prediction for unknown instance {p.instance_id} "
                               f"in scan pair {p.scan_pair_id}")
        by_key[key] = p

    rows = []
    missing = 0
    for key in sorted(gt):
        rec = gt[key]
        pred = by_key.get(key)
        if pred is None:
            missing += 1
            log.warning("no prediction for instance %s in %s; counted as miss", key[1], key[0])
            pred = Prediction(key[0], key[1], None, "failed")
        j = judge_instance(pred, rec, thresholds)
        rows.append((key, rec, j))

    n = len(rows)
    results = []
    ok = [j for _, _, j in rows if not j.failed]
    for thr in thresholds:
        hits = [j for _, _, j in rows if j.hits[thr]]
        results.append(ThresholdResult(
            thr, 100.0 * len(hits) / n if n else 0.0,
            _median([j.rotation_error for j in ok]), _median([j.translation_error for j in ok]),
            _median([j.rotation_error for j in hits]), _median([j.translation_error for j in hits])))

    groups: dict[str, list] = {}
    for _, rec, j in rows:
        groups.setdefault(class_group(rec.class_label, class_mapping), []).append(j)
    per_class = {}
    for g in CLASS_TABLE_ORDER:
        js = groups.get(g, [])
        per_class[g] = {_thr_key(t): (100.0 * sum(x.hits[t] for x in js) / len(js) if js else None)
                        for t in thresholds}
        per_class[g]["count"] = len(js)
    class_average = {}
    for t in thresholds:
        vals = [per_class[g][_thr_key(t)] for g in CLASS_TABLE_ORDER if per_class[g]["count"]]
        class_average[_thr_key(t)] = float(np.mean(vals)) if vals else None

    per_instance = [{"scan_pair_id": k[0], "instance_id": k[1], "class_label": rec.class_label,
                     "failed": j.failed, "rotation_error_deg": j.rotation_error,
                     "translation_error_m": j.translation_error,
                     "hits": {_thr_key(t): j.hits[t] for t in thresholds}}
                    for k, rec, j in rows]
    return EvalReport(results, per_class, class_average, n,
                      sum(j.failed for _, _, j in rows), missing, per_instance)


def _fmt(v, spec):
    return "-" if v is None else format(v, spec)


def format_report_table(reports: dict[str, EvalReport]) -> str:
    """Plain-text recall table, one row per method, plus per-class recall."""
    first = next(iter(reports.values()))
    header = ["Method"]
    for r in first.thresholds:
        header += [f"Recall <{r.threshold[0]:g}m,{r.threshold[1]:g}deg", "MRE [deg]", "MTE [m]"]
    lines = [header]
    for name, rep in reports.items():
        row = [name]
        for r in rep.thresholds:
            row += [f"{r.recall:.2f}", _fmt(r.mre, ".2f"), _fmt(r.mte, ".4f")]
        lines.append(row)
    widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
    out = [" | ".join(c.ljust(w) for c, w in zip(l, widths)) for l in lines]
    out.insert(1, "-+-".join("-" * w for w in widths))

    last = first.thresholds[-1].threshold
    key = _thr_key(last)
    out += ["", f"Per-class recall at <{last[0]:g}m,{last[1]:g}deg"]
    cls_lines = [["class"] + list(reports)]
    for g in CLASS_TABLE_ORDER:
        cls_lines.append([g] + [_fmt(rep.per_class[g][key], ".2f") for rep in reports.values()])
    cls_lines.append(["avg."] + [_fmt(rep.class_average[key], ".2f") for rep in reports.values()])
    w2 = [max(len(l[i]) for l in cls_lines) for i in range(len(cls_lines[0]))]
    out += [" | ".join(c.ljust(w) for c, w in zip(l, w2)) for l in cls_lines]
    return "\n".join(out) + "\n"


# -- descriptor matching metrics -------------------------------------------------

@dataclass
class MatchingMetrics:
    threshold: float
    recall: float
    precision: float
    accuracy: float
    fpr: float
    error_rate: float
    f1: float
    prc: list[tuple[float, float, float]]  # (threshold, precision, recall)

    def as_dict(self) -> dict:
        return {"threshold": self.threshold, "recall": self.recall, "precision": self.precision,
                "accuracy": self.accuracy, "fpr": self.fpr, "error_rate": self.error_rate,
                "f1": self.f1}


def _confusion(pos: np.ndarray, neg: np.ndarray, thr: float):
    tp = int(np.count_nonzero(pos <= thr))
    fp = int(np.count_nonzero(neg <= thr))
    return tp, fp, len(pos) - tp, len(neg) - fp


def keypoint_matching_metrics(positive_distances, negative_distances,
                              target_recall: float = 0.95) -> MatchingMetrics:
    """Match/non-match classification metrics at the operating point where
    recall on positive pairs first reaches ``target_recall``.

    A pair is predicted to match when its descriptor distance is at most the
    threshold.
    """
    pos = np.sort(np.asarray(positive_distances, dtype=np.float64).ravel())
    neg = np.sort(np.asarray(negative_distances, dtype=np.float64).ravel())
    if pos.size == 0:
        raise ValueError("positive distance set is empty")
    need = math.ceil(target_recall * pos.size - 1e-9)
    thr = float(pos[max(need, 1) - 1])
    tp, fp, fn, tn = _confusion(pos, neg, thr)
    total = tp + fp + fn + tn
    precision = tp / (tp + fp)
    recall = tp / pos.size
    prc = []
    for t in np.unique(np.concatenate([pos, neg])):
        a, b, _, _ = _confusion(pos, neg, t)
        prc.append((float(t), a / (a + b), a / pos.size))
    return MatchingMetrics(
        threshold=thr, recall=recall, precision=precision,
        accuracy=(tp + tn) / total,
        fpr=fp / (fp + tn) if (fp + tn) else 0.0,
        error_rate=(fp + fn) / total,
        f1=2 * precision * recall / (precision + recall),
        prc=prc)


def write_prc_csv(metrics: MatchingMetrics, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for row in metrics.prc:
            w.writerow([repr(x) for x in row])


def topk_metric(anchor, positive, negatives, k: int) -> bool:
    """True when the positive ranks within the top ``k`` of positive+negatives
    by L2 distance to the anchor. Ties count against the positive."""
    anchor = np.asarray(anchor, dtype=np.float64)
    d_pos = np.linalg.norm(np.asarray(positive, dtype=np.float64) - anchor)
    d_neg = np.linalg.norm(np.asarray(negatives, dtype=np.float64) - anchor, axis=-1)
    rank = 1 + int(np.count_nonzero(d_neg <= d_pos))
    return rank <= k


def topk_rate(anchors, positives, negative_sets: Iterable, k: int) -> float:
    hits = [topk_metric(a, p, n, k) for a, p, n in zip(anchors, positives, negative_sets)]
    return 100.0 * sum(hits) / len(hits) if hits else 0.0
