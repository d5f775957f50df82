"""Analytic primitive scenes and the scene-change generator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..evaluation import InstanceRecord, SymmetryClass
from ..geometry import (RigidPose, axis_angle_matrix, random_rotation, random_unit_vector,
                        rot_x, rot_y, rot_z)

log = logging.getLogger(__name__)

PRIMITIVES = ("box", "sphere", "cylinder")
UP = np.array([0.0, 0.0, 1.0])


class GenerationError(RuntimeError):
    pass


# -- primitive signed distances (object frame, centered at the origin) -----------

def sdf_box(p: np.ndarray, half: np.ndarray) -> np.ndarray:
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def sdf_sphere(p: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(p, axis=-1) - radius


def sdf_cylinder(p: np.ndarray, radius: float, half_height: float) -> np.ndarray:
    d = np.stack([np.linalg.norm(p[..., :2], axis=-1) - radius, np.abs(p[..., 2]) - half_height],
                 axis=-1)
    return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)


@dataclass(frozen=True)
class SceneObject:
    """A rigid primitive placed in the world.

    ``size`` holds half-extents for boxes, ``(radius,)`` for spheres and
    ``(radius, half_height)`` for z-aligned cylinders.
    """

    id: int
    primitive: str
    size: tuple[float, ...]
    pose: RigidPose = field(default_factory=RigidPose)
    symmetry: SymmetryClass = field(default_factory=SymmetryClass)
    class_label: str = "item"

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        n = {"box": 3, "sphere": 1, "cylinder": 2}[self.primitive]
        if len(self.size) != n or min(self.size) <= 0:
            raise ValueError(f"{self.primitive} needs {n} positive size parameters")
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def local_sdf(self, p: np.ndarray) -> np.ndarray:
        if self.primitive == "box":
            return sdf_box(p, np.asarray(self.size))
        if self.primitive == "sphere":
            return sdf_sphere(p, self.size[0])
        return sdf_cylinder(p, self.size[0], self.size[1])

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        local = (p - self.pose.translation) @ self.pose.rotation
        return self.local_sdf(local)

    @property
    def bounding_radius(self) -> float:
        if self.primitive == "box":
            return float(np.linalg.norm(self.size))
        if self.primitive == "sphere":
            return self.size[0]
        return float(math.hypot(self.size[0], self.size[1]))

    def half_extent_along(self, direction) -> float:
        """Support half-width of the object along a world direction."""
        d = self.pose.rotation.T @ np.asarray(direction, dtype=np.float64)
        if self.primitive == "box":
            return float(np.abs(d) @ np.asarray(self.size))
        if self.primitive == "sphere":
            return self.size[0]
        r, h = self.size
        return float(r * np.linalg.norm(d[:2]) + h * abs(d[2]))

    def footprint_radius(self) -> float:
        """Radius of the xy-circle enclosing the object's projection."""
        if self.primitive == "sphere":
            return self.size[0]
        if self.primitive == "box":
            corners = np.array(list(np.ndindex(2, 2, 2)), dtype=float) * 2 - 1
            w = (corners * np.asarray(self.size)) @ self.pose.rotation.T
            return float(np.linalg.norm(w[:, :2], axis=1).max())
        r, h = self.size
        a = self.pose.rotation @ UP
        return float(r + h * np.linalg.norm(a[:2]))

    def surface_samples(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Approximately uniform points on the object surface, world frame."""
        if self.primitive == "sphere":
            v = rng.standard_normal((n, 3))
            local = self.size[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
        elif self.primitive == "box":
            half = np.asarray(self.size)
            areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
            axis = rng.choice(3, size=n, p=areas / areas.sum())
            local = rng.uniform(-1, 1, (n, 3)) * half
            sign = rng.choice([-1.0, 1.0], size=n)
            local[np.arange(n), axis] = sign * half[axis]
        else:
            r, h = self.size
            side, cap = 2 * math.pi * r * 2 * h, 2 * math.pi * r * r
            on_side = rng.random(n) < side / (side + cap)
            theta = rng.uniform(0, 2 * math.pi, n)
            rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
            z = np.where(on_side, rng.uniform(-h, h, n), rng.choice([-h, h], size=n))
            local = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
        return self.pose.apply(local)

    def with_pose(self, pose: RigidPose) -> "SceneObject":
        return replace(self, pose=pose)

    def same_shape(self, other: "SceneObject") -> bool:
        return self.primitive == other.primitive and np.allclose(self.size, other.size, atol=1e-9)

    def to_dict(self) -> dict:
        return {"id": self.id, "primitive": self.primitive, "size": list(self.size),
                "pose": self.pose.to_dict(), "symmetry": self.symmetry.to_dict(),
                "class_label": self.class_label}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(int(d["id"]), d["primitive"], tuple(d["size"]), RigidPose.from_dict(d["pose"]),
                   SymmetryClass.from_dict(d.get("symmetry", {})), d.get("class_label", "item"))


@dataclass(frozen=True)
class SyntheticScene:
    """Primitive objects inside an open-top room (floor plus four walls)."""

    objects: tuple[SceneObject, ...]
    room_min: tuple[float, float, float] = (0.0, 0.0, 0.0)
    room_max: tuple[float, float, float] = (3.2, 3.2, 1.6)
    seed: int = 0
    walls: bool = True

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "room_min", tuple(float(x) for x in self.room_min))
        object.__setattr__(self, "room_max", tuple(float(x) for x in self.room_max))

    def room_sdf(self, p: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.room_min)
        hi = np.asarray(self.room_max).copy()
        hi[2] = lo[2] + 1e3  # open top
        center, half = (lo + hi) / 2, (hi - lo) / 2
        return -sdf_box(p - center, half)

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        d = self.room_sdf(p) if self.walls else np.full(p.shape[:-1], np.inf)
        for obj in self.objects:
            d = np.minimum(d, obj.sdf(p))
        return d

    def object(self, obj_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise KeyError(obj_id)

    @property
    def ids(self) -> list[int]:
        return [o.id for o in self.objects]

    def without(self, obj_id: int) -> "SyntheticScene":
        return replace(self, objects=tuple(o for o in self.objects if o.id != obj_id))

    def to_dict(self) -> dict:
        return {"objects": [o.to_dict() for o in self.objects], "room_min": list(self.room_min),
                "room_max": list(self.room_max), "seed": self.seed, "walls": self.walls}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        return cls(tuple(SceneObject.from_dict(o) for o in d["objects"]), tuple(d["room_min"]),
                   tuple(d["room_max"]), int(d.get("seed", 0)), bool(d.get("walls", True)))


# -- symmetry --------------------------------------------------------------------

def self_symmetries(primitive: str, size) -> tuple[SymmetryClass, list[np.ndarray]]:
    """Symmetry class about the local z axis, plus object-frame rotations
    that together with it cover the primitive's full rotational symmetry."""
    if primitive in ("sphere", "cylinder"):
        return SymmetryClass("Cinf", (0, 0, 1)), [np.eye(3), rot_x(180)]
    a, b, c = size
    eq = lambda u, v: abs(u - v) < 1e-9  # noqa: E731
    if eq(a, b) and eq(b, c):
        return SymmetryClass("C4", (0, 0, 1)), [np.eye(3), rot_x(90), rot_x(180), rot_x(270),
                                               rot_y(90), rot_y(270)]
    if eq(a, b):
        return SymmetryClass("C4", (0, 0, 1)), [np.eye(3), rot_x(180)]
    if eq(a, c):
        return SymmetryClass("C4", (0, 1, 0)), [np.eye(3), rot_x(180)]
    if eq(b, c):
        return SymmetryClass("C4", (1, 0, 0)), [np.eye(3), rot_y(180)]
    return SymmetryClass("C2", (0, 0, 1)), [np.eye(3), rot_x(180)]


def world_symmetry(obj: SceneObject) -> SymmetryClass:
    """Object symmetry with its axis expressed in the scene frame."""
    axis = obj.pose.rotation @ np.asarray(obj.symmetry.axis)
    return SymmetryClass(obj.symmetry.type, tuple(axis))


def _local_to_world_about_center(obj: SceneObject, S: np.ndarray) -> RigidPose:
    R = obj.pose.rotation @ S @ obj.pose.rotation.T
    c = obj.center
    return RigidPose(R, c - R @ c)


# -- generation ------------------------------------------------------------------

@dataclass
class SceneConfig:
    room_size: tuple[float, float, float] = (3.2, 3.2, 1.6)
    n_objects: int = 6
    primitive_weights: dict = field(default_factory=lambda: {"box": 0.7, "cylinder": 0.2,
                                                             "sphere": 0.1})
    box_half_range: tuple[float, float] = (0.1, 0.35)
    radius_range: tuple[float, float] = (0.1, 0.3)
    half_height_range: tuple[float, float] = (0.1, 0.4)
    upright: bool = True
    duplicate_prob: float = 0.1
    min_gap: float = 0.05
    wall_margin: float = 0.05
    max_attempts: int = 500


def _class_label(primitive: str, size) -> str:
    if primitive == "sphere":
        return "ball" if size[0] < 0.2 else "bean bag"
    if primitive == "cylinder":
        return "stool" if size[1] > size[0] else "bin"
    a, b, c = sorted(size)
    if c > 0.35 and a > 0.25:
        return "bed" if c > 0.4 else "sofa"
    if c > 0.3:
        return "table"
    if a < 0.15 and c < 0.25:
        return "box"
    if c < 0.3 and a > 0.18:
        return "cabinet"
    return "chair"


def _random_shape(cfg: SceneConfig, rng: np.random.Generator):
    names = sorted(cfg.primitive_weights)
    w = np.array([cfg.primitive_weights[n] for n in names], dtype=float)
    prim = names[int(rng.choice(len(names), p=w / w.sum()))]
    if prim == "box":
        size = tuple(round(float(x), 3) for x in rng.uniform(*cfg.box_half_range, 3))
    elif prim == "sphere":
        size = (round(float(rng.uniform(*cfg.radius_range)), 3),)
    else:
        size = (round(float(rng.uniform(*cfg.radius_range)), 3),
                round(float(rng.uniform(*cfg.half_height_range)), 3))
    return prim, size


def _rests_on_floor(obj: SceneObject, floor_z: float) -> RigidPose:
    h = obj.half_extent_along(UP)
    t = obj.pose.translation.copy()
    t[2] = floor_z + h
    return RigidPose(obj.pose.rotation, t)


def _fits(obj: SceneObject, placed, room_min, room_max, gap, margin) -> bool:
    lo, hi = np.asarray(room_min), np.asarray(room_max)
    c = obj.center
    for ax in range(2):
        e = np.zeros(3)
        e[ax] = 1.0
        h = obj.half_extent_along(e)
        if c[ax] - h < lo[ax] + margin or c[ax] + h > hi[ax] - margin:
            return False
    if c[2] - obj.half_extent_along(UP) < lo[2] - 1e-9:
        return False
    for other in placed:
        if _overlap(obj, other, gap):
            return False
    return True


def _overlap(a: SceneObject, b: SceneObject, gap: float) -> bool:
    """Conservative separation test: footprint circles for upright-resting
    objects, bounding spheres otherwise."""
    d = b.center - a.center
    if np.linalg.norm(d) >= a.bounding_radius + b.bounding_radius + gap:
        return False
    dxy = np.linalg.norm(d[:2])
    return dxy < a.footprint_radius() + b.footprint_radius() + gap


def _place(obj: SceneObject, placed, cfg: SceneConfig, room_min, room_max,
           rng: np.random.Generator) -> SceneObject | None:
    lo, hi = np.asarray(room_min), np.asarray(room_max)
    for _ in range(cfg.max_attempts):
        if cfg.upright:
            R = rot_z(float(rng.uniform(0, 360)))
        else:
            R = random_rotation(rng)
        cand = obj.with_pose(RigidPose(R, np.zeros(3)))
        xy = rng.uniform(lo[:2], hi[:2])
        if cfg.upright:
            cand = cand.with_pose(_rests_on_floor(cand.with_pose(RigidPose(R, [*xy, 0])), lo[2]))
        else:
            h = cand.half_extent_along(UP)
            z = rng.uniform(lo[2] + h, max(lo[2] + h, hi[2] - h))
            cand = cand.with_pose(RigidPose(R, [*xy, z]))
        if _fits(cand, placed, room_min, room_max, cfg.min_gap, cfg.wall_margin):
            return cand
    return None


def generate_scene(config: SceneConfig | None = None, seed: int = 0) -> SyntheticScene:
    """Random primitives placed by rejection sampling; deterministic per seed."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    room_min = (0.0, 0.0, 0.0)
    room_max = tuple(float(x) for x in cfg.room_size)
    placed: list[SceneObject] = []
    for i in range(cfg.n_objects):
        if placed and rng.random() < cfg.duplicate_prob:
            src = placed[int(rng.integers(len(placed)))]
            prim, size = src.primitive, src.size
        else:
            prim, size = _random_shape(cfg, rng)
        sym, _ = self_symmetries(prim, size)
        obj = SceneObject(i + 1, prim, size, RigidPose(), sym, _class_label(prim, size))
        obj = _place(obj, placed, cfg, room_min, room_max, rng)
        if obj is None:
            raise GenerationError(
                f"could not place object {i + 1} ({prim}, size {size}) after "
                f"{cfg.max_attempts} attempts; {len(placed)} objects placed in room {room_max}")
        placed.append(obj)
    return SyntheticScene(tuple(placed), room_min, room_max, seed)


# -- changes ---------------------------------------------------------------------

@dataclass
class ChangeConfig:
    move_fraction: float = 0.5
    remove_fraction: float = 0.0
    add_fraction: float = 0.0
    translation_range: tuple[float, float] = (0.02, 3.0)
    rotation_range_deg: tuple[float, float] = (0.0, 180.0)
    # "random": uniform axis; "vertical": yaw only, objects stay on the floor
    rotation_axis: str = "random"
    max_attempts: int = 500


@dataclass
class Change:
    instance_id: int
    kind: str  # moved | removed | added
    gt_pose: RigidPose | None = None

    def to_dict(self, hidden: bool = False) -> dict:
        d = {"instance_id": self.instance_id, "kind": self.kind}
        if self.kind == "moved" and not hidden:
            d["gt_pose"] = self.gt_pose.to_dict()
        return d


@dataclass
class ScenePairManifest:
    scan_pair_id: str
    reference: SyntheticScene
    rescan: SyntheticScene | None
    changes: list[Change]
    instances: list[InstanceRecord]
    split: str = "train"

    @property
    def moved_ids(self) -> list[int]:
        return [c.instance_id for c in self.changes if c.kind == "moved"]

    def record(self, instance_id: int) -> InstanceRecord:
        for r in self.instances:
            if r.instance_id == instance_id:
                return r
        raise KeyError(instance_id)


def _check_fraction(name, v):
    if not (0.0 <= v <= 1.0) or not np.isfinite(v):
        raise ValueError(f"{name} must lie in [0, 1], got {v}")


def _move_object(obj: SceneObject, others, scene: SyntheticScene, cfg: ChangeConfig,
                 upright: bool, rng: np.random.Generator) -> tuple[SceneObject, RigidPose] | None:
    lo_t, hi_t = cfg.translation_range
    for _ in range(cfg.max_attempts):
        mag = rng.uniform(lo_t, hi_t)
        angle = math.radians(rng.uniform(*cfg.rotation_range_deg))
        if cfg.rotation_axis == "vertical" or obj.primitive == "sphere":
            # a sphere's spin is unobservable; keep it on its symmetry axis
            axis = obj.pose.rotation @ np.asarray(obj.symmetry.axis) \
                if obj.primitive == "sphere" else UP
        else:
            axis = random_unit_vector(rng)
        R = axis_angle_matrix(axis, angle)
        if upright:
            phi = rng.uniform(0, 2 * math.pi)
            delta = mag * np.array([math.cos(phi), math.sin(phi), 0.0])
        else:
            delta = mag * random_unit_vector(rng)
        c = obj.center
        moved_rot = R @ obj.pose.rotation
        new_center = c + delta
        cand = obj.with_pose(RigidPose(moved_rot, new_center))
        if upright:
            cand = cand.with_pose(_rests_on_floor(cand, scene.room_min[2]))
        if not _fits(cand, others, scene.room_min, scene.room_max, 0.05, 0.05):
            continue
        new_c = cand.center
        gt = RigidPose(R, new_c - R @ c)
        delta_norm = np.linalg.norm(new_c - c)
        if not (lo_t - 1e-9 <= delta_norm <= hi_t + 1e-9):
            continue
        return cand, gt
    return None


def _instance_records(reference: SyntheticScene, rescan: SyntheticScene,
                      moved: dict[int, RigidPose]) -> list[InstanceRecord]:
    records = []
    for oid, gt in moved.items():
        obj = reference.object(oid)
        _, reps = self_symmetries(obj.primitive, obj.size)
        amb = [RigidPose()] + [_local_to_world_about_center(obj, S) for S in reps[1:]]
        for other in rescan.objects:
            if other.id == oid or not other.same_shape(obj):
                continue
            for S in reps:
                # reference object mapped onto its twin's rescan placement
                T = other.pose @ RigidPose(S) @ obj.pose.inverse()
                amb.append(gt.inverse() @ T)
        records.append(InstanceRecord(oid, obj.class_label, gt, world_symmetry(obj), amb,
                                      tuple(float(x) for x in obj.center)))
    return records


def apply_changes(scene: SyntheticScene, config: ChangeConfig | None = None, seed: int = 0,
                  scan_pair_id: str = "pair", scene_config: SceneConfig | None = None
                  ) -> tuple[SyntheticScene, ScenePairManifest]:
    """Move, remove and add objects; returns the rescan and its manifest.

    Counts are ``round(fraction * n_objects)``. A moved object that cannot be
    relocated without collisions stays in place (logged) rather than failing
    the whole pair.
    """
    cfg = config or ChangeConfig()
    for name in ("move_fraction", "remove_fraction", "add_fraction"):
        _check_fraction(name, getattr(cfg, name))
    if cfg.rotation_axis not in ("random", "vertical"):
        raise ValueError(f"rotation_axis must be 'random' or 'vertical', got {cfg.rotation_axis!r}")
    rng = np.random.default_rng(seed)
    n = len(scene.objects)
    order = rng.permutation(n)
    n_remove = int(round(cfg.remove_fraction * n))
    n_move = min(int(round(cfg.move_fraction * n)), n - n_remove)
    removed = {scene.objects[i].id for i in order[:n_remove]}
    to_move = [scene.objects[i].id for i in order[n_remove:n_remove + n_move]]
    upright = cfg.rotation_axis == "vertical"

    current = {o.id: o for o in scene.objects if o.id not in removed}
    moved: dict[int, RigidPose] = {}
    for oid in to_move:
        others = [o for i, o in current.items() if i != oid]
        res = _move_object(current[oid], others, scene, cfg, upright, rng)
        if res is None:
            log.warning("object %d could not be moved without collision; left in place", oid)
            continue
        current[oid], moved[oid] = res

    changes = [Change(i, "removed") for i in sorted(removed)]
    changes += [Change(i, "moved", moved[i]) for i in sorted(moved)]

    n_add = int(round(cfg.add_fraction * n))
    scfg = scene_config or SceneConfig(upright=True)
    next_id = max([o.id for o in scene.objects], default=0) + 1
    for _ in range(n_add):
        prim, size = _random_shape(scfg, rng)
        sym, _ = self_symmetries(prim, size)
        obj = SceneObject(next_id, prim, size, RigidPose(), sym, _class_label(prim, size))
        placed = _place(obj, list(current.values()), scfg, scene.room_min, scene.room_max, rng)
        if placed is None:
            log.warning("could not place added object %d", next_id)
            continue
        current[next_id] = placed
        changes.append(Change(next_id, "added"))
        next_id += 1

    rescan = SyntheticScene(tuple(current[k] for k in sorted(current)), scene.room_min,
                            scene.room_max, seed, scene.walls)
    manifest = ScenePairManifest(scan_pair_id, scene, rescan, changes,
                                 _instance_records(scene, rescan, moved))
    return rescan, manifest


def object_mask(scene: SyntheticScene, obj_id: int, points: np.ndarray, band: float) -> np.ndarray:
    """Points within ``band`` of the object's surface that are closer to it
    than to any other geometry in the scene."""
    obj = scene.object(obj_id)
    d_obj = obj.sdf(points)
    rest = scene.without(obj_id).sdf(points)
    return (np.abs(d_obj) <= band) & (d_obj <= rest)


def object_labels(scene: SyntheticScene, points: np.ndarray, band: float) -> np.ndarray:
    """Id of the nearest object for points within ``band`` of its surface
    and closer to it than to the room; 0 elsewhere. Agrees with
    ``object_mask`` for every object at once."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.zeros(len(p), dtype=np.int64)
    dist = np.full(len(p), np.inf)
    for obj in scene.objects:
        # only points inside the bounding sphere plus band can qualify
        near = np.nonzero(np.sum((p - obj.center) ** 2, axis=1)
                          <= (obj.bounding_radius + band) ** 2)[0]
        d = obj.sdf(p[near])
        closer = d < dist[near]
        labels[near[closer]] = obj.id
        dist[near[closer]] = d[closer]
    sel = np.nonzero(np.abs(dist) <= band)[0]
    if scene.walls:
        sel = sel[dist[sel] <= scene.room_sdf(p[sel])]
    out = np.zeros(len(p), dtype=np.int64)
    out[sel] = labels[sel]
    return out.reshape(np.shape(points)[:-1])
