"""Synthetic labelled scenes, simulated LiDAR missions and scripted change.

Objects are primitive meshes (boxes, cylinders, icospheres and composites
of those) standing on their local origin.  Label 0 is the ground plane;
every other object carries its own id.  Scans are simulated by casting one
ray per (channel, azimuth step) against the triangle soup.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import _raycast
from .alignment import MissionTrajectory
from .geometry import Aabb, PointCloud, RigidTransform

log = logging.getLogger(__name__)

GROUND_LABEL = 0
ROLES = ("object", "structure", "ceiling")


class SpecError(ValueError):
    """Invalid scene or change-script content; the message starts with the key path."""


# -- meshes ----------------------------------------------------------------------

def box_mesh(size) -> np.ndarray:
    """``(12, 3, 3)`` triangles of a box centred in x/y with its base at z=0."""
    sx, sy, sz = (float(s) for s in size)
    x, y = sx / 2, sy / 2
    v = np.array([[-x, -y, 0], [x, -y, 0], [x, y, 0], [-x, y, 0],
                  [-x, -y, sz], [x, -y, sz], [x, y, sz], [-x, y, sz]])
    f = [(0, 2, 1), (0, 3, 2), (4, 5, 6), (4, 6, 7), (0, 1, 5), (0, 5, 4),
         (1, 2, 6), (1, 6, 5), (2, 3, 7), (2, 7, 6), (3, 0, 4), (3, 4, 7)]
    return v[np.array(f)]


def cylinder_mesh(radius: float, height: float, segments: int = 24) -> np.ndarray:
    a = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = np.c_[radius * np.cos(a), radius * np.sin(a)]
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        p0, p1 = ring[i], ring[j]
        b0, b1 = [*p0, 0.0], [*p1, 0.0]
        t0, t1 = [*p0, height], [*p1, height]
        tris += [[b0, b1, t1], [b0, t1, t0],
                 [[0, 0, 0], b1, b0], [[0, 0, height], t0, t1]]
    return np.array(tris, dtype=np.float64)


def icosphere_mesh(radius: float, subdivisions: int = 2) -> np.ndarray:
    """Icosphere resting on z=0 (centre at height ``radius``)."""
    p = (1 + 5 ** 0.5) / 2
    v = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
         [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    tris = np.array(v, dtype=np.float64)[np.array(f)]
    for _ in range(subdivisions):
        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        tris = np.concatenate([np.stack(t, 1) for t in
                               ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))])
    tris = tris / np.linalg.norm(tris, axis=2, keepdims=True) * radius
    return tris + [0.0, 0.0, radius]


def _num(x, path, positive=True):
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not np.isfinite(x):
        raise SpecError(f"{path}: expected a finite number, got {x!r}")
    if positive and x <= 0:
        raise SpecError(f"{path}: must be positive")
    return float(x)


def _vec(x, n, path, positive=False):
    if not isinstance(x, (list, tuple)) or len(x) != n:
        raise SpecError(f"{path}: expected a list of {n} numbers")
    return np.array([_num(v, f"{path}[{i}]", positive) for i, v in enumerate(x)])


def pose_from_json(d, path="pose") -> RigidTransform:
    if d is None:
        return RigidTransform.identity()
    if not isinstance(d, dict):
        raise SpecError(f"{path}: expected an object")
    unknown = set(d) - {"translation", "yaw_deg"}
    if unknown:
        raise SpecError(f"{path}: unknown keys {sorted(unknown)}")
    t = _vec(d.get("translation", [0, 0, 0]), 3, f"{path}.translation")
    yaw = _num(d.get("yaw_deg", 0.0), f"{path}.yaw_deg", positive=False)
    return RigidTransform.from_yaw(np.deg2rad(yaw), t)


def pose_to_json(T: RigidTransform) -> dict:
    yaw = float(np.degrees(np.arctan2(T.rotation[1, 0], T.rotation[0, 0])))
    return {"translation": [float(v) for v in T.translation], "yaw_deg": yaw}


def shape_parts(shape, path="shape") -> List[np.ndarray]:
    """Triangle arrays for a shape description, one per rigid part."""
    if not isinstance(shape, dict) or "type" not in shape:
        raise SpecError(f"{path}: expected an object with a 'type'")
    kind = shape["type"]
    if kind == "box":
        return [box_mesh(_vec(shape.get("size"), 3, f"{path}.size", positive=True))]
    if kind == "cylinder":
        return [cylinder_mesh(_num(shape.get("radius"), f"{path}.radius"),
                              _num(shape.get("height"), f"{path}.height"),
                              int(shape.get("segments", 24)))]
    if kind == "sphere":
        return [icosphere_mesh(_num(shape.get("radius"), f"{path}.radius"),
                               int(shape.get("subdivisions", 2)))]
    if kind == "composite":
        parts = shape.get("parts")
        if not isinstance(parts, list) or not parts:
            raise SpecError(f"{path}.parts: expected a non-empty list")
        out = []
        for i, part in enumerate(parts):
            T = pose_from_json(part.get("pose"), f"{path}.parts[{i}].pose")
            for tri in shape_parts(part.get("shape"), f"{path}.parts[{i}].shape"):
                out.append(T.apply(tri.reshape(-1, 3)).reshape(-1, 3, 3))
        return out
    raise SpecError(f"{path}.type: unknown shape {kind!r}")


# -- specs -----------------------------------------------------------------------

@dataclass
class ObjectSpec:
    id: int
    shape: dict
    pose: RigidTransform
    role: str = "object"

    def to_json(self) -> dict:
        return {"id": self.id, "role": self.role, "shape": self.shape, "pose": pose_to_json(self.pose)}


@dataclass
class LidarModel:
    channels: int = 128
    vfov_deg: float = 90.0
    hres_deg: float = 0.35
    max_range: float = 50.0
    sigma: float = 0.01
    min_range: float = 0.1

    def __post_init__(self):
        if self.channels < 1 or self.vfov_deg <= 0 or self.vfov_deg > 180:
            raise SpecError("lidar: channels must be >= 1 and 0 < vfov_deg <= 180")
        if self.hres_deg <= 0 or self.max_range <= 0 or self.sigma < 0:
            raise SpecError("lidar: hres_deg and max_range must be positive, sigma non-negative")

    @property
    def steps(self) -> int:
        return int(round(360.0 / self.hres_deg))

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, azimuth-major."""
        if self.channels == 1:
            el = np.zeros(1)
        else:
            el = np.deg2rad(np.linspace(-self.vfov_deg / 2, self.vfov_deg / 2, self.channels))
        az = np.arange(self.steps) * (2 * np.pi / self.steps)
        A, E = np.meshgrid(az, el, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1).reshape(-1, 3)


LIDAR_PRESETS = {
    "os0-128-like": dict(channels=128, vfov_deg=90.0, hres_deg=0.35, max_range=50.0, sigma=0.01),
    "xt32-like": dict(channels=32, vfov_deg=31.0, hres_deg=0.18, max_range=120.0, sigma=0.01),
}


def lidar_from_json(d, path="lidar") -> LidarModel:
    if isinstance(d, str):
        if d not in LIDAR_PRESETS:
            raise SpecError(f"{path}: unknown preset {d!r}; choose from {sorted(LIDAR_PRESETS)}")
        return LidarModel(**LIDAR_PRESETS[d])
    if not isinstance(d, dict):
        raise SpecError(f"{path}: expected a preset name or an object")
    d = dict(d)
    base = dict(LIDAR_PRESETS[d.pop("preset")]) if "preset" in d else {}
    unknown = set(d) - set(LidarModel.__dataclass_fields__)
    if unknown:
        raise SpecError(f"{path}: unknown keys {sorted(unknown)}")
    base.update(d)
    return LidarModel(**base)


@dataclass
class TrajectorySpec:
    waypoints: np.ndarray  # (K, 2) x/y
    n_poses: int = 20
    height: float = 0.7
    closed: bool = True

    def poses(self) -> List[RigidTransform]:
        pts = self.waypoints
        if self.closed:
            pts = np.vstack([pts, pts[:1]])
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        s = np.r_[0.0, np.cumsum(seg)]
        total = s[-1]
        n = self.n_poses
        q = np.arange(n) * (total / n) if self.closed else np.linspace(0, total, n)
        out = []
        for si in q:
            k = min(int(np.searchsorted(s, si, side="right")) - 1, len(seg) - 1)
            f = (si - s[k]) / seg[k] if seg[k] > 0 else 0.0
            xy = pts[k] + f * (pts[k + 1] - pts[k])
            d = pts[k + 1] - pts[k]
            out.append(RigidTransform.from_yaw(np.arctan2(d[1], d[0]), [xy[0], xy[1], self.height]))
        return out


@dataclass
class SceneSpec:
    extent: Aabb
    objects: List[ObjectSpec]
    ground: bool = True
    lidar: LidarModel = field(default_factory=LidarModel)
    trajectory: Optional[TrajectorySpec] = None
    seed: int = 0
    odometry_sigma: Tuple[float, float] = (0.0, 0.0)
    name: str = "scene"

    def object(self, oid: int) -> ObjectSpec:
        for o in self.objects:
            if o.id == oid:
                return o
        raise SpecError(f"unknown object id {oid}")

    def ids_with_role(self, role: str) -> Set[int]:
        return {o.id for o in self.objects if o.role == role}

    def to_json(self) -> dict:
        tr = self.trajectory
        return {
            "name": self.name,
            "extent": {"min": self.extent.min.tolist(), "max": self.extent.max.tolist()},
            "ground": self.ground,
            "lidar": {k: getattr(self.lidar, k) for k in LidarModel.__dataclass_fields__},
            "trajectory": None if tr is None else {
                "waypoints": tr.waypoints.tolist(), "n_poses": tr.n_poses,
                "height": tr.height, "closed": tr.closed},
            "seed": self.seed,
            "odometry_sigma": list(self.odometry_sigma),
            "objects": [o.to_json() for o in self.objects],
        }


def _object_from_json(d, path) -> ObjectSpec:
    if not isinstance(d, dict):
        raise SpecError(f"{path}: expected an object")
    unknown = set(d) - {"id", "role", "shape", "pose"}
    if unknown:
        raise SpecError(f"{path}: unknown keys {sorted(unknown)}")
    oid = d.get("id")
    if not isinstance(oid, int) or isinstance(oid, bool) or oid <= GROUND_LABEL:
        raise SpecError(f"{path}.id: expected an integer > {GROUND_LABEL}")
    role = d.get("role", "object")
    if role not in ROLES:
        raise SpecError(f"{path}.role: expected one of {ROLES}")
    shape_parts(d.get("shape"), f"{path}.shape")
    return ObjectSpec(oid, copy.deepcopy(d["shape"]), pose_from_json(d.get("pose"), f"{path}.pose"), role)


def scene_from_json(d) -> SceneSpec:
    if not isinstance(d, dict):
        raise SpecError("scene: expected a JSON object")
    known = {"name", "extent", "ground", "lidar", "trajectory", "seed", "odometry_sigma", "objects"}
    unknown = set(d) - known
    if unknown:
        raise SpecError(f"scene: unknown keys {sorted(unknown)}")
    ext = d.get("extent")
    if not isinstance(ext, dict):
        raise SpecError("extent: expected {min, max}")
    extent = Aabb(_vec(ext.get("min"), 3, "extent.min"), _vec(ext.get("max"), 3, "extent.max"))
    objs = d.get("objects", [])
    if not isinstance(objs, list):
        raise SpecError("objects: expected a list")
    objects = [_object_from_json(o, f"objects[{i}]") for i, o in enumerate(objs)]
    seen = set()
    for i, o in enumerate(objects):
        if o.id in seen:
            raise SpecError(f"objects[{i}].id: duplicate id {o.id}")
        seen.add(o.id)
    traj = None
    if d.get("trajectory") is not None:
        t = d["trajectory"]
        wp = t.get("waypoints")
        if not isinstance(wp, list) or len(wp) < 2:
            raise SpecError("trajectory.waypoints: expected at least 2 [x, y] points")
        wp = np.array([_vec(w, 2, f"trajectory.waypoints[{i}]") for i, w in enumerate(wp)])
        traj = TrajectorySpec(wp, int(t.get("n_poses", 20)),
                              _num(t.get("height", 0.7), "trajectory.height"),
                              bool(t.get("closed", True)))
    sig = d.get("odometry_sigma", [0.0, 0.0])
    scene = SceneSpec(
        extent, objects, bool(d.get("ground", True)),
        lidar_from_json(d.get("lidar", "os0-128-like")), traj, int(d.get("seed", 0)),
        tuple(_vec(sig, 2, "odometry_sigma")), str(d.get("name", "scene")),
    )
    for i, o in enumerate(objects):
        if not _inside(o, extent):
            raise SpecError(f"objects[{i}]: object {o.id} extends outside the scene extent")
    return scene


def _inside(o: ObjectSpec, extent: Aabb, tol: float = 1e-6) -> bool:
    v = np.concatenate([o.pose.apply(p.reshape(-1, 3)) for p in shape_parts(o.shape)])
    return bool(np.all(v >= extent.min - tol) and np.all(v <= extent.max + tol))


def load_scene(path) -> SceneSpec:
    return scene_from_json(_read_json(path))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from None


# -- scene geometry ------------------------------------------------------------------

@dataclass
class Scene:
    """Triangle soup grouped into parts, each with a bounding box and a label."""

    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    labels: np.ndarray
    part_start: np.ndarray
    part_lo: np.ndarray
    part_hi: np.ndarray

    @property
    def n_triangles(self) -> int:
        return len(self.v0)


def build_scene(spec: SceneSpec) -> Scene:
    parts: List[Tuple[np.ndarray, int]] = []
    if spec.ground:
        lo, hi = spec.extent.min, spec.extent.max
        z = 0.0
        quad = np.array([[lo[0], lo[1], z], [hi[0], lo[1], z], [hi[0], hi[1], z], [lo[0], hi[1], z]])
        parts.append((quad[np.array([(0, 1, 2), (0, 2, 3)])], GROUND_LABEL))
    for o in spec.objects:
        for tri in shape_parts(o.shape):
            parts.append((o.pose.apply(tri.reshape(-1, 3)).reshape(-1, 3, 3), o.id))
    _warn_overlaps(spec)
    if not parts:
        empty = np.zeros((0, 3))
        return Scene(empty, empty, empty, np.zeros(0, np.int64), np.zeros(1, np.int64), empty, empty)
    tris = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([np.full(len(p), lab, np.int64) for p, lab in parts])
    start = np.r_[0, np.cumsum([len(p) for p, _ in parts])].astype(np.int64)
    pad = 1e-9
    lo = np.array([p.reshape(-1, 3).min(0) - pad for p, _ in parts])
    hi = np.array([p.reshape(-1, 3).max(0) + pad for p, _ in parts])
    return Scene(tris[:, 0].copy(), tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0],
                 labels, start, lo, hi)


def _warn_overlaps(spec: SceneSpec) -> None:
    boxes = []
    for o in spec.objects:
        if o.role != "object":
            continue
        v = np.concatenate([o.pose.apply(p.reshape(-1, 3)) for p in shape_parts(o.shape)])
        boxes.append((o.id, v.min(0), v.max(0)))
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            a, b = boxes[i], boxes[j]
            if np.all(a[1] < b[2]) and np.all(b[1] < a[2]):
                log.warning("objects %d and %d have overlapping bounding boxes", a[0], b[0])


# -- simulation ----------------------------------------------------------------------

def simulate_scan(scene: Scene, pose: RigidTransform, lidar: LidarModel, seed: int = 0) -> PointCloud:
    """One LiDAR sweep from ``pose``; points in the world frame with labels."""
    origin = pose.translation.copy()
    if scene.n_triangles == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros(0, np.int64), origin)
    dirs = lidar.directions() @ pose.rotation.T
    rng, lab = _raycast.cast_rays(
        origin, np.ascontiguousarray(dirs), scene.v0, scene.e1, scene.e2, scene.labels,
        scene.part_start, scene.part_lo, scene.part_hi,
        lidar.max_range, lidar.min_range, lidar.sigma, np.uint64(seed), lidar.channels,
    )
    hit = np.isfinite(rng)
    pts = origin + dirs[hit] * rng[hit, None]
    return PointCloud(pts, lab[hit], origin)


def scan_seed(mission_seed: int, index: int) -> int:
    return (mission_seed * 1_000_003 + index) & 0x7FFFFFFFFFFFFFFF


def generate_mission(
    scene: Scene,
    trajectory: Sequence[RigidTransform],
    lidar: LidarModel,
    seed: int = 0,
    mission_id: str = "A",
    odometry_sigma: Tuple[float, float] = (0.0, 0.0),
    frame_offset: Optional[RigidTransform] = None,
) -> MissionTrajectory:
    """Simulate one scan per pose and package them as a posed mission.

    Scans are stored in the sensor frame.  With non-zero ``odometry_sigma``
    (metres, radians) each relative motion is perturbed before chaining, so
    the stored poses drift like dead reckoning.  ``frame_offset`` moves the
    whole trajectory, as if the mission had its own map frame.
    """
    if not trajectory:
        raise SpecError("trajectory: needs at least one pose")
    rng = np.random.default_rng(seed)
    scans = []
    for k, T in enumerate(trajectory):
        world = simulate_scan(scene, T, lidar, scan_seed(seed, k))
        local = T.inverse().apply(world.points)
        scans.append(PointCloud(local, world.labels, np.zeros(3)))
    poses = [trajectory[0]]
    st, sr = odometry_sigma
    for k in range(len(trajectory) - 1):
        rel = trajectory[k].inverse() @ trajectory[k + 1]
        if st > 0 or sr > 0:
            noise = np.r_[rng.normal(0, st, 3), rng.normal(0, sr, 3)]
            rel = rel @ RigidTransform.exp(noise)
        poses.append(poses[-1] @ rel)
    if frame_offset is not None:
        poses = [frame_offset @ p for p in poses]
    return MissionTrajectory(mission_id, np.arange(len(poses), dtype=np.float64), poses, scans)


# -- change scripts --------------------------------------------------------------------

@dataclass
class ChangeAction:
    id: int
    action: str  # move | remove | add
    move: Optional[RigidTransform] = None  # yaw about the object origin, then translation
    added: Optional[ObjectSpec] = None


@dataclass
class ChangeScript:
    changes: List[ChangeAction]
    mission_b: dict = field(default_factory=dict)


def script_from_json(d) -> ChangeScript:
    if not isinstance(d, dict):
        raise SpecError("script: expected a JSON object")
    unknown = set(d) - {"changes", "mission_b"}
    if unknown:
        raise SpecError(f"script: unknown keys {sorted(unknown)}")
    out = []
    for i, c in enumerate(d.get("changes", [])):
        path = f"changes[{i}]"
        act = c.get("action")
        if act == "move":
            out.append(ChangeAction(c.get("id"), "move", pose_from_json(c.get("motion"), f"{path}.motion")))
        elif act == "remove":
            out.append(ChangeAction(c.get("id"), "remove"))
        elif act == "add":
            obj = _object_from_json(c.get("object"), f"{path}.object")
            out.append(ChangeAction(obj.id, "add", added=obj))
        else:
            raise SpecError(f"{path}.action: expected move, remove or add, got {act!r}")
        if not isinstance(out[-1].id, int):
            raise SpecError(f"{path}.id: expected an integer")
    mb = d.get("mission_b", {})
    unknown = set(mb) - {"seed", "frame_offset", "odometry_sigma", "trajectory_offset"}
    if unknown:
        raise SpecError(f"mission_b: unknown keys {sorted(unknown)}")
    return ChangeScript(out, mb)


def load_script(path) -> ChangeScript:
    return script_from_json(_read_json(path))


@dataclass
class GroundTruth:
    changed_ids: Set[int]
    moved: Dict[int, RigidTransform]  # world motion mapping the A instance onto the B instance
    added: Set[int]
    removed: Set[int]
    ground_ids: Set[int]
    ceiling_ids: Set[int]

    def to_json(self) -> dict:
        return {
            "changed_ids": sorted(self.changed_ids),
            "moved": {str(k): {"quaternion_xyzw": [float(v) for v in T.as_quat()],
                               "translation": [float(v) for v in T.translation]}
                      for k, T in sorted(self.moved.items())},
            "added": sorted(self.added),
            "removed": sorted(self.removed),
            "ground_ids": sorted(self.ground_ids),
            "ceiling_ids": sorted(self.ceiling_ids),
        }

    @classmethod
    def from_json(cls, d) -> "GroundTruth":
        moved = {int(k): RigidTransform.from_quat(v["quaternion_xyzw"], v["translation"])
                 for k, v in d.get("moved", {}).items()}
        return cls(set(d["changed_ids"]), moved, set(d.get("added", [])), set(d.get("removed", [])),
                   set(d.get("ground_ids", [GROUND_LABEL])), set(d.get("ceiling_ids", [])))


def apply_changes(spec: SceneSpec, script: ChangeScript) -> Tuple[SceneSpec, GroundTruth]:
    """Mission-B scene plus ground truth for a change script."""
    objs = {o.id: copy.deepcopy(o) for o in spec.objects}
    moved, added, removed = {}, set(), set()
    for i, c in enumerate(script.changes):
        if c.action == "add":
            if c.id in objs:
                raise SpecError(f"changes[{i}].object.id: id {c.id} already exists")
            objs[c.id] = c.added
            added.add(c.id)
            continue
        if c.id not in objs:
            raise SpecError(f"changes[{i}].id: unknown object id {c.id}")
        if c.action == "remove":
            del objs[c.id]
            removed.add(c.id)
        else:
            o = objs[c.id]
            new = RigidTransform(c.move.rotation @ o.pose.rotation, o.pose.translation + c.move.translation)
            motion = new @ o.pose.inverse()
            moved[c.id] = motion @ moved[c.id] if c.id in moved else motion
            o.pose = new
    order = [o.id for o in spec.objects if o.id in objs] + sorted(added)
    spec_b = copy.copy(spec)
    spec_b.objects = [objs[i] for i in order]
    for i, o in enumerate(spec_b.objects):
        if not _inside(o, spec.extent):
            raise SpecError(f"object {o.id} leaves the scene extent after changes")
    changed = set(moved) | added | removed
    gt = GroundTruth(changed, moved, added, removed, {GROUND_LABEL},
                     spec.ids_with_role("ceiling") | spec_b.ids_with_role("ceiling"))
    return spec_b, gt


def simulate_pair(spec: SceneSpec, script: ChangeScript):
    """Missions A and B plus ground truth for a scene and change script."""
    if spec.trajectory is None:
        raise SpecError("trajectory: scene has no trajectory")
    spec_b, gt = apply_changes(spec, script)
    poses = spec.trajectory.poses()
    mb = script.mission_b
    poses_b = poses
    if "trajectory_offset" in mb:
        off = pose_from_json(mb["trajectory_offset"], "mission_b.trajectory_offset")
        poses_b = [off @ p for p in poses]
    seed_b = int(mb.get("seed", spec.seed + 1))
    sig_b = tuple(mb.get("odometry_sigma", spec.odometry_sigma))
    frame = pose_from_json(mb["frame_offset"], "mission_b.frame_offset") if "frame_offset" in mb else None
    a = generate_mission(build_scene(spec), poses, spec.lidar, spec.seed, "A", spec.odometry_sigma)
    b = generate_mission(build_scene(spec_b), poses_b, spec.lidar, seed_b, "B", sig_b, frame)
    return a, b, gt, spec_b
