"""End-to-end change detection between two missions.

Stage order: align, octrees, diff, project, crop, ground, MLS, morphology,
cluster, region growing, merge/split, describe, group, register, report.
Any failure is re-raised as :class:`StageError` tagged with the stage name.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import plotting
from .alignment import (
    AlignParams,
    IcpParams,
    MissionGraph,
    MissionTrajectory,
    align_missions,
)
from .cloud_io import load_cloud, load_manifest, load_trajectory, save_cloud, save_manifest, save_trajectory
from .descriptors import MIN_POINTS, DescribedObject, describe_all
from .evaluation import (
    ConfusionCounts,
    MetricsReport,
    compute_metrics,
    correspondence_json,
    dump_json,
    label_points,
    load_report,
    write_match_matrix,
    write_report,
)
from .geometry import Aabb, PointCloud, concatenate, crop_box, voxel_downsample, voxel_inverse
from .grouping import (
    ClusterConfidence,
    Correspondence,
    MatchMatrix,
    assign_correspondences,
    cluster_confidence,
    register_pair,
    select_k_elbow,
)
from .octree import ChangeSet, build_octree, diff_octrees, project_changes
from .scenegen import GroundTruth, pose_from_json
from .segmentation import (
    Segment,
    denoise_morphological,
    euclidean_cluster,
    merge_or_split,
    mls_smooth,
    ransac_ground,
    region_grow_refine,
    renumber,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# -- configuration -----------------------------------------------------------------

def default_config() -> dict:
    text = resources.files("mmchange").joinpath("data/default_config.json").read_text()
    return json.loads(text)


def _merge(defaults, user, path):
    if isinstance(defaults, dict) and path.endswith("seeds"):
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: expected an object")
        for k, v in user.items():
            pose_from_json(v, f"{path}.{k}")
        return copy.deepcopy(user)
    if isinstance(defaults, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        unknown = sorted(set(user) - set(defaults))
        if unknown:
            where = f"{path}." if path else ""
            raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
        return {k: _merge(v, user[k], f"{path}.{k}" if path else k) if k in user else copy.deepcopy(v)
                for k, v in defaults.items()}
    if isinstance(defaults, bool):
        if not isinstance(user, bool):
            raise ConfigError(f"{path}: expected true or false")
        return user
    if isinstance(defaults, list):
        if not isinstance(user, list) or not all(_is_num(v) for v in user):
            raise ConfigError(f"{path}: expected a list of numbers")
        return list(user)
    if isinstance(defaults, (int, float)) or defaults is None:
        if user is None:
            return None
        if isinstance(user, list) and defaults is None:
            if not all(_is_num(v) for v in user):
                raise ConfigError(f"{path}: expected numbers")
            return list(user)
        if not _is_num(user):
            raise ConfigError(f"{path}: expected a number")
        if isinstance(defaults, int) and not isinstance(defaults, bool) and not float(user).is_integer():
            raise ConfigError(f"{path}: expected an integer")
        return int(user) if isinstance(defaults, int) else user
    return user


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _positive(cfg, path):
    sec, key = path.split(".")
    v = cfg[sec][key]
    if v is not None and v <= 0:
        raise ConfigError(f"{path}: must be positive")


def build_config(user: Optional[dict] = None) -> dict:
    """Defaults merged with ``user``; unknown keys and bad types are rejected."""
    cfg = _merge(default_config(), user or {}, "")
    for p in ("octree.resolution", "octree.extent", "octree.max_range", "alignment.radius",
              "ground.dist_thresh", "mls.radius", "morphology.voxel", "cluster.tol",
              "region_grow.min_extent", "evaluation.match_radius"):
        _positive(cfg, p)
    if not 0 < cfg["octree"]["threshold"] < 1:
        raise ConfigError("octree.threshold: must lie in (0, 1)")
    g = cfg["grouping"]
    if g["alpha"] < 0 or g["beta"] < 0 or g["alpha"] + g["beta"] <= 0:
        raise ConfigError("grouping.alpha/beta: must be non-negative with a positive sum")
    if g["k_max"] < 1:
        raise ConfigError("grouping.k_max: must be at least 1")
    if cfg["mls"]["poly_order"] not in (1, 2):
        raise ConfigError("mls.poly_order: must be 1 or 2")
    if cfg["morphology"]["connectivity"] not in (6, 18, 26):
        raise ConfigError("morphology.connectivity: must be 6, 18 or 26")
    for key in ("min", "max"):
        v = cfg["crop"][key]
        if v is not None and len(v) != 3:
            raise ConfigError(f"crop.{key}: expected 3 numbers or null")
    return cfg


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return build_config()
    try:
        user = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return build_config(user)


# -- mission directories -------------------------------------------------------------

def save_mission(traj: MissionTrajectory, out_dir) -> Path:
    """Write trajectory, scan manifest and per-scan labelled PLYs (sensor frame)."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    names = []
    for k, scan in enumerate(traj.scans):
        name = f"scans/{k:04d}.ply"
        save_cloud(scan, out / name, binary=True)
        names.append(name)
    save_manifest(out / "scans.txt", names)
    save_trajectory(out / "trajectory.txt", traj.timestamps, traj.poses)
    (out / "mission.json").write_text(json.dumps({"mission_id": traj.mission_id}) + "\n")
    return out


def load_mission(path, mission_id: Optional[str] = None) -> MissionTrajectory:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"mission directory not found: {d}")
    meta = d / "mission.json"
    if mission_id is None:
        mission_id = json.loads(meta.read_text())["mission_id"] if meta.exists() else d.name
    stamps, poses = load_trajectory(d / "trajectory.txt")
    files = load_manifest(d / "scans.txt")
    if len(files) != len(poses):
        raise ValueError(f"{d}: {len(files)} scans listed but {len(poses)} poses")
    scans = []
    for f in files:
        s = load_cloud(f)
        scans.append(s if s.origin is not None else PointCloud(s.points, s.labels, np.zeros(3)))
    return MissionTrajectory(mission_id, stamps, poses, scans)


# -- detection -------------------------------------------------------------------------

@dataclass
class DetectionResult:
    graph: MissionGraph
    changes: ChangeSet
    segments: List[Segment]
    objects: List[DescribedObject]
    correspondences: List[Correspondence]
    match_matrix: MatchMatrix
    classes: Dict[str, int]
    cluster_conf: Optional[ClusterConfidence]
    wcss_curve: Optional[np.ndarray]
    k_star: int
    timings: Dict[str, float] = field(default_factory=dict)
    diff_points: Dict[str, int] = field(default_factory=dict)

    def segments_of(self, side: str) -> List[Segment]:
        return [s for s in self.segments if s.mission_id == side]


class _Stages:
    def __init__(self):
        self.timings: Dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0
            log.info("stage %-12s %.2f s", name, self.timings[name])


def _segment_side(cloud: PointCloud, side: str, cfg: dict, ground, stage):
    """Segment one side's difference cloud.

    Filtering and clustering run on a working cloud downsampled to half the
    octree resolution; its points carry their voxel index as label so the
    segments can be lifted back to the full cloud afterwards.  Returns the
    working segments, the full cloud and each full point's voxel index.
    """
    res = cfg["octree"]["resolution"]
    if ground is not None and len(cloud):
        with stage("ground"):
            cloud = cloud.select(cloud.points @ ground.normal + ground.offset > cfg["ground"]["dist_thresh"])
    if len(cloud) == 0:
        return [], cloud, np.zeros(0, np.int64)
    inverse = voxel_inverse(cloud.points, res / 2)
    work = voxel_downsample(PointCloud(cloud.points), res / 2)
    work = PointCloud(work.points, np.arange(len(work)))
    if cfg["mls"]["enabled"]:
        with stage("mls"):
            work = mls_smooth(work, cfg["mls"]["radius"], cfg["mls"]["poly_order"])
    m = cfg["morphology"]
    if m["enabled"] and len(work):
        with stage("morphology"):
            work = denoise_morphological(work, m["voxel"] or res, m["erode"], m["dilate"],
                                         m["connectivity"], m["min_neighbors"])
    c = cfg["cluster"]
    with stage("cluster"):
        segs = euclidean_cluster(work, c["tol"] or 2 * res, c["min_size"], c["max_size"], side)
    rg = cfg["region_grow"]
    if rg["enabled"]:
        with stage("region_grow"):
            out = []
            for s in segs:
                if s.extent() > rg["min_extent"] and len(s) >= rg["normal_k"]:
                    out += region_grow_refine(s, rg["normal_k"], np.deg2rad(rg["angle_deg"]), rg["curvature"])
                else:
                    out.append(s)
            segs = out
    return segs, cloud, inverse


def _lift(segs: Sequence[Segment], full: PointCloud, inverse: np.ndarray) -> List[Segment]:
    out = []
    for s in segs:
        mask = np.isin(inverse, s.cloud.labels)
        out.append(Segment(full.select(mask), s.mission_id, s.segment_id))
    return out


def align(mission_a: MissionTrajectory, mission_b: MissionTrajectory, cfg: dict) -> MissionGraph:
    """Apply configured seeds and, unless disabled, pose-graph alignment."""
    res = cfg["octree"]["resolution"]
    al = cfg["alignment"]
    seeds = {k: pose_from_json(v, f"alignment.seeds.{k}") for k, v in al["seeds"].items()}
    if al["enabled"]:
        params = AlignParams(
            radius=al["radius"], corr_schedule=tuple(al["corr_schedule"]),
            icp=IcpParams(max_iter=al["icp_max_iter"], leaf=al["icp_leaf"],
                          max_points=al["icp_max_points"], convergence_eps=1e-5),
            min_inlier_fraction=al["min_inlier_fraction"],
            max_fitness=al["max_fitness_voxels"] * res,
            fine_corr=al["fine_corr"], fine_leaf=al["fine_leaf"],
        )
        graph, _ = align_missions([mission_a, mission_b], params, seeds)
        return graph
    trajs = []
    for t in (mission_a, mission_b):
        G = seeds.get(t.mission_id)
        trajs.append(t if G is None else MissionTrajectory(
            t.mission_id, t.timestamps, [G @ p for p in t.poses], t.scans))
    return MissionGraph(trajs, [])


def group_objects(objs_a: Sequence[DescribedObject], objs_b: Sequence[DescribedObject], cfg: dict):
    """Elbow clustering of all descriptors, then per-class correspondences.

    Returns ``(correspondences, match_matrix, classes, cluster_confidence,
    wcss_curve, k_star)``.
    """
    g = cfg["grouping"]
    objects = list(objs_a) + list(objs_b)
    if not objects:
        return [], MatchMatrix(), {}, None, None, 0
    D = np.array([o.descriptor for o in objects])
    elbow = select_k_elbow(D, min(g["k_max"], len(D)), seed=cfg["seed"])
    lab = elbow.clustering.assignments
    cconf = cluster_confidence(elbow.clustering, D)
    classes = {o.segment.segment_id: int(c) for o, c in zip(objects, lab)}
    corr, mm = assign_correspondences(objs_a, objs_b, lab[:len(objs_a)], lab[len(objs_a):],
                                      g["alpha"], g["beta"], cconf.confidence)
    return corr, mm, classes, cconf, elbow.wcss_curve, elbow.K


def register_moved(corr: Sequence[Correspondence], segments: Sequence[Segment], leaf: float) -> None:
    """Fill in the rigid transform of every ``moved`` correspondence."""
    by_id = {s.segment_id: s for s in segments}
    for c in corr:
        if c.kind == "moved":
            pa = voxel_downsample(by_id[c.object_a].cloud, leaf).points
            pb = voxel_downsample(by_id[c.object_b].cloud, leaf).points
            c.transform = register_pair(pa, pb).transform


def detect(
    mission_a: MissionTrajectory,
    mission_b: MissionTrajectory,
    cfg: Optional[dict] = None,
) -> DetectionResult:
    """Detect object-level changes from mission A to mission B.

    ``cfg`` is either a user dict merged over the defaults or an already
    built config.  Stage failures raise :class:`StageError`.
    """
    cfg = build_config(cfg) if cfg is None or "octree" not in cfg else cfg
    stage = _Stages()
    res = cfg["octree"]["resolution"]

    with stage("align"):
        graph = align(mission_a, mission_b, cfg)
        traj_a, traj_b = graph.trajectories

    with stage("octrees"):
        kw = dict(resolution=res, extent=cfg["octree"]["extent"], max_range=cfg["octree"]["max_range"])
        posed_a, posed_b = traj_a.posed_scans(), traj_b.posed_scans()
        tree_a = build_octree(posed_a, **kw)
        tree_b = build_octree(posed_b, **kw)

    with stage("diff"):
        changes = diff_octrees(tree_a, tree_b, cfg["octree"]["threshold"],
                               cfg["octree"]["require_observed_both"])

    with stage("project"):
        map_a, map_b = concatenate(posed_a), concatenate(posed_b)
        diff_a = project_changes(changes, map_a, "removed")
        diff_b = project_changes(changes, map_b, "added")
    diff_points = {"A": len(diff_a), "B": len(diff_b)}

    crop = cfg["crop"]
    if crop["min"] is not None or crop["max"] is not None:
        with stage("crop"):
            box = Aabb(np.array(crop["min"] if crop["min"] is not None else [-np.inf] * 3),
                       np.array(crop["max"] if crop["max"] is not None else [np.inf] * 3))
            diff_a, diff_b = crop_box(diff_a, box), crop_box(diff_b, box)

    ground = None
    gcfg = cfg["ground"]
    if gcfg["enabled"] and (len(diff_a) or len(diff_b)):
        with stage("ground"):
            sample = voxel_downsample(map_a, gcfg["map_leaf"])
            if crop["max"] is not None or crop["min"] is not None:
                sample = crop_box(sample, box)
            ground, _ = ransac_ground(sample, gcfg["dist_thresh"], np.deg2rad(gcfg["max_angle_deg"]),
                                      gcfg["iters"], cfg["seed"])

    segs_a, full_a, inv_a = _segment_side(diff_a, traj_a.mission_id, cfg, ground, stage)
    segs_b, full_b, inv_b = _segment_side(diff_b, traj_b.mission_id, cfg, ground, stage)

    with stage("merge_split"):
        segs_a, segs_b = merge_or_split(segs_a, segs_b, cfg["merge_split"]["overlap_ratio"], res,
                                        cfg["cluster"]["tol"] or 2 * res, cfg["cluster"]["min_size"])
        segs_a, segs_b = renumber(segs_a, traj_a.mission_id), renumber(segs_b, traj_b.mission_id)
        segs_a, segs_b = _lift(segs_a, full_a, inv_a), _lift(segs_b, full_b, inv_b)

    with stage("describe"):
        # descriptors work on the octree grid; too-sparse segments are dropped
        coarse = [Segment(voxel_downsample(s.cloud, res), s.mission_id, s.segment_id)
                  for s in segs_a + segs_b]
        keep = {c.segment_id for c in coarse if len(c) >= MIN_POINTS}
        if len(keep) < len(coarse):
            log.info("dropping %d segments with fewer than %d voxels", len(coarse) - len(keep), MIN_POINTS)
        segs_a = [s for s in segs_a if s.segment_id in keep]
        segs_b = [s for s in segs_b if s.segment_id in keep]
        objects = describe_all([c for c in coarse if c.segment_id in keep])
    objs_a, objs_b = objects[:len(segs_a)], objects[len(segs_a):]

    with stage("group"):
        corr, mm, classes, cconf, curve, k_star = group_objects(objs_a, objs_b, cfg)

    with stage("register"):
        register_moved(corr, segs_a + segs_b, res / 2)

    return DetectionResult(graph, changes, segs_a + segs_b, objects, corr, mm, classes, cconf,
                           curve, k_star, stage.timings, diff_points)


def write_detection(result: DetectionResult, out_dir, cfg: dict, inputs: Dict[str, dict]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for traj in result.graph.trajectories:
        save_trajectory(out / "aligned" / f"{traj.mission_id}_trajectory.txt", traj.timestamps, traj.poses)
    cc = result.cluster_conf
    extra = {
        "inputs": inputs,
        "changed_voxels": {"added": int(len(result.changes.added)),
                           "removed": int(len(result.changes.removed))},
        "diff_points": result.diff_points,
        "grouping": {
            "K": result.k_star,
            "wcss_curve": result.wcss_curve,
            "classes": result.classes,
            "cluster_mean_distance": None if cc is None else cc.mean_distance,
            "cluster_confidence": None if cc is None else cc.confidence,
            "cluster_confidence_degenerate": None if cc is None else cc.degenerate,
        },
        "descriptors": {o.segment.segment_id: o.descriptor for o in result.objects},
    }
    path = write_report(out, result.correspondences, result.segments, result.match_matrix, extra=extra)
    dump_json(cfg, out / "effective_config.json")
    if cfg.get("figures", True):
        figs = out / "figures"
        bg = concatenate([voxel_downsample(t.merged_cloud(), 0.25) for t in result.graph.trajectories[:1]])
        bg = bg.points[(bg.points[:, 2] > 0.1) & (bg.points[:, 2] < 2.0)]
        plotting.plot_change_topdown(bg, result.segments, result.correspondences, figs / "changes_topdown.png")
        plotting.plot_match_matrix(result.match_matrix, figs / "match_matrix.png")
        plotting.plot_wcss(result.wcss_curve, result.k_star, figs / "wcss.png")
        if result.objects:
            plotting.plot_descriptor_pca(
                np.array([o.descriptor for o in result.objects]),
                np.array([result.classes[o.segment.segment_id] for o in result.objects]),
                [o.segment.segment_id for o in result.objects], figs / "descriptors_pca.png")
    timings = dict(result.timings)
    timings["report"] = time.perf_counter() - t0
    dump_json({"stage_seconds": timings}, out / "timings.json")
    return path


def run_detect(mission_a_dir, mission_b_dir, cfg: dict, out_dir) -> DetectionResult:
    with _Stages()("load"):
        a = load_mission(mission_a_dir)
        b = load_mission(mission_b_dir)
    if a.mission_id == b.mission_id:
        b = MissionTrajectory(b.mission_id + "_b", b.timestamps, b.poses, b.scans)
    result = detect(a, b, cfg)
    with _Stages()("report"):
        inputs = {"A": {"dir": str(mission_a_dir), "mission_id": a.mission_id},
                  "B": {"dir": str(mission_b_dir), "mission_id": b.mission_id}}
        write_detection(result, out_dir, cfg, inputs)
    return result


def run_align(mission_a_dir, mission_b_dir, cfg: dict, out_dir) -> MissionGraph:
    """Align two missions and write each as a mission directory with the new poses.

    The written missions reference the original scan files, so detection
    can then run on them with alignment disabled.
    """
    a, b = load_mission(mission_a_dir), load_mission(mission_b_dir)
    if a.mission_id == b.mission_id:
        b = MissionTrajectory(b.mission_id + "_b", b.timestamps, b.poses, b.scans)
    try:
        graph = align(a, b, cfg)
    except Exception as exc:
        raise StageError("align", f"{type(exc).__name__}: {exc}") from exc
    out = Path(out_dir)
    for traj, src in zip(graph.trajectories, (mission_a_dir, mission_b_dir)):
        d = out / traj.mission_id
        d.mkdir(parents=True, exist_ok=True)
        save_trajectory(d / "trajectory.txt", traj.timestamps, traj.poses)
        save_manifest(d / "scans.txt", [p.resolve() for p in load_manifest(Path(src) / "scans.txt")])
        (d / "mission.json").write_text(json.dumps({"mission_id": traj.mission_id}) + "\n")
    summary = {
        "missions": [t.mission_id for t in graph.trajectories],
        "loop_closures": sum(f.kind == "loop_closure" for f in graph.factors),
        "odometry_factors": sum(f.kind == "odometry" for f in graph.factors),
    }
    dump_json(summary, out / "alignment.json")
    return graph


def rematch_report(report_dir, cfg: dict, out_dir=None) -> Tuple[List[Correspondence], MatchMatrix]:
    """Re-run grouping on a written report's segments and descriptors.

    Useful for trying other alpha/beta weights without redoing detection.
    Writes ``correspondences.json`` and ``match_matrix.csv`` to ``out_dir``
    (default: the report directory).
    """
    rd = Path(report_dir)
    report = load_report(rd / "report.json")
    index = json.loads((rd / "segments.json").read_text())["segments"]
    desc = report.get("descriptors") or {}
    side_of = {inp["mission_id"]: side for side, inp in report["inputs"].items()}
    objs = {"A": [], "B": []}
    for entry in index:
        sid = entry["segment_id"]
        if sid not in desc:
            continue
        seg = Segment(load_cloud(rd / entry["file"]), entry["mission"], sid)
        objs[side_of[entry["mission"]]].append(DescribedObject(seg, np.asarray(desc[sid], float)))
    corr, mm, *_ = group_objects(objs["A"], objs["B"], cfg)
    register_moved(corr, [o.segment for o in objs["A"] + objs["B"]], cfg["octree"]["resolution"] / 2)
    out = Path(out_dir) if out_dir is not None else rd
    out.mkdir(parents=True, exist_ok=True)
    dump_json({"correspondences": [correspondence_json(c) for c in corr],
               "alpha": cfg["grouping"]["alpha"], "beta": cfg["grouping"]["beta"]},
              out / "correspondences.json")
    write_match_matrix(mm, out / "match_matrix.csv")
    return corr, mm


# -- evaluation ------------------------------------------------------------------------

def evaluate_detection(report_dir, gt_path, match_radius: Optional[float] = None) -> Tuple[MetricsReport, ConfusionCounts]:
    """Per-point metrics of a written detection against simulation ground truth."""
    out = Path(report_dir)
    report = load_report(out / "report.json")
    cfg = json.loads((out / "effective_config.json").read_text())
    gt = GroundTruth.from_json(json.loads(Path(gt_path).read_text()))
    radius = match_radius or cfg["evaluation"]["match_radius"] or cfg["octree"]["resolution"]
    exclude = gt.ground_ids | gt.ceiling_ids
    seg_index = json.loads((out / "segments.json").read_text())["segments"]
    total = ConfusionCounts()
    for side, inp in sorted(report["inputs"].items()):
        mid = inp["mission_id"]
        mission = load_mission(inp["dir"], mid)
        aligned = out / "aligned" / f"{mid}_trajectory.txt"
        if not aligned.exists():
            raise ValueError(f"no aligned trajectory for mission {mid!r} in {out}")
        _, poses = load_trajectory(aligned)
        if len(poses) != len(mission.poses):
            raise ValueError(f"mission {mid!r}: pose count differs from the report's trajectory")
        mission.poses = poses
        pred_files = [out / s["file"] for s in seg_index if s["mission"] == mid]
        pred = concatenate([load_cloud(f) for f in pred_files]) if pred_files else PointCloud(np.zeros((0, 3)))
        total = total + label_points(pred, mission.merged_cloud(), gt.changed_ids, radius, exclude)
    return compute_metrics(total), total

