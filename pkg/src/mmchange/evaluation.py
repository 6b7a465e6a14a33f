"""Per-point change metrics and the on-disk change report."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import save_cloud
from .geometry import PointCloud, concatenate
from .grouping import Correspondence, MatchMatrix
from .segmentation import Segment

UNDEFINED = "undefined"


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def label_points(
    predicted: PointCloud,
    mission: PointCloud,
    gt_changed_ids: Iterable[int],
    match_radius: float = 0.05,
    exclude_ids: Iterable[int] = (),
) -> ConfusionCounts:
    """Confusion counts over the points of ``mission``.

    A mission point is predicted positive when a predicted change point lies
    within ``match_radius``; it is truly positive when its label is one of
    ``gt_changed_ids``.  Points whose label is in ``exclude_ids`` (ground,
    ceiling) are not counted.
    """
    if mission.labels is None:
        raise EvaluationError("mission cloud carries no ground-truth labels")
    if match_radius <= 0:
        raise EvaluationError("match_radius must be positive")
    keep = ~np.isin(mission.labels, list(exclude_ids))
    pts, labels = mission.points[keep], mission.labels[keep]
    truth = np.isin(labels, list(gt_changed_ids))
    if len(predicted) == 0 or len(pts) == 0:
        pred = np.zeros(len(pts), bool)
    else:
        d, _ = cKDTree(predicted.points).query(pts, k=1, distance_upper_bound=match_radius)
        pred = np.isfinite(d)
    return ConfusionCounts(
        int(np.sum(pred & truth)), int(np.sum(pred & ~truth)),
        int(np.sum(~pred & ~truth)), int(np.sum(~pred & truth)),
    )


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


@dataclass(frozen=True)
class MetricsReport:
    precision: Optional[float]
    recall: Optional[float]
    specificity: Optional[float]
    f_score: Optional[float]
    iou: Optional[float]

    def to_json(self) -> Dict[str, object]:
        return {k: (UNDEFINED if v is None else v) for k, v in self.__dict__.items()}

    def table(self, title: str = "") -> str:
        head = f"{'':<12}" + "".join(f"{h:>13}" for h in ("Precision", "Recall", "Specificity", "F-Score", "IoU"))
        vals = [self.precision, self.recall, self.specificity, self.f_score, self.iou]
        row = f"{title:<12}" + "".join(f"{UNDEFINED if v is None else f'{v:.3f}':>13}" for v in vals)
        return head + "\n" + row


def compute_metrics(c: ConfusionCounts) -> MetricsReport:
    """Per-point ratios; a 0/0 ratio is reported as undefined, never 0."""
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    f = None
    if p is not None and r is not None:
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return MetricsReport(p, r, _ratio(c.tn, c.tn + c.fp), f, _ratio(c.tp, c.tp + c.fp + c.fn))


# -- report ---------------------------------------------------------------------

def clean_json(obj, digits: int = 10):
    """Recursively convert numpy values and round floats for stable output."""
    if isinstance(obj, dict):
        return {str(k): clean_json(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_json(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean_json(obj.tolist(), digits)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return None
        v = float(f"{v:.{digits}g}")
        return 0.0 if v == 0 else v
    return obj


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(clean_json(obj), indent=2, sort_keys=True) + "\n")


def correspondence_json(c: Correspondence) -> dict:
    t = None
    if c.transform is not None:
        t = {"quaternion_xyzw": c.transform.as_quat(), "translation": c.transform.translation}
    return {
        "kind": c.kind, "class": c.cls, "objectA": c.object_a, "objectB": c.object_b,
        "weighted_distance": c.weighted_distance, "pair_confidence": c.pair_confidence,
        "cluster_confidence": c.cluster_confidence, "transform": t, "reason": c.reason,
    }


def write_match_matrix(mm: MatchMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["classA_id", "classB_id", "confidence"])
        for _, a, b, conf in mm.rows():
            w.writerow([a, b, f"{conf:.6f}"])


def write_report(
    out_dir,
    correspondences: Sequence[Correspondence],
    segments: Sequence[Segment],
    match_matrix: Optional[MatchMatrix] = None,
    metrics: Optional[MetricsReport] = None,
    extra: Optional[dict] = None,
) -> Path:
    """Write ``report.json``, per-segment PLYs with an index and the match matrix.

    Output is byte-identical for identical inputs: keys are sorted, floats
    rounded to ten significant digits and nothing time-dependent is included.
    """
    out = Path(out_dir)
    seg_dir = out / "segments"
    seg_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for s in segments:
        fname = f"{s.segment_id}.ply"
        save_cloud(s.cloud, seg_dir / fname, binary=True)
        index.append({"segment_id": s.segment_id, "mission": s.mission_id, "centroid": s.centroid,
                      "points": len(s), "file": f"segments/{fname}"})
    dump_json({"segments": index}, out / "segments.json")
    for side in sorted({s.mission_id for s in segments}):
        part = [s.cloud for s in segments if s.mission_id == side]
        save_cloud(concatenate(part), out / f"changes_{side}.ply", binary=True)
    write_match_matrix(match_matrix or MatchMatrix(), out / "match_matrix.csv")
    report = {
        "correspondences": [correspondence_json(c) for c in correspondences],
        "metrics": None if metrics is None else metrics.to_json(),
    }
    if extra:
        report.update(extra)
    path = out / "report.json"
    dump_json(report, path)
    return path


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
