"""Rigid-motion-invariant 16-dimensional object descriptors.

Layout of the vector before L2 normalisation:

    [0:8]   radial histogram of centroid distances over the RMS radius
    [8:11]  covariance eigenvalue ratios l2/l1, l3/l1, l3/l2
    [11:15] histogram of folded angles to the principal axis
    [15]    log point count, min-max scaled over the current batch

Every quantity is computed from distances and angles only, so applying a
rigid transform to the cloud leaves the descriptor unchanged.  Points are
sorted before any reduction so that permuting the input is bit-neutral.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .segmentation import Segment

DIM = 16
MIN_POINTS = 10
RADIAL_BINS = 8
ANGLE_BINS = 4
RADIAL_MAX = 2.5  # in RMS radii; farther points land in the last bin


class DescriptorError(ValueError):
    pass


@dataclass
class DescribedObject:
    segment: Segment
    descriptor: np.ndarray


def _canonical_order(points: np.ndarray) -> np.ndarray:
    return points[np.lexsort(points.T[::-1])]


def _normalise(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise DescriptorError("descriptor has zero or non-finite norm")
    return v / n


def count_slot(n_points: int, count_range: Optional[Tuple[float, float]]) -> float:
    if count_range is None:
        return 0.0
    lo, hi = count_range
    if hi - lo <= 0:
        return 0.0
    return float(np.clip((math.log1p(n_points) - lo) / (hi - lo), 0.0, 1.0))


def raw_descriptor(points: np.ndarray, count_range: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Unnormalised 16-vector for an ``(N, 3)`` array of points."""
    n = len(points)
    if n < MIN_POINTS:
        raise DescriptorError(f"segment has {n} points; at least {MIN_POINTS} required")
    P = _canonical_order(np.asarray(points, dtype=np.float64))
    c = np.array([math.fsum(P[:, i]) / n for i in range(3)])
    X = P - c
    r = np.sqrt(np.einsum("ij,ij->i", X, X))
    rms = math.sqrt(math.fsum(r * r) / n)
    if rms == 0:
        raise DescriptorError("segment points are all identical")

    radial = np.bincount(np.minimum((r / rms * (RADIAL_BINS / RADIAL_MAX)).astype(np.int64),
                                    RADIAL_BINS - 1), minlength=RADIAL_BINS) / n

    lam, V = np.linalg.eigh(X.T @ X / n)
    l3, l2, l1 = np.maximum(lam, 0.0)
    ratios = np.array([l2 / l1, l3 / l1, l3 / l2 if l2 > 0 else 0.0])

    axis = V[:, 2]
    cosang = np.abs(X @ axis) / np.where(r > 0, r, 1.0)
    ang = np.arccos(np.clip(cosang, 0.0, 1.0))
    angular = np.bincount(np.minimum((ang / (np.pi / 2) * ANGLE_BINS).astype(np.int64),
                                     ANGLE_BINS - 1)[r > 0], minlength=ANGLE_BINS) / n

    return np.concatenate([radial, ratios, angular, [count_slot(n, count_range)]])


def describe(segment: Segment, count_range: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """L2-normalised descriptor of one segment.

    ``count_range`` is the ``(min, max)`` of ``log1p(point count)`` over the
    batch being described; without it the count slot is zero.
    """
    return _normalise(raw_descriptor(segment.cloud.points, count_range))


def describe_all(segments: Sequence[Segment]) -> List[DescribedObject]:
    """Describe a batch, sharing one count range across it."""
    if not segments:
        return []
    logs = [math.log1p(len(s)) for s in segments]
    rng = (min(logs), max(logs))
    out, errors = [], []
    for i, seg in enumerate(segments):
        try:
            out.append(DescribedObject(seg, describe(seg, rng)))
        except DescriptorError as exc:
            errors.append(f"[{i}] {seg.segment_id or '?'}: {exc}")
    if errors:
        raise DescriptorError("; ".join(errors))
    return out


def export_descriptors(items: Iterable[Tuple[str, np.ndarray]], path) -> None:
    lines = []
    for sid, v in items:
        if any(ch.isspace() for ch in sid) or not sid:
            raise DescriptorError(f"segment id {sid!r} must be non-empty without whitespace")
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (DIM,):
            raise DescriptorError(f"descriptor for {sid} has shape {v.shape}, expected ({DIM},)")
        lines.append(" ".join([sid] + [repr(float(x)) for x in v]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def import_descriptors(path, known_ids: Optional[Iterable[str]] = None) -> List[Tuple[str, np.ndarray]]:
    """Read ``segment_id v1 .. v16`` rows, normalising each vector on ingest."""
    known = set(known_ids) if known_ids is not None else None
    out, seen = [], set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        sid, vals = parts[0], parts[1:]
        if len(vals) != DIM:
            raise DescriptorError(f"line {lineno} ({sid}): expected {DIM} values, got {len(vals)}")
        try:
            v = np.array([float(x) for x in vals])
        except ValueError as exc:
            raise DescriptorError(f"line {lineno} ({sid}): {exc}") from None
        if not np.all(np.isfinite(v)):
            raise DescriptorError(f"line {lineno} ({sid}): non-finite value")
        if known is not None and sid not in known:
            raise DescriptorError(f"line {lineno}: unknown segment id {sid!r}")
        if sid in seen:
            raise DescriptorError(f"line {lineno}: duplicate segment id {sid!r}")
        seen.add(sid)
        try:
            out.append((sid, _normalise(v)))
        except DescriptorError as exc:
            raise DescriptorError(f"line {lineno} ({sid}): {exc}") from None
    return out
