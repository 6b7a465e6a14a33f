"""Log-odds occupancy octree with free-space ray casting and differencing.

Leaves at the finest depth are addressed by integer keys ``(i, j, k)`` in
``[0, 2**depth)`` with the root cube centred on the world origin.  Storage is
allocated in dense 8x8x8 bricks (the nodes three levels above the leaves),
but a leaf only counts as observed once a ray has touched it; everything
else is unknown space.

Within one scan every touched voxel is updated once: endpoint voxels receive
a hit, the remaining voxels crossed by any ray receive a miss.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import _octree_kernels as K
from .geometry import PointCloud

P_HIT = 0.7
P_MISS = 0.4
CLAMP_MIN = 0.12
CLAMP_MAX = 0.97
MAX_RANGE = 120.0
MAX_DEPTH = K.KEY_BITS

_MAGIC = b"MMOCTREE"
_HEADER = struct.Struct("<8sddIQddddd")
_LOCAL_OFFSETS = K.local_offsets()


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


class OctreeError(ValueError):
    pass


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    return np.stack(
        [(packed >> 42) & K.KEY_MASK, (packed >> 21) & K.KEY_MASK, packed & K.KEY_MASK],
        axis=1,
    )


def pack_keys(ijk: np.ndarray) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    return (ijk[:, 0] << 42) | (ijk[:, 1] << 21) | ijk[:, 2]


class OccupancyOctree:
    def __init__(
        self,
        resolution: float = 0.05,
        extent: float = 200.0,
        p_hit: float = P_HIT,
        p_miss: float = P_MISS,
        clamp_min: float = CLAMP_MIN,
        clamp_max: float = CLAMP_MAX,
        max_range: float = MAX_RANGE,
    ):
        if resolution <= 0:
            raise OctreeError(f"resolution must be positive, got {resolution}")
        if extent < resolution:
            raise OctreeError("extent must cover at least one voxel")
        depth = max(1, math.ceil(math.log2(extent / resolution) - 1e-12))
        if depth > MAX_DEPTH:
            raise OctreeError(f"extent/resolution needs depth {depth} > {MAX_DEPTH}")
        self.resolution = float(resolution)
        self.extent = float(extent)
        self.depth = depth
        self.half = 1 << (depth - 1)
        self.p_hit, self.p_miss = p_hit, p_miss
        self.clamp_min, self.clamp_max = clamp_min, clamp_max
        self.max_range = float(max_range)
        self._l_hit, self._l_miss = logit(p_hit), logit(p_miss)
        self._lmin, self._lmax = logit(clamp_min), logit(clamp_max)
        self._table_keys = np.full(1 << 10, K.EMPTY, np.int64)
        self._table_vals = np.full(1 << 10, -1, np.int64)
        self._brick_keys = np.full(256, K.EMPTY, np.int64)
        self._cells = self._new_cells(256)
        # [allocated bricks, observed leaves]
        self._counts = np.zeros(2, np.int64)
        self._scans = 0

    # -- geometry of the key space ------------------------------------------

    @property
    def bounds(self):
        h = self.half * self.resolution
        return -h, h

    def keys_of(self, points: np.ndarray) -> np.ndarray:
        """Integer ``(N, 3)`` leaf indices (may fall outside the tree)."""
        return np.floor(np.asarray(points) / self.resolution).astype(np.int64) + self.half

    def in_tree(self, ijk: np.ndarray) -> np.ndarray:
        return np.all((ijk >= 0) & (ijk < 2 * self.half), axis=1)

    def packed_keys_of(self, points: np.ndarray) -> np.ndarray:
        """Packed keys; points outside the tree map to ``-1``."""
        ijk = self.keys_of(points)
        out = np.full(len(ijk), -1, np.int64)
        inside = self.in_tree(ijk)
        out[inside] = pack_keys(ijk[inside])
        return out

    def centers_of(self, packed: np.ndarray) -> np.ndarray:
        return (unpack_keys(packed) - self.half + 0.5) * self.resolution

    def __len__(self) -> int:
        """Number of observed leaves."""
        return int(self._counts[1])

    @property
    def n_bricks(self) -> int:
        return int(self._counts[0])

    # -- storage growth -------------------------------------------------------

    @staticmethod
    def _new_cells(n):
        cells = np.zeros((n, K.BRICK_SIZE, 2))
        cells[:, :, 1] = -1.0
        return cells

    def _grow(self) -> None:
        nb = self.n_bricks
        cap = len(self._brick_keys)
        # insertion kernels stop early whenever a ray might need more room
        new_cap = 2 * cap
        keys = np.full(new_cap, K.EMPTY, np.int64)
        keys[:nb] = self._brick_keys[:nb]
        cells = self._new_cells(new_cap)
        cells[:nb] = self._cells[:nb]
        self._brick_keys, self._cells = keys, cells
        if len(self._table_keys) < 2 * new_cap:
            self._table_keys, self._table_vals = K.rebuild_table(
                self._brick_keys, nb, 2 * new_cap)

    def _storage(self):
        return (self._table_keys, self._table_vals, self._brick_keys,
                self._cells, self._counts)

    # -- insertion ----------------------------------------------------------

    def _clip_rays(self, origin: np.ndarray, points: np.ndarray):
        """Truncate rays to ``max_range`` and clip them to the root cube.

        Returns clipped starts, ends and a flag telling whether the ray's end
        is a genuine return (inside range and inside the tree).
        """
        d = points - origin
        length = np.linalg.norm(d, axis=1)
        has_hit = length <= self.max_range
        scale = np.where(has_hit, 1.0, self.max_range / np.maximum(length, 1e-300))
        ends = origin + d * scale[:, None]
        lo, hi = self.bounds
        eps = 1e-9 * self.resolution
        lo, hi = lo + eps, hi - eps
        d = ends - origin
        t0 = np.zeros(len(d))
        t1 = np.ones(len(d))
        with np.errstate(divide="ignore", invalid="ignore"):
            for a in range(3):
                da, oa = d[:, a], origin[a]
                zero = da == 0
                ta = (lo - oa) / da
                tb = (hi - oa) / da
                tmin = np.where(zero, -np.inf, np.minimum(ta, tb))
                tmax = np.where(zero, np.inf, np.maximum(ta, tb))
                outside = zero & ((oa < lo) | (oa > hi))
                t0 = np.maximum(t0, tmin)
                t1 = np.minimum(t1, tmax)
                t1 = np.where(outside, -1.0, t1)
        valid = t0 <= t1
        has_hit &= t1 >= 1.0
        starts = origin + d * t0[:, None]
        ends = origin + d * t1[:, None]
        return starts[valid], ends[valid], has_hit[valid]

    def insert_scan(self, scan: PointCloud) -> "OccupancyOctree":
        """Ray-cast one scan from its sensor origin."""
        if scan.origin is None:
            raise OctreeError("scan has no sensor origin; cannot ray-cast")
        self._scans += 1
        scan_id = self._scans
        if len(scan) == 0:
            return self
        starts, ends, has_hit = self._clip_rays(scan.origin, scan.points)
        if len(starts) == 0:
            return self
        top = 2 * self.half - 1
        ks = np.clip(self.keys_of(starts), 0, top)
        ke = np.clip(self.keys_of(ends), 0, top)

        hits = np.ascontiguousarray(ke[has_hit])
        pos = 0
        while pos < len(hits):
            pos = K.insert_hits(*self._storage(), hits, scan_id,
                                self._l_hit, self._lmin, self._lmax, pos)
            if pos < len(hits):
                self._grow()

        pos = 0
        while pos < len(starts):
            pos = K.insert_misses(*self._storage(), starts, ends, ks, ke,
                                  self.resolution, self.half, scan_id,
                                  self._l_miss, self._lmin, self._lmax, pos)
            if pos < len(starts):
                self._grow()
        return self

    def trace(self, origin, end) -> np.ndarray:
        """``(n, 3)`` leaf indices a ray passes through before its end voxel."""
        o = np.asarray(origin, dtype=np.float64)
        e = np.asarray(end, dtype=np.float64)[None]
        return self.trace_many(np.broadcast_to(o, e.shape), e)[0]

    def trace_many(self, origins: np.ndarray, ends: np.ndarray):
        """Traversed leaf indices for many rays (list of ``(n_i, 3)`` arrays)."""
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        ends = np.ascontiguousarray(ends, dtype=np.float64)
        ks, ke = self.keys_of(origins), self.keys_of(ends)
        span = np.abs(ke - ks).sum(axis=1)
        offsets = np.concatenate([[0], np.cumsum(span)]).astype(np.int64)
        flat = K.trace_many(origins, ends, ks, ke, self.resolution, self.half, offsets)
        return [flat[offsets[r]:offsets[r + 1]] for r in range(len(origins))]

    # -- queries --------------------------------------------------------------

    def _lookup_ijk(self, ijk: np.ndarray):
        ijk = np.ascontiguousarray(ijk, dtype=np.int64).reshape(-1, 3)
        inside = self.in_tree(ijk)
        vals, found = K.lookup_many(self._table_keys, self._table_vals, self._cells,
                                    np.where(inside[:, None], ijk, 0))
        found &= inside
        return vals, found

    def query(self, p) -> Optional[float]:
        """Occupancy probability at ``p`` or ``None`` if never observed."""
        vals, found = self._lookup_ijk(self.keys_of(np.asarray(p, dtype=np.float64).reshape(1, 3)))
        return float(sigmoid(vals[0])) if found[0] else None

    def query_many(self, points: np.ndarray) -> np.ndarray:
        """Probabilities with NaN marking unknown space."""
        vals, found = self._lookup_ijk(self.keys_of(np.asarray(points, dtype=np.float64)))
        out = sigmoid(vals)
        out[~found] = np.nan
        return out

    def log_odds_of(self, packed: np.ndarray):
        return self._lookup_ijk(unpack_keys(packed))

    def leaves(self):
        """Packed keys and log-odds of all observed leaves, sorted by key."""
        nb = self.n_bricks
        b, local = np.nonzero(self._cells[:nb, :, 1] >= 0.0)
        base = unpack_keys(self._brick_keys[b]) << K.BRICK_SHIFT
        keys = pack_keys(base + _LOCAL_OFFSETS[local])
        vals = self._cells[b, local, 0]
        order = np.argsort(keys, kind="stable")
        return keys[order], vals[order]

    def compatible_with(self, other: "OccupancyOctree") -> bool:
        return self.resolution == other.resolution and self.depth == other.depth

    # -- serialisation --------------------------------------------------------

    def save(self, path) -> None:
        """Binary dump: fixed header then ``(uint64 key, float64 log-odds)`` records."""
        keys, vals = self.leaves()
        rec = np.empty(len(keys), dtype=[("key", "<u8"), ("logodds", "<f8")])
        rec["key"], rec["logodds"] = keys, vals
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, self.resolution, self.extent, self.depth, len(keys),
                                  self.p_hit, self.p_miss, self.clamp_min, self.clamp_max,
                                  self.max_range))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "OccupancyOctree":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise OctreeError(f"{path}: truncated octree header")
        magic, res, extent, depth, n, ph, pm, cmin, cmax, rng = _HEADER.unpack_from(data)
        if magic != _MAGIC:
            raise OctreeError(f"{path}: not an octree file")
        tree = cls(res, extent, ph, pm, cmin, cmax, rng)
        if tree.depth != depth:
            raise OctreeError(f"{path}: depth {depth} inconsistent with extent/resolution")
        if len(data) < _HEADER.size + 16 * n:
            raise OctreeError(f"{path}: truncated octree body")
        rec = np.frombuffer(data, dtype=[("key", "<u8"), ("logodds", "<f8")],
                            count=n, offset=_HEADER.size)
        ijk = np.ascontiguousarray(unpack_keys(rec["key"].astype(np.int64)))
        pos = 0
        # stamp 0: observed, but by no scan of this session
        while pos < n:
            pos = K.insert_hits(*tree._storage(), ijk, 0, 0.0, -np.inf, np.inf, pos)
            if pos < n:
                tree._grow()
        b = np.array([K.find_brick(tree._table_keys, tree._table_vals, bk) for bk in
                      pack_keys(ijk >> K.BRICK_SHIFT)], dtype=np.int64).reshape(-1)
        tree._cells[b, K.local_index_np(ijk), 0] = rec["logodds"]
        return tree


@dataclass
class ChangeSet:
    """Packed leaf keys occupied in only one of two trees."""

    added: np.ndarray
    removed: np.ndarray
    resolution: float
    depth: int

    @property
    def half(self) -> int:
        return 1 << (self.depth - 1)

    def centers(self, side: str) -> np.ndarray:
        return (unpack_keys(self.side(side)) - self.half + 0.5) * self.resolution

    def side(self, side: str) -> np.ndarray:
        if side not in ("added", "removed"):
            raise ValueError(f"side must be 'added' or 'removed', got {side!r}")
        return self.added if side == "added" else self.removed

    def is_empty(self) -> bool:
        return len(self.added) == 0 and len(self.removed) == 0

    def to_cloud(self) -> PointCloud:
        """Voxel centres labelled 1 (added) and 2 (removed)."""
        pts = np.concatenate([self.centers("added"), self.centers("removed")])
        labels = np.concatenate([np.ones(len(self.added), np.int64),
                                 np.full(len(self.removed), 2, np.int64)])
        return PointCloud(pts.reshape(-1, 3), labels)


def diff_octrees(
    tree_a: OccupancyOctree,
    tree_b: OccupancyOctree,
    threshold: float = 0.5,
    require_observed_both: bool = False,
) -> ChangeSet:
    """Leaves whose thresholded occupancy differs between two trees.

    A voxel is *added* when occupied in B and free or unknown in A, and
    *removed* symmetrically.  With ``require_observed_both`` unknown space
    never counts as a change.
    """
    if not tree_a.compatible_with(tree_b):
        raise OctreeError(
            f"resolution/depth mismatch: {tree_a.resolution}/{tree_a.depth} "
            f"vs {tree_b.resolution}/{tree_b.depth}"
        )
    cut = logit(threshold)
    ka, la = tree_a.leaves()
    kb, lb = tree_b.leaves()
    keys = np.union1d(ka, kb)
    known_a = np.isin(keys, ka, assume_unique=True)
    known_b = np.isin(keys, kb, assume_unique=True)
    occ_a = np.zeros(len(keys), bool)
    occ_b = np.zeros(len(keys), bool)
    occ_a[known_a] = la > cut
    occ_b[known_b] = lb > cut
    added = occ_b & ~occ_a
    removed = occ_a & ~occ_b
    if require_observed_both:
        added &= known_a
        removed &= known_b
    return ChangeSet(keys[added], keys[removed], tree_a.resolution, tree_a.depth)


def project_changes(changes: ChangeSet, cloud: PointCloud, side: str) -> PointCloud:
    """Points of ``cloud`` whose leaf key lies in the chosen side of ``changes``."""
    keys = changes.side(side)
    if len(cloud) == 0 or len(keys) == 0:
        return cloud.select(np.zeros(len(cloud), bool))
    ijk = np.floor(cloud.points / changes.resolution).astype(np.int64) + changes.half
    inside = np.all((ijk >= 0) & (ijk < 2 * changes.half), axis=1)
    packed = np.full(len(ijk), -1, np.int64)
    packed[inside] = pack_keys(ijk[inside])
    return cloud.select(np.isin(packed, keys))


def build_octree(scans, resolution: float = 0.05, extent: float = 200.0, **kw) -> OccupancyOctree:
    tree = OccupancyOctree(resolution, extent, **kw)
    for scan in scans:
        tree.insert_scan(scan)
    return tree
