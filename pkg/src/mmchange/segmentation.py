"""Turn a difference cloud into candidate objects.

Stages, in pipeline order: ground removal, MLS smoothing, voxel morphology,
Euclidean clustering, normal-based region growing and cross-mission
overlap carving.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import PointCloud


class SegmentationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlaneModel:
    normal: np.ndarray
    offset: float
    inliers: np.ndarray

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(points @ self.normal + self.offset)


@dataclass
class Segment:
    cloud: PointCloud
    mission_id: str = ""
    segment_id: str = ""
    centroid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise SegmentationError("segment cloud is empty")
        self.centroid = self.cloud.points.mean(axis=0)

    def __len__(self) -> int:
        return len(self.cloud)

    def extent(self) -> float:
        p = self.cloud.points
        return float(np.linalg.norm(p.max(0) - p.min(0)))


def renumber(segments: Sequence[Segment], mission_id: str) -> List[Segment]:
    return [Segment(s.cloud, mission_id, f"{mission_id}-{i:03d}") for i, s in enumerate(segments)]


# -- ground -------------------------------------------------------------------

def ransac_ground(
    cloud: PointCloud,
    dist_thresh: float = 0.05,
    max_angle_from_up: float = np.deg2rad(15),
    iters: int = 500,
    seed: int = 0,
) -> Tuple[PlaneModel, PointCloud]:
    """Largest-support plane whose normal is within ``max_angle_from_up`` of +z."""
    P = cloud.points
    n = len(P)
    if n < 3:
        raise SegmentationError("RANSAC needs at least 3 points")
    rng = np.random.default_rng(seed)
    idx = np.array([rng.choice(n, 3, replace=False) for _ in range(iters)])
    a, b, c = P[idx[:, 0]], P[idx[:, 1]], P[idx[:, 2]]
    normals = np.cross(b - a, c - a)
    norm = np.linalg.norm(normals, axis=1)
    scale = np.maximum(np.linalg.norm(b - a, axis=1) * np.linalg.norm(c - a, axis=1), 1e-300)
    ok = norm > 1e-9 * scale
    normals[ok] /= norm[ok, None]
    normals[normals[:, 2] < 0] *= -1
    ok &= normals[:, 2] >= np.cos(max_angle_from_up)
    if not ok.any():
        raise SegmentationError(
            f"no plane hypothesis within {np.rad2deg(max_angle_from_up):.1f} deg of vertical"
        )
    cand = np.flatnonzero(ok)
    offsets = -np.einsum("ij,ij->i", normals, a)
    best, best_count = -1, -1
    for chunk in np.array_split(cand, max(1, len(cand) * n // 4_000_000)):
        counts = (np.abs(P @ normals[chunk].T + offsets[chunk]) <= dist_thresh).sum(axis=0)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best, best_count = chunk[j], counts[j]
    nrm, d = normals[best], float(offsets[best])
    inl = np.abs(P @ nrm + d) <= dist_thresh
    return PlaneModel(nrm, d, np.flatnonzero(inl)), cloud.select(~inl)


# -- MLS --------------------------------------------------------------------

@njit(cache=True)
def _mls_kernel(P, nbr_ptr, nbr_idx, radius, order):
    out = P.copy()
    need = 3 if order == 1 else 6
    h2 = (radius * 0.5) ** 2
    for q in range(len(P)):
        s, e = nbr_ptr[q], nbr_ptr[q + 1]
        m = e - s
        if m < need:
            continue
        nb = P[nbr_idx[s:e]]
        w = np.exp(-np.sum((nb - P[q]) ** 2, axis=1) / h2)
        wsum = w.sum()
        mu = (nb * w[:, None]).sum(axis=0) / wsum
        X = nb - mu
        C = (X * w[:, None]).T @ X
        _, V = np.linalg.eigh(C)
        nrm, u, v = V[:, 0], V[:, 1], V[:, 2]
        rel = P[q] - mu
        if order == 1:
            out[q] = P[q] - (rel @ nrm) * nrm
            continue
        U = X @ u
        W = X @ v
        H = X @ nrm
        A = np.empty((m, 6))
        A[:, 0] = 1.0
        A[:, 1] = U
        A[:, 2] = W
        A[:, 3] = U * U
        A[:, 4] = U * W
        A[:, 5] = W * W
        Aw = A * w[:, None]
        M = Aw.T @ A
        if np.linalg.cond(M) > 1e12:
            out[q] = P[q] - (rel @ nrm) * nrm
            continue
        coef = np.linalg.solve(M, Aw.T @ H)
        uq, wq = rel @ u, rel @ v
        hq = (coef[0] + coef[1] * uq + coef[2] * wq
              + coef[3] * uq * uq + coef[4] * uq * wq + coef[5] * wq * wq)
        out[q] = mu + uq * u + wq * v + hq * nrm
    return out


def _csr_neighbours(points: np.ndarray, radius: float, tree: Optional[cKDTree] = None):
    tree = tree or cKDTree(points)
    lists = tree.query_ball_point(points, radius, return_sorted=True)
    ptr = np.zeros(len(points) + 1, np.int64)
    ptr[1:] = np.cumsum([len(l) for l in lists])
    idx = np.fromiter((i for l in lists for i in l), np.int64, count=ptr[-1])
    return ptr, idx


def mls_smooth(cloud: PointCloud, radius: float = 0.15, poly_order: int = 2) -> PointCloud:
    """Project every point onto a weighted local polynomial surface.

    Points with too few neighbours to fit the surface are returned unchanged.
    """
    if radius <= 0:
        raise SegmentationError("MLS radius must be positive")
    if poly_order not in (1, 2):
        raise SegmentationError("poly_order must be 1 or 2")
    if len(cloud) == 0:
        return cloud
    ptr, idx = _csr_neighbours(cloud.points, radius)
    pts = _mls_kernel(cloud.points, ptr, idx, float(radius), int(poly_order))
    return PointCloud(pts, cloud.labels, cloud.origin)


# -- morphology ---------------------------------------------------------------

def structuring_offsets(connectivity: int) -> np.ndarray:
    """Neighbour offsets (centre excluded) for 6-, 18- or 26-connectivity."""
    if connectivity not in (6, 18, 26):
        raise SegmentationError("connectivity must be 6, 18 or 26")
    offs = np.array([o for o in product((-1, 0, 1), repeat=3) if any(o)])
    l1 = np.abs(offs).sum(axis=1)
    limit = {6: 1, 18: 2, 26: 3}[connectivity]
    return offs[l1 <= limit]


class _VoxelSet:
    """Sorted packed integer voxel keys with neighbour lookups."""

    SHIFT = 21

    def __init__(self, ijk: np.ndarray, base: np.ndarray):
        self.base = base
        self.keys = np.unique(self.pack(ijk))

    def pack(self, ijk):
        q = ijk - self.base
        return (q[:, 0] << (2 * self.SHIFT)) | (q[:, 1] << self.SHIFT) | q[:, 2]

    def unpack(self, keys):
        m = (1 << self.SHIFT) - 1
        return np.stack([keys >> (2 * self.SHIFT), (keys >> self.SHIFT) & m, keys & m], 1) + self.base

    def contains(self, keys):
        if len(self.keys) == 0:
            return np.zeros(len(keys), bool)
        pos = np.minimum(np.searchsorted(self.keys, keys), len(self.keys) - 1)
        return self.keys[pos] == keys

    def neighbour_counts(self, offsets):
        ijk = self.unpack(self.keys)
        cnt = np.zeros(len(self.keys), np.int64)
        for o in offsets:
            cnt += self.contains(self.pack(ijk + o))
        return cnt


def morphology_voxels(
    ijk: np.ndarray,
    erode_n: int,
    dilate_n: int,
    connectivity: int = 26,
    min_neighbors: Optional[int] = 2,
) -> np.ndarray:
    """Erode then dilate a sparse voxel set; returns surviving ``(M, 3)`` keys.

    Erosion keeps a voxel when at least ``min_neighbors`` of its neighbours
    are occupied; ``None`` means all of them (classic binary erosion).
    """
    offs = structuring_offsets(connectivity)
    k = len(offs) if min_neighbors is None else int(min_neighbors)
    pad = erode_n + dilate_n + 2
    base = ijk.min(axis=0) - pad if len(ijk) else np.zeros(3, np.int64)
    vs = _VoxelSet(ijk, base)
    for _ in range(erode_n):
        if len(vs.keys) == 0:
            break
        vs.keys = vs.keys[vs.neighbour_counts(offs) >= k]
    for _ in range(dilate_n):
        if len(vs.keys) == 0:
            break
        cur = vs.unpack(vs.keys)
        grown = np.concatenate([cur] + [cur + o for o in offs])
        vs.keys = np.unique(vs.pack(grown))
    return vs.unpack(vs.keys)


def denoise_morphological(
    cloud: PointCloud,
    voxel: float = 0.05,
    erode_n: int = 1,
    dilate_n: int = 2,
    connectivity: int = 26,
    min_neighbors: Optional[int] = 2,
) -> PointCloud:
    """Keep the points whose voxel survives erosion followed by dilation."""
    if voxel <= 0:
        raise SegmentationError("morphology voxel must be positive")
    if len(cloud) == 0:
        return cloud
    ijk = np.floor(cloud.points / voxel).astype(np.int64)
    kept = morphology_voxels(ijk, erode_n, dilate_n, connectivity, min_neighbors)
    pad = erode_n + dilate_n + 2
    vs = _VoxelSet(kept, ijk.min(axis=0) - pad)
    return cloud.select(vs.contains(vs.pack(ijk)))


# -- clustering -----------------------------------------------------------------

def _components(n: int, pairs: np.ndarray) -> np.ndarray:
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    return connected_components(adj, directed=False)[1]


def _ordered_groups(comp: np.ndarray) -> List[np.ndarray]:
    """Index groups per component, ordered by their smallest member."""
    order = np.argsort(comp, kind="stable")
    splits = np.flatnonzero(np.diff(comp[order])) + 1
    groups = np.split(order, splits)
    groups.sort(key=lambda g: g[0])
    return groups


def euclidean_cluster(
    cloud: PointCloud,
    tol: float = 0.10,
    min_size: int = 50,
    max_size: Optional[int] = None,
    mission_id: str = "",
) -> List[Segment]:
    """Connected components of the ``tol``-neighbourhood graph."""
    if tol <= 0:
        raise SegmentationError("cluster tolerance must be positive")
    n = len(cloud)
    if n == 0:
        return []
    pairs = cKDTree(cloud.points).query_pairs(tol, output_type="ndarray")
    groups = _ordered_groups(_components(n, pairs))
    hi = max_size if max_size is not None else n
    segs = [Segment(cloud.select(g), mission_id) for g in groups if min_size <= len(g) <= hi]
    return renumber(segs, mission_id)


# -- region growing -----------------------------------------------------------

def estimate_normals(points: np.ndarray, k: int):
    """PCA normals and surface variation over k-nearest neighbourhoods."""
    k = min(k, len(points))
    _, nn = cKDTree(points).query(points, k=k)
    nb = points[nn] - points[nn].mean(axis=1, keepdims=True)
    C = np.einsum("nki,nkj->nij", nb, nb) / k
    w, V = np.linalg.eigh(C)
    curvature = w[:, 0] / np.maximum(w.sum(axis=1), 1e-300)
    return V[:, :, 0], curvature, nn


def region_grow_refine(
    segment: Segment,
    normal_k: int = 20,
    angle_thresh: float = np.deg2rad(25),
    curvature_thresh: float = 0.03,
    min_region: Optional[int] = None,
) -> List[Segment]:
    """Split a segment into smoothly connected surface regions.

    Regions grow from the flattest unassigned point; a neighbour joins when
    its normal is within ``angle_thresh`` of the current point's, and keeps
    growing only if it is itself flat.  Regions smaller than ``min_region``
    (default ``normal_k``) are absorbed into the adjacent region they share
    most neighbour links with, so the result always covers the input.
    """
    P = segment.cloud.points
    n = len(P)
    if n < normal_k:
        raise SegmentationError(f"segment has {n} points, fewer than normal_k={normal_k}")
    centred = P - P.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        return [segment]
    normals, curv, nn = estimate_normals(P, normal_k)
    cos_t = np.cos(angle_thresh)
    label = np.full(n, -1, np.int64)
    nreg = 0
    for s in np.argsort(curv, kind="stable"):
        if label[s] >= 0:
            continue
        label[s] = nreg
        stack = [s]
        while stack:
            q = stack.pop()
            cand = nn[q][label[nn[q]] < 0]
            cand = cand[np.abs(normals[cand] @ normals[q]) >= cos_t]
            label[cand] = nreg
            stack.extend(cand[curv[cand] < curvature_thresh])
        nreg += 1
    label = _absorb_small(label, nn, normal_k if min_region is None else min_region)
    if label.max() == 0:
        return [segment]
    groups = _ordered_groups(label)
    return [Segment(segment.cloud.select(g), segment.mission_id, f"{segment.segment_id}.{i}")
            for i, g in enumerate(groups)]


def _absorb_small(label: np.ndarray, nn: np.ndarray, min_region: int) -> np.ndarray:
    label = label.copy()
    while True:
        sizes = np.bincount(label)
        live = np.flatnonzero(sizes)
        if len(live) <= 1:
            break
        small = [r for r in live if sizes[r] < min_region]
        if not small:
            break
        r = min(small, key=lambda x: (sizes[x], x))
        members = np.flatnonzero(label == r)
        nbr_labels = label[nn[members].ravel()]
        nbr_labels = nbr_labels[nbr_labels != r]
        if len(nbr_labels):
            target = np.bincount(nbr_labels).argmax()
        else:
            others = live[live != r]
            target = others[np.argmax(sizes[others])]
        label[members] = target
    _, label = np.unique(label, return_inverse=True)
    return label


# -- cross-mission overlap --------------------------------------------------------

def overlap_ratio(a: Segment, b: Segment, voxel: float) -> float:
    va = np.unique(np.floor(a.cloud.points / voxel).astype(np.int64), axis=0)
    vb = np.unique(np.floor(b.cloud.points / voxel).astype(np.int64), axis=0)
    return int(_row_in(va, vb).sum()) / min(len(va), len(vb))


def merge_or_split(
    segments_a: Sequence[Segment],
    segments_b: Sequence[Segment],
    overlap_ratio_thresh: float = 0.3,
    voxel: float = 0.05,
    tol: float = 0.10,
    min_size: int = 1,
) -> Tuple[List[Segment], List[Segment]]:
    """Carve shared voxels out of strongly overlapping cross-mission pairs.

    For every pair whose overlap ratio (shared voxels over the smaller
    segment's voxels) exceeds the threshold, the points in shared voxels are
    removed from both segments and what remains is re-clustered.  Identical
    segments therefore vanish from the change output entirely.
    """
    def keys(seg):
        return np.floor(seg.cloud.points / voxel).astype(np.int64)

    cur_a = [(s, keys(s)) for s in segments_a]
    cur_b = [(s, keys(s)) for s in segments_b]
    carve_a = [np.zeros(len(s), bool) for s, _ in cur_a]
    carve_b = [np.zeros(len(s), bool) for s, _ in cur_b]
    va = [np.unique(k, axis=0) for _, k in cur_a]
    vb = [np.unique(k, axis=0) for _, k in cur_b]
    for i, (sa, ka) in enumerate(cur_a):
        for j, (sb, kb) in enumerate(cur_b):
            if not _boxes_touch(ka, kb):
                continue
            shared = va[i][_row_in(va[i], vb[j])]
            if len(shared) / min(len(va[i]), len(vb[j])) <= overlap_ratio_thresh:
                continue
            carve_a[i] |= _row_in(ka, shared)
            carve_b[j] |= _row_in(kb, shared)

    def rebuild(cur, carve):
        out = []
        for (seg, _), mask in zip(cur, carve):
            if not mask.any():
                out.append(seg)
                continue
            rest = seg.cloud.select(~mask)
            if len(rest) == 0:
                continue
            for k, sub in enumerate(euclidean_cluster(rest, tol, min_size, None, seg.mission_id)):
                out.append(Segment(sub.cloud, seg.mission_id, f"{seg.segment_id}.{k}"))
        return out

    return rebuild(cur_a, carve_a), rebuild(cur_b, carve_b)


def _boxes_touch(ka: np.ndarray, kb: np.ndarray) -> bool:
    return bool(np.all(ka.min(0) <= kb.max(0)) and np.all(kb.min(0) <= ka.max(0)))


def _row_in(rows: np.ndarray, table: np.ndarray) -> np.ndarray:
    if len(table) == 0:
        return np.zeros(len(rows), bool)
    base = np.minimum(rows.min(0), table.min(0))
    span = np.maximum(rows.max(0), table.max(0)) - base + 1
    def flat(x):
        q = x - base
        return (q[:, 0] * span[1] + q[:, 1]) * span[2] + q[:, 2]
    return np.isin(flat(rows), flat(table))
