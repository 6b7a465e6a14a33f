"""Cross-mission instance grouping and moved-object registration.

Descriptors of all changed segments are clustered into classes with K-means
(K picked at the WCSS elbow).  Within each class, objects from the two
missions are paired by a weighted mix of min-max normalised centroid
distance and descriptor distance; objects left over are additions or
removals.  Matched pairs get a rigid transform from SVD.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .descriptors import DescribedObject
from .geometry import RigidTransform, best_fit_transform

log = logging.getLogger(__name__)

EXACT_ASSIGNMENT_MAX = 8


class GroupingError(ValueError):
    pass


# -- K-means --------------------------------------------------------------------

@dataclass
class DescriptorClustering:
    K: int
    assignments: np.ndarray
    centroids: np.ndarray
    wcss: float
    history: List[float] = field(default_factory=list)
    wcss_curve: Optional[np.ndarray] = None


def _wcss(X, labels, C) -> float:
    return float(((X - C[labels]) ** 2).sum())


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centres = [int(rng.integers(n))]
    d2 = ((X - X[centres[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centre
            rest = np.setdiff1d(np.arange(n), centres)
            centres.append(int(rng.choice(rest)))
        else:
            centres.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, ((X - X[centres[-1]]) ** 2).sum(axis=1))
    return X[centres].copy()


def kmeans(descriptors, K: int, seed: int = 0, max_iter: int = 100) -> DescriptorClustering:
    """Lloyd's algorithm from k-means++ seeds; stops at an assignment fixpoint."""
    X = np.asarray(descriptors, dtype=np.float64)
    n = len(X)
    if K < 1:
        raise GroupingError("K must be at least 1")
    if K > n:
        raise GroupingError(f"K={K} exceeds the number of descriptors ({n})")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, K, rng)
    labels = None
    history: List[float] = []
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        # refill empty clusters with the points farthest from their centre
        counts = np.bincount(new, minlength=K)
        for k in np.flatnonzero(counts == 0):
            gap = np.where(counts[new] > 1, d2[np.arange(n), new], -1.0)
            far = int(np.argmax(gap))
            counts[new[far]] -= 1
            new[far] = k
            counts[k] = 1
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = np.array([X[labels == k].mean(axis=0) for k in range(K)])
        history.append(_wcss(X, labels, C))
    return DescriptorClustering(K, labels, C, history[-1], history)


@dataclass
class ElbowResult:
    K: int
    wcss_curve: np.ndarray
    clustering: DescriptorClustering
    warning: Optional[str] = None


def elbow_index(wcss: np.ndarray) -> int:
    """Index of the point farthest from the chord joining the curve's ends.

    Both axes are scaled to [0, 1] first so the answer does not depend on the
    units of WCSS.
    """
    k = len(wcss)
    x = np.arange(k) / (k - 1)
    span = wcss[0] - wcss[-1]
    y = (wcss - wcss[-1]) / span if span > 0 else np.zeros(k)
    # chord from (0, 1) to (1, 0): distance is proportional to |x + y - 1|
    dist = np.abs(x + y - 1.0)
    return int(np.argmax(dist[1:-1])) + 1


def select_k_elbow(descriptors, k_max: int, seed: int = 0, restarts: int = 5) -> ElbowResult:
    X = np.asarray(descriptors, dtype=np.float64)
    if k_max > len(X):
        raise GroupingError(f"k_max={k_max} exceeds the number of descriptors ({len(X)})")
    best: Dict[int, DescriptorClustering] = {}
    for K in range(1, k_max + 1):
        runs = [kmeans(X, K, seed=seed * 1000 + K * restarts + r) for r in range(restarts)]
        best[K] = min(runs, key=lambda c: c.wcss)
    curve = np.array([best[K].wcss for K in range(1, k_max + 1)])
    if k_max < 3:
        res = ElbowResult(1, curve, best[1], "fewer than 3 candidate K values; elbow undefined")
    elif curve[0] <= 0:
        res = ElbowResult(1, curve, best[1], "all descriptors identical")
    else:
        K = elbow_index(curve) + 1
        res = ElbowResult(K, curve, best[K])
    res.clustering.wcss_curve = curve
    if res.warning:
        log.warning("elbow selection: %s", res.warning)
    return res


# -- cluster confidence ------------------------------------------------------------

@dataclass
class ClusterConfidence:
    mean_distance: np.ndarray
    confidence: np.ndarray
    degenerate: Optional[str] = None


def minmax(values, lo: Optional[float] = None, hi: Optional[float] = None):
    """Scale to [0, 1] over ``[lo, hi]`` (defaults: the data range).

    Returns ``(scaled, degenerate)``; a zero range maps everything to 0.
    """
    v = np.asarray(values, dtype=np.float64)
    lo = v.min() if lo is None else lo
    hi = v.max() if hi is None else hi
    if hi - lo <= 0:
        return np.zeros_like(v), True
    return (v - lo) / (hi - lo), False


def cluster_confidence(clustering: DescriptorClustering, descriptors) -> ClusterConfidence:
    """Mean member-to-centroid distance per cluster, min-max scaled."""
    X = np.asarray(descriptors, dtype=np.float64)
    K = clustering.K
    lab = clustering.assignments
    centroids = np.array([X[lab == k].mean(axis=0) for k in range(K)])
    dist = np.linalg.norm(X - centroids[lab], axis=1)
    mean_d = np.array([dist[lab == k].mean() for k in range(K)])
    if K < 2:
        return ClusterConfidence(mean_d, np.zeros(K), "single cluster")
    conf, flat = minmax(mean_d)
    if flat:
        return ClusterConfidence(mean_d, conf, "all clusters have equal mean distance")
    # exact endpoints regardless of rounding
    conf[np.argmin(mean_d)] = 0.0
    conf[np.argmax(mean_d)] = 1.0
    return ClusterConfidence(mean_d, conf)


# -- weighted distance and assignment ----------------------------------------------

@dataclass(frozen=True)
class NormContext:
    p_min: float
    p_max: float
    d_min: float
    d_max: float

    @classmethod
    def over(cls, dp: np.ndarray, dd: np.ndarray) -> "NormContext":
        if len(dp) == 0:
            return cls(0.0, 0.0, 0.0, 0.0)
        return cls(float(dp.min()), float(dp.max()), float(dd.min()), float(dd.max()))


def raw_distances(a: DescribedObject, b: DescribedObject) -> Tuple[float, float]:
    dp = float(np.linalg.norm(a.segment.centroid - b.segment.centroid))
    dd = float(np.linalg.norm(a.descriptor - b.descriptor))
    return dp, dd


def weighted_distance(a: DescribedObject, b: DescribedObject, alpha: float, beta: float,
                      ctx: NormContext) -> Tuple[float, bool]:
    """Weighted normalised distance of one pair; flag set if a term degenerated."""
    _check_weights(alpha, beta)
    dp, dd = raw_distances(a, b)
    wp, fp = minmax([dp], ctx.p_min, ctx.p_max)
    wd, fd = minmax([dd], ctx.d_min, ctx.d_max)
    return float(alpha * wp[0] + beta * wd[0]), bool(fp or fd)


def _check_weights(alpha, beta):
    if alpha < 0 or beta < 0 or alpha + beta <= 0:
        raise GroupingError("weights must be non-negative with a positive sum")


def _weighted_matrix(P: np.ndarray, D: np.ndarray, alpha, beta, pair_mask=None) -> np.ndarray:
    """Weighted distance matrix normalised over the entries selected by ``pair_mask``."""
    sel = np.ones(P.shape, bool) if pair_mask is None else pair_mask
    if not sel.any():
        return np.zeros_like(P)
    ctx = NormContext.over(P[sel], D[sel])
    wp, _ = minmax(P, ctx.p_min, ctx.p_max)
    wd, _ = minmax(D, ctx.d_min, ctx.d_max)
    return alpha * wp + beta * wd


@dataclass
class Correspondence:
    kind: str  # moved | added | removed
    cls: int
    object_a: Optional[str]
    object_b: Optional[str]
    weighted_distance: Optional[float] = None
    pair_confidence: Optional[float] = None
    cluster_confidence: Optional[float] = None
    transform: Optional[RigidTransform] = None
    reason: str = ""


@dataclass
class MatchMatrix:
    """Per-class A x B pair confidences."""

    classes: Dict[int, Tuple[List[str], List[str], np.ndarray]] = field(default_factory=dict)

    def rows(self):
        for c in sorted(self.classes):
            ids_a, ids_b, M = self.classes[c]
            for i, a in enumerate(ids_a):
                for j, b in enumerate(ids_b):
                    yield c, a, b, float(M[i, j])


def odd_one_out(W: np.ndarray) -> Tuple[int, int]:
    """Unmatched member of an odd class, given its A-by-B weighted distances.

    An odd class is unbalanced, so the member comes from the larger side: the
    one with the largest summed weighted distance to the other mission's
    members (the only objects it could correspond to).  Returns
    ``(side, index)`` with side 0 for mission A and 1 for mission B.
    """
    na, nb = W.shape
    if na == nb:
        raise GroupingError("odd_one_out needs an unbalanced class")
    if na > nb:
        return 0, int(np.argmax(W.sum(axis=1)))
    return 1, int(np.argmax(W.sum(axis=0)))


def match_pairs(W: np.ndarray, exact: bool) -> List[Tuple[int, int]]:
    """Pairs minimising total weight (exact) or chosen greedily by weight."""
    if W.size == 0:
        return []
    if exact:
        r, c = linear_sum_assignment(W)
        return sorted(zip(r.tolist(), c.tolist()))
    order = np.argsort(W, axis=None, kind="stable")
    used_r, used_c, out = set(), set(), []
    for flat in order:
        i, j = np.unravel_index(flat, W.shape)
        if i in used_r or j in used_c:
            continue
        used_r.add(i)
        used_c.add(j)
        out.append((int(i), int(j)))
    return sorted(out)


def assign_correspondences(
    objects_a: Sequence[DescribedObject],
    objects_b: Sequence[DescribedObject],
    assignments_a: Sequence[int],
    assignments_b: Sequence[int],
    alpha: float = 0.5,
    beta: float = 0.5,
    cluster_conf: Optional[np.ndarray] = None,
) -> Tuple[List[Correspondence], MatchMatrix]:
    """Pair changed objects across two missions, class by class.

    In a class with an odd number of members, the member of the larger
    mission side farthest (summed weighted distance) from the other side's
    members is taken out first and reported as added or removed.  The rest
    are paired across missions to minimise the total weighted distance;
    exact assignment is used up to ``EXACT_ASSIGNMENT_MAX`` members, greedy
    selection above that.
    """
    _check_weights(alpha, beta)
    la, lb = np.asarray(assignments_a, int), np.asarray(assignments_b, int)
    if len(la) != len(objects_a) or len(lb) != len(objects_b):
        raise GroupingError("every object needs a class assignment")
    out: List[Correspondence] = []
    mm = MatchMatrix()
    for c in sorted(set(la.tolist()) | set(lb.tolist())):
        ia = np.flatnonzero(la == c)
        ib = np.flatnonzero(lb == c)
        members = [objects_a[i] for i in ia] + [objects_b[j] for j in ib]
        na = len(ia)
        cconf = None if cluster_conf is None else float(cluster_conf[c])

        def leftover(k, reason):
            if k < na:
                return Correspondence("removed", c, members[k].segment.segment_id, None,
                                      cluster_confidence=cconf, reason=reason)
            return Correspondence("added", c, None, members[k].segment.segment_id,
                                  cluster_confidence=cconf, reason=reason)

        n = len(members)
        cent = np.array([m.segment.centroid for m in members])
        desc = np.array([m.descriptor for m in members])
        P = np.linalg.norm(cent[:na, None] - cent[None, na:], axis=2)
        D = np.linalg.norm(desc[:na, None] - desc[None, na:], axis=2)
        # candidate set for normalisation: all cross-mission pairs in the class
        Wfull = _weighted_matrix(P, D, alpha, beta)
        active = list(range(n))
        if n % 2 == 1 and Wfull.size:
            side, idx = odd_one_out(Wfull)
            k = idx if side == 0 else na + idx
            out.append(leftover(k, "odd class size"))
            active.remove(k)
        act_a = [k for k in active if k < na]
        act_b = [k for k in active if k >= na]
        conf = 1.0 - minmax(Wfull)[0] if Wfull.size else Wfull
        if Wfull.size:
            mm.classes[c] = ([m.segment.segment_id for m in members[:na]],
                             [m.segment.segment_id for m in members[na:]], conf)
        W = Wfull[np.ix_(act_a, [k - na for k in act_b])] if act_a and act_b else np.zeros((0, 0))
        pairs = match_pairs(W, exact=len(active) <= EXACT_ASSIGNMENT_MAX)
        matched = set()
        for i, j in pairs:
            ka, kb = act_a[i], act_b[j]
            matched |= {ka, kb}
            out.append(Correspondence(
                "moved", c, members[ka].segment.segment_id, members[kb].segment.segment_id,
                float(Wfull[ka, kb - na]), float(conf[ka, kb - na]), cconf,
            ))
        for k in active:
            if k not in matched:
                out.append(leftover(k, "no partner in class"))
    return out, mm


# -- pair registration ----------------------------------------------------------

START_POINTS = 1500  # subsample size for the multi-start search


@dataclass
class PairRegistration:
    transform: RigidTransform
    rms: float
    degenerate: bool = False


def _principal_frames(X: np.ndarray) -> List[np.ndarray]:
    _, V = np.linalg.eigh(X.T @ X)
    V = V[:, ::-1]
    if np.linalg.det(V) < 0:
        V[:, 2] *= -1
    flips = [np.diag(s) for s in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1])]
    return [V @ f for f in flips]


def register_pair(
    points_a: np.ndarray,
    points_b: np.ndarray,
    max_iter: int = 50,
    tol: float = 1e-10,
    correspondence: str = "nearest",
    trim: float = 0.8,
) -> PairRegistration:
    """Rigid transform taking object A onto object B.

    Both clouds are centred on their centroids (the same-centroid
    assumption).  With ``correspondence="index"`` row i of A is paired with
    row i of B and the SVD solution is returned directly.  Otherwise pairing
    is by nearest neighbour: a rotation-only search from the identity and
    the four proper alignments of the principal axes picks the best start,
    then trimmed ICP on the closest ``trim`` fraction of pairs refines
    rotation and translation together.
    """
    A = np.asarray(points_a, dtype=np.float64)
    B = np.asarray(points_b, dtype=np.float64)
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    Xa, Xb = A - ca, B - cb
    for X in (Xa, Xb):
        sv = np.linalg.svd(X, compute_uv=False) if len(X) >= 2 else np.zeros(3)
        if len(X) < 3 or sv[1] <= 1e-9 * max(sv[0], 1e-300):
            return PairRegistration(RigidTransform(np.eye(3), cb - ca), np.inf, True)
    if correspondence == "index":
        if len(A) != len(B):
            raise GroupingError("index correspondence needs equally sized clouds")
        T = best_fit_transform(Xa, Xb)
        R = T.rotation
        rms = float(np.sqrt(np.mean(((Xa @ R.T) - Xb) ** 2) * 3))
        return PairRegistration(RigidTransform(R, cb - R @ ca), rms)

    # multi-start search on a strided subsample, pinned centroids
    sa = Xa[:: -(-len(Xa) // START_POINTS)]
    tree = cKDTree(Xb)
    starts = [np.eye(3)]
    Fa, Fb = _principal_frames(Xa), _principal_frames(Xb)
    starts += [Fb[k] @ Fa[0].T for k in range(4)]
    best = None
    for R in starts:
        R, rms = _rotation_icp(sa, Xb, tree, R, max_iter, tol)
        if best is None or rms < best[1]:
            best = (R, rms)
    R = best[0]
    # then free the translation: partial views rarely share a centroid
    T = RigidTransform(R, cb - R @ ca)
    T, rms = _trimmed_icp(A, B, cKDTree(B), T, max_iter, tol, trim)
    return PairRegistration(T, rms)


def _rotation_icp(Xa, Xb, tree, R, max_iter, tol):
    prev = np.inf
    for _ in range(max_iter):
        d, j = tree.query(Xa @ R.T)
        rms = float(np.sqrt(np.mean(d ** 2)))
        if prev - rms < tol:
            return R, rms
        prev = rms
        R = best_fit_transform(Xa, Xb[j]).rotation
    return R, float(np.sqrt(np.mean(tree.query(Xa @ R.T)[0] ** 2)))


def _trimmed_icp(A, B, tree, T, max_iter, tol, trim):
    """Point-to-point ICP on the closest ``trim`` fraction of pairs."""
    prev = np.inf
    for _ in range(max_iter):
        d, j = tree.query(T.apply(A))
        keep = d <= np.quantile(d, trim)
        rms = float(np.sqrt(np.mean(d[keep] ** 2)))
        if prev - rms < tol:
            break
        prev = rms
        T = best_fit_transform(A[keep], B[j[keep]])
    return T, rms
