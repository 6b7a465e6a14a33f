"""Joint multi-mission registration.

Missions arrive as trajectories of posed scans (scans in the sensor frame).
Inter-mission loop closures are proposed by pose proximity, refined with
point-to-point ICP on the local scan pair (finished by a point-to-plane
pass), and everything is solved as one SE(3) pose graph.  There is deliberately no whole-map ICP entry point: maps
are only ever registered through local scan pairs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import (
    PointCloud,
    RigidTransform,
    best_fit_transform,
    concatenate,
    project_to_so3,
    se3_exp,
    se3_log,
    transform_cloud,
    voxel_downsample,
)
from .segmentation import estimate_normals

log = logging.getLogger(__name__)

SIGMA_ODOM = (0.05, 0.01)
SIGMA_LOOP = (0.05, 0.01)
PRIOR_INFO = 1e8


class AlignmentError(RuntimeError):
    pass


class IcpDivergence(AlignmentError):
    pass


class PoseGraphError(AlignmentError):
    pass


def information(sigma_t: float, sigma_r: float) -> np.ndarray:
    return np.diag([1 / sigma_t**2] * 3 + [1 / sigma_r**2] * 3)


@dataclass
class MissionTrajectory:
    mission_id: str
    timestamps: np.ndarray
    poses: List[RigidTransform]
    scans: List[PointCloud]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        n = len(self.timestamps)
        if n < 1:
            raise AlignmentError(f"mission {self.mission_id}: needs at least one node")
        if len(self.poses) != n or len(self.scans) != n:
            raise AlignmentError(f"mission {self.mission_id}: timestamps/poses/scans length mismatch")
        if np.any(np.diff(self.timestamps) <= 0):
            raise AlignmentError(f"mission {self.mission_id}: timestamps must increase strictly")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def posed_scans(self) -> List[PointCloud]:
        """Scans moved into the world frame, each with its sensor origin."""
        out = []
        for T, scan in zip(self.poses, self.scans):
            s = scan if scan.origin is not None else PointCloud(scan.points, scan.labels, np.zeros(3))
            out.append(transform_cloud(s, T))
        return out

    def merged_cloud(self) -> PointCloud:
        return concatenate(self.posed_scans())


@dataclass
class Factor:
    kind: str  # "odometry" | "loop_closure"
    a: Tuple[int, int]  # (mission index, node index)
    b: Tuple[int, int]
    measurement: RigidTransform  # expected X_a^-1 X_b
    info: np.ndarray = field(default_factory=lambda: information(*SIGMA_ODOM))

    def __post_init__(self):
        if tuple(self.a) == tuple(self.b):
            raise PoseGraphError("factor endpoints must differ")
        info = np.asarray(self.info, dtype=np.float64)
        if info.shape != (6, 6) or not np.allclose(info, info.T):
            raise PoseGraphError("information must be a symmetric 6x6 matrix")
        if np.linalg.eigvalsh(info).min() <= 0:
            raise PoseGraphError("information must be positive definite")
        self.info = info


@dataclass
class MissionGraph:
    trajectories: List[MissionTrajectory]
    factors: List[Factor]
    prior: Optional[RigidTransform] = None  # on node (0, 0); defaults to its pose
    prior_info: np.ndarray = field(default_factory=lambda: np.eye(6) * PRIOR_INFO)

    def node_index(self) -> Dict[Tuple[int, int], int]:
        idx, n = {}, 0
        for m, traj in enumerate(self.trajectories):
            for k in range(len(traj)):
                idx[(m, k)] = n
                n += 1
        return idx

    def poses(self) -> List[RigidTransform]:
        return [p for traj in self.trajectories for p in traj.poses]


# -- loop-closure proposal --------------------------------------------------

def propose_loop_closures(a: MissionTrajectory, b: MissionTrajectory, radius: float):
    """Nearest node of ``b`` within ``radius`` for every node of ``a``."""
    if len(b) == 0:
        return []
    tree = cKDTree(b.positions())
    dist, idx = tree.query(a.positions(), k=1, distance_upper_bound=radius)
    pairs = {(int(i), int(j)) for i, (d, j) in enumerate(zip(dist, idx)) if np.isfinite(d)}
    return sorted(pairs)


# -- ICP ------------------------------------------------------------------

@dataclass
class IcpParams:
    max_iter: int = 50
    corr_dist: float = 0.5
    convergence_eps: float = 1e-6
    leaf: float = 0.0  # optional downsampling before matching
    max_points: int = 0  # strided source subsample; 0 keeps every point
    metric: str = "point"  # "point" or "plane"
    normal_k: int = 12

    def __post_init__(self):
        if self.metric not in ("point", "plane"):
            raise ValueError(f"unknown ICP metric {self.metric!r}")


@dataclass
class IcpResult:
    transform: RigidTransform
    fitness: float
    inlier_fraction: float
    history: List[float]
    converged: bool


def _plane_step(p: np.ndarray, q: np.ndarray, n: np.ndarray) -> RigidTransform:
    """Linearised point-to-plane update minimising sum(((R p + t - q) . n)^2)."""
    A = np.c_[np.cross(p, n), n]
    b = -np.einsum("ij,ij->i", p - q, n)
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    return RigidTransform.from_rotvec(x[:3], x[3:])


def icp_register(
    source: PointCloud,
    target: PointCloud,
    init: Optional[RigidTransform] = None,
    params: Optional[IcpParams] = None,
    target_tree: Optional[cKDTree] = None,
    target_normals: Optional[np.ndarray] = None,
) -> IcpResult:
    """ICP mapping ``source`` into the frame of ``target``.

    The point metric uses closed-form SVD steps; the plane metric uses
    linearised point-to-plane steps against PCA normals of the target.  An
    iterate is only accepted when its inlier RMS does not exceed the previous
    one, so ``history`` is non-increasing by construction.
    """
    params = params or IcpParams()
    init = init or RigidTransform.identity()
    if len(source) == 0 or len(target) == 0:
        raise AlignmentError("ICP needs non-empty source and target clouds")
    if params.leaf > 0:
        source = voxel_downsample(source, params.leaf)
        if target_tree is None:
            target = voxel_downsample(target, params.leaf)
    src = source.points
    if params.max_points and len(src) > params.max_points:
        src = src[:: -(-len(src) // params.max_points)]
    tgt = target.points
    tree = target_tree if target_tree is not None else cKDTree(tgt)
    if target_tree is not None:
        tgt = tree.data

    plane = params.metric == "plane"
    if plane and target_normals is None:
        target_normals, _, _ = estimate_normals(tgt, params.normal_k)

    def evaluate(T):
        moved = T.apply(src)
        d, j = tree.query(moved, k=1, distance_upper_bound=params.corr_dist)
        inl = np.isfinite(d)
        if plane and inl.any():
            d = np.zeros(len(src))
            d[inl] = np.einsum("ij,ij->i", moved[inl] - tgt[j[inl]], target_normals[j[inl]])
        rms = float(np.sqrt(np.mean(d[inl] ** 2))) if inl.any() else np.inf
        return rms, inl, j

    T = init
    rms, inl, j = evaluate(T)
    if not inl.any():
        raise IcpDivergence(
            f"no correspondences within {params.corr_dist} m at the initial guess"
        )
    history = [rms]
    converged = False
    for _ in range(params.max_iter):
        if inl.sum() < 3:
            break
        if plane:
            step = _plane_step(T.apply(src[inl]), tgt[j[inl]], target_normals[j[inl]])
        else:
            step = best_fit_transform(T.apply(src[inl]), tgt[j[inl]])
        T_new = step @ T
        rms_new, inl_new, j_new = evaluate(T_new)
        if not inl_new.any() or rms_new > rms:
            converged = True
            break
        delta = rms - rms_new
        T, rms, inl, j = T_new, rms_new, inl_new, j_new
        history.append(rms)
        if delta < params.convergence_eps and np.linalg.norm(step.log()) < params.convergence_eps:
            converged = True
            break
    return IcpResult(T, rms, float(inl.mean()), history, converged)


# -- pose graph -------------------------------------------------------------

def _stack(poses: Sequence[RigidTransform]) -> np.ndarray:
    return np.array([p.matrix() for p in poses]).reshape(-1, 4, 4)


def _inv(T: np.ndarray) -> np.ndarray:
    out = np.zeros_like(T)
    Rt = np.swapaxes(T[:, :3, :3], 1, 2)
    out[:, :3, :3] = Rt
    out[:, :3, 3] = -np.einsum("nij,nj->ni", Rt, T[:, :3, 3])
    out[:, 3, 3] = 1.0
    return out


class _Problem:
    """Flattened factor arrays for vectorised residual evaluation."""

    def __init__(self, graph: MissionGraph):
        idx = graph.node_index()
        self.n = len(idx)
        self.ia = np.array([idx[tuple(f.a)] for f in graph.factors], dtype=np.int64)
        self.ib = np.array([idx[tuple(f.b)] for f in graph.factors], dtype=np.int64)
        self.Zinv = _inv(_stack([f.measurement for f in graph.factors]))
        self.info = np.array([f.info for f in graph.factors]).reshape(-1, 6, 6)
        X0 = graph.trajectories[0].poses[0]
        self.prior_inv = (graph.prior or X0).inverse().matrix()
        self.prior_info = np.asarray(graph.prior_info, dtype=np.float64)

    def residuals(self, X):
        E = self.Zinv @ _inv(X[self.ia]) @ X[self.ib]
        return se3_log(E), se3_log((self.prior_inv @ X[0])[None])[0]

    def cost(self, X) -> float:
        e, ep = self.residuals(X)
        return float(np.einsum("ni,nij,nj->", e, self.info, e) + ep @ self.prior_info @ ep)

    def linearize(self, X, h=1e-6):
        """Central-difference Jacobians w.r.t. right perturbations of each endpoint."""
        F = len(self.ia)
        Ja = np.zeros((F, 6, 6))
        Jb = np.zeros((F, 6, 6))
        Xa_inv, Xb = _inv(X[self.ia]), X[self.ib]
        eye = np.eye(6)
        for k in range(6):
            dp = se3_exp(h * eye[k])[0]
            dm = se3_exp(-h * eye[k])[0]
            # X_a exp(d) inverted is exp(-d) X_a^-1
            ep = se3_log(self.Zinv @ (dm @ Xa_inv) @ Xb)
            em = se3_log(self.Zinv @ (dp @ Xa_inv) @ Xb)
            Ja[:, :, k] = (ep - em) / (2 * h)
            ep = se3_log(self.Zinv @ Xa_inv @ (Xb @ dp))
            em = se3_log(self.Zinv @ Xa_inv @ (Xb @ dm))
            Jb[:, :, k] = (ep - em) / (2 * h)
        Jp = np.zeros((6, 6))
        for k in range(6):
            dp = se3_exp(h * eye[k])[0]
            dm = se3_exp(-h * eye[k])[0]
            Jp[:, k] = (se3_log((self.prior_inv @ X[0] @ dp)[None])[0]
                        - se3_log((self.prior_inv @ X[0] @ dm)[None])[0]) / (2 * h)
        return Ja, Jb, Jp

    def normal_equations(self, X):
        e, ep = self.residuals(X)
        Ja, Jb, Jp = self.linearize(X)
        H = np.zeros((6 * self.n, 6 * self.n))
        g = np.zeros(6 * self.n)
        JaT_W = np.einsum("nji,njk->nik", Ja, self.info)
        JbT_W = np.einsum("nji,njk->nik", Jb, self.info)
        blocks = {
            "aa": JaT_W @ Ja, "ab": JaT_W @ Jb, "bb": JbT_W @ Jb,
        }
        ga = np.einsum("nij,nj->ni", JaT_W, e)
        gb = np.einsum("nij,nj->ni", JbT_W, e)
        for f in range(len(self.ia)):
            a, b = 6 * self.ia[f], 6 * self.ib[f]
            H[a:a + 6, a:a + 6] += blocks["aa"][f]
            H[b:b + 6, b:b + 6] += blocks["bb"][f]
            H[a:a + 6, b:b + 6] += blocks["ab"][f]
            H[b:b + 6, a:a + 6] += blocks["ab"][f].T
            g[a:a + 6] += ga[f]
            g[b:b + 6] += gb[f]
        H[:6, :6] += Jp.T @ self.prior_info @ Jp
        g[:6] += Jp.T @ self.prior_info @ ep
        return H, g


def _check_connected(graph: MissionGraph) -> None:
    idx = graph.node_index()
    n = len(idx)
    if n == 1:
        return
    rows = [idx[tuple(f.a)] for f in graph.factors]
    cols = [idx[tuple(f.b)] for f in graph.factors]
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    ncomp, comp = connected_components(adj, directed=False)
    if ncomp > 1:
        inv = {v: k for k, v in idx.items()}
        missions = sorted({graph.trajectories[inv[i][0]].mission_id
                           for i in range(n) if comp[i] != comp[0]})
        raise PoseGraphError(
            f"pose graph is disconnected ({ncomp} components); not linked to the "
            f"reference: missions {missions}"
        )


def graph_cost(graph: MissionGraph) -> float:
    return _Problem(graph).cost(_stack(graph.poses()))


def optimize_pose_graph(graph: MissionGraph, max_iter: int = 50, tol: float = 1e-12,
                        min_step: float = 1e-10) -> MissionGraph:
    """Batch Gauss-Newton over all poses with Levenberg damping as fallback.

    Poses are perturbed on the right (``X <- X exp(d)``), which keeps the
    solution invariant to a common left transform of all poses and the prior.
    Poses are updated in place; the same graph is returned.
    """
    for f in graph.factors:
        for end in (f.a, f.b):
            m, k = end
            if not (0 <= m < len(graph.trajectories) and 0 <= k < len(graph.trajectories[m])):
                raise PoseGraphError(f"factor endpoint {end} references no node")
    _check_connected(graph)
    prob = _Problem(graph)
    X = _stack(graph.poses())
    cost = prob.cost(X)
    lam = 0.0
    stepped = False
    for it in range(max_iter):
        H, g = prob.normal_equations(X)
        if not np.any(g):
            break
        accepted = False
        for _ in range(12):
            A = H + lam * np.diag(np.diag(H)) if lam > 0 else H
            try:
                c, low = scipy.linalg.cho_factor(A)
                dx = -scipy.linalg.cho_solve((c, low), g)
            except (np.linalg.LinAlgError, ValueError):
                _report_singular(H, graph)
                raise PoseGraphError("singular normal equations")
            if np.abs(dx).max() < min_step:
                # at the optimum already; leave the poses untouched
                return _write_back(graph, X) if stepped else graph
            X_new = X @ se3_exp(dx.reshape(-1, 6))
            cost_new = prob.cost(X_new)
            if cost_new <= cost:
                accepted = True
                break
            lam = 1e-4 if lam == 0 else lam * 10
        if not accepted:
            break
        done = cost - cost_new <= tol * max(cost, 1e-300) or np.abs(dx).max() < 1e-12
        X, cost = X_new, cost_new
        stepped = True
        lam = lam / 10 if lam > 1e-6 else 0.0
        log.debug("pose graph iter %d cost %.6g", it, cost)
        if done:
            break
    return _write_back(graph, X) if stepped else graph


def _write_back(graph: MissionGraph, X: np.ndarray) -> MissionGraph:
    n = 0
    for traj in graph.trajectories:
        traj.poses = [RigidTransform(project_to_so3(X[n + k][:3, :3]), X[n + k][:3, 3])
                      for k in range(len(traj))]
        n += len(traj)
    return graph


def _report_singular(H: np.ndarray, graph: MissionGraph) -> None:
    inv = {v: k for k, v in graph.node_index().items()}
    for i in range(H.shape[0] // 6):
        block = H[6 * i:6 * i + 6, 6 * i:6 * i + 6]
        if np.linalg.matrix_rank(block) < 6:
            raise PoseGraphError(f"singular normal equations at node {inv[i]} block")


# -- mission alignment ------------------------------------------------------

@dataclass
class AlignParams:
    radius: float = 3.0
    corr_schedule: Tuple[float, ...] = (1.5, 0.5, 0.2)
    icp: IcpParams = field(default_factory=lambda: IcpParams(leaf=0.1, max_points=4000, convergence_eps=1e-5))
    min_inlier_fraction: float = 0.6
    max_fitness: float = 0.10  # two octree voxels
    fine_corr: float = 0.1  # point-to-plane polish; 0 disables it
    fine_leaf: float = 0.05
    sigma_odom: Tuple[float, float] = SIGMA_ODOM
    sigma_loop: Tuple[float, float] = SIGMA_LOOP


def odometry_factors(traj: MissionTrajectory, m: int, sigma=SIGMA_ODOM) -> List[Factor]:
    info = information(*sigma)
    return [
        Factor("odometry", (m, k), (m, k + 1), traj.poses[k].inverse() @ traj.poses[k + 1], info)
        for k in range(len(traj) - 1)
    ]


def refine_closure(scan_a: PointCloud, scan_b: PointCloud, init: RigidTransform,
                   params: AlignParams) -> IcpResult:
    """Coarse-to-fine ICP of scan ``b`` into the frame of scan ``a``."""
    leaf = params.icp.leaf
    src = voxel_downsample(scan_b, leaf) if leaf > 0 else scan_b
    tgt = voxel_downsample(scan_a, leaf) if leaf > 0 else scan_a
    tree = cKDTree(tgt.points)
    T = init
    res = None
    for corr in params.corr_schedule:
        p = replace(params.icp, corr_dist=corr, leaf=0.0)
        res = icp_register(src, tgt, T, p, target_tree=tree)
        T = res.transform
    if params.fine_corr > 0:
        fsrc = voxel_downsample(scan_b, params.fine_leaf)
        ftgt = voxel_downsample(scan_a, params.fine_leaf)
        p = replace(params.icp, corr_dist=params.fine_corr, leaf=0.0, metric="plane")
        res = icp_register(fsrc, ftgt, T, p)
    return res


def align_missions(
    missions: Sequence[MissionTrajectory],
    params: Optional[AlignParams] = None,
    seeds: Optional[Dict[str, RigidTransform]] = None,
) -> Tuple[MissionGraph, List[PointCloud]]:
    """Register all missions into the frame of the first one.

    Returns the optimised graph and, per mission, its scans merged in the
    common frame.
    """
    params = params or AlignParams()
    if not missions:
        raise AlignmentError("no missions to align")
    seeds = seeds or {}
    trajs = []
    for traj in missions:
        # copies, so the optimiser never rewrites the caller's poses
        G = seeds.get(traj.mission_id)
        poses = [G @ p for p in traj.poses] if G is not None else list(traj.poses)
        trajs.append(replace(traj, poses=poses))

    factors: List[Factor] = []
    for m, traj in enumerate(trajs):
        factors += odometry_factors(traj, m, params.sigma_odom)
    loop_info = information(*params.sigma_loop)
    for ma in range(len(trajs)):
        for mb in range(ma + 1, len(trajs)):
            A, B = trajs[ma], trajs[mb]
            accepted = 0
            for i, j in propose_loop_closures(A, B, params.radius):
                init = A.poses[i].inverse() @ B.poses[j]
                try:
                    res = refine_closure(A.scans[i], B.scans[j], init, params)
                except IcpDivergence:
                    continue
                if res.inlier_fraction >= params.min_inlier_fraction and res.fitness <= params.max_fitness:
                    factors.append(Factor("loop_closure", (ma, i), (mb, j), res.transform, loop_info))
                    accepted += 1
            log.info("missions %s-%s: %d loop closures accepted", A.mission_id, B.mission_id, accepted)

    graph = MissionGraph(trajs, factors)
    try:
        graph = optimize_pose_graph(graph)
    except PoseGraphError as exc:
        raise AlignmentError(f"alignment failed: {exc}") from exc
    return graph, [t.merged_cloud() for t in graph.trajectories]
