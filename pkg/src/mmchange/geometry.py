"""Core geometric types shared by every stage of the change-detection pipeline.

Point clouds are stored as ``(N, 3)`` float64 arrays; rigid transforms as a
rotation matrix plus translation.  The SE(3) exponential/logarithm helpers
here are vectorised over a leading batch axis because the pose-graph solver
evaluates many factors at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("transform contains non-finite values")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quat(cls, q_xyzw, t) -> "RigidTransform":
        return cls(Rotation.from_quat(q_xyzw).as_matrix(), t)

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), t)

    @classmethod
    def from_yaw(cls, yaw: float, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, t)

    @classmethod
    def exp(cls, xi) -> "RigidTransform":
        """Map a twist ``(rho, phi)`` to a transform."""
        return cls.from_matrix(se3_exp(np.asarray(xi, dtype=np.float64)[None])[0])

    def log(self) -> np.ndarray:
        return se3_log(self.matrix()[None])[0]

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def as_quat(self) -> np.ndarray:
        """Quaternion in ``(x, y, z, w)`` order with non-negative ``w``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def rotation_angle(self) -> float:
        """Geodesic rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Closest rotation matrix to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def hat(v: np.ndarray) -> np.ndarray:
    """Batched skew-symmetric matrices for ``(..., 3)`` input."""
    v = np.asarray(v)
    z = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([z, -v[..., 2], v[..., 1]], -1),
            np.stack([v[..., 2], z, -v[..., 0]], -1),
            np.stack([-v[..., 1], v[..., 0], z], -1),
        ],
        -2,
    )


def _left_jacobian_coeffs(theta):
    # A = (1 - cos)/θ², B = (θ - sin)/θ³ with series near zero
    small = theta < 1e-5
    th = np.where(small, 1.0, theta)
    A = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(th)) / th**2)
    B = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (th - np.sin(th)) / th**3)
    return A, B


def se3_exp(xi: np.ndarray) -> np.ndarray:
    """``(N, 6)`` twists ``(rho, phi)`` to ``(N, 4, 4)`` matrices."""
    xi = np.atleast_2d(xi)
    rho, phi = xi[:, :3], xi[:, 3:]
    theta = np.linalg.norm(phi, axis=1)
    R = Rotation.from_rotvec(phi).as_matrix()
    A, B = _left_jacobian_coeffs(theta)
    P = hat(phi)
    V = np.eye(3) + A[:, None, None] * P + B[:, None, None] * (P @ P)
    out = np.tile(np.eye(4), (len(xi), 1, 1))
    out[:, :3, :3] = R
    out[:, :3, 3] = np.einsum("nij,nj->ni", V, rho)
    return out


def se3_log(T: np.ndarray) -> np.ndarray:
    """``(N, 4, 4)`` matrices to ``(N, 6)`` twists ``(rho, phi)``."""
    T = np.asarray(T)
    if T.ndim == 2:
        T = T[None]
    phi = Rotation.from_matrix(T[:, :3, :3]).as_rotvec()
    theta = np.linalg.norm(phi, axis=1)
    small = theta < 1e-5
    th = np.where(small, 1.0, theta)
    # V^-1 = I - P/2 + c P², c = 1/θ² - (1 + cos θ) / (2 θ sin θ)
    c = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / th**2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th)),
    )
    P = hat(phi)
    Vinv = np.eye(3) - 0.5 * P + c[:, None, None] * (P @ P)
    rho = np.einsum("nij,nj->ni", Vinv, T[:, :3, 3])
    return np.concatenate([rho, phi], axis=1)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise GeometryError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.min) & (points <= self.max), axis=1)


@dataclass(frozen=True)
class PointCloud:
    """Immutable point set with optional per-point labels and sensor origin."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    origin: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(pts), axis=1))[0])
            raise GeometryError(f"non-finite coordinate at point {bad}")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(pts):
                raise GeometryError(
                    f"{len(lab)} labels for {len(pts)} points"
                )
            if np.any(lab < 0):
                raise GeometryError("labels must be non-negative")
            object.__setattr__(self, "labels", lab)
        if self.origin is not None:
            o = np.asarray(self.origin, dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(o)):
                raise GeometryError("non-finite sensor origin")
            object.__setattr__(self, "origin", o)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, with_labels: bool = False) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, np.int64) if with_labels else None)

    def select(self, mask_or_index) -> "PointCloud":
        labels = None if self.labels is None else self.labels[mask_or_index]
        return PointCloud(self.points[mask_or_index], labels, self.origin)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def concatenate(clouds) -> PointCloud:
    clouds = list(clouds)
    if not clouds:
        return PointCloud.empty()
    pts = np.concatenate([c.points for c in clouds], axis=0)
    if all(c.labels is not None for c in clouds):
        labels = np.concatenate([c.labels for c in clouds])
    else:
        labels = None
    return PointCloud(pts, labels)


def transform_cloud(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    origin = None if cloud.origin is None else T.apply(cloud.origin[None])[0]
    return PointCloud(T.apply(cloud.points), cloud.labels, origin)


def crop_box(cloud: PointCloud, box: Aabb) -> PointCloud:
    return cloud.select(box.contains(cloud.points))


def voxel_keys(points: np.ndarray, leaf: float) -> np.ndarray:
    return np.floor(points / leaf).astype(np.int64)


def _lex_key(ijk: np.ndarray) -> np.ndarray:
    """Scalar keys ordered like the rows of ``ijk`` in lexicographic order."""
    q = ijk - ijk.min(axis=0)
    span = q.max(axis=0) + 1
    if float(span[0]) * float(span[1]) * float(span[2]) >= 2.0 ** 62:
        _, inv = np.unique(ijk, axis=0, return_inverse=True)
        return inv.reshape(-1)
    return (q[:, 0] * span[1] + q[:, 1]) * span[2] + q[:, 2]


def voxel_inverse(points: np.ndarray, leaf: float) -> np.ndarray:
    """Index of each point's voxel among the occupied voxels in key order."""
    _, inverse = np.unique(_lex_key(voxel_keys(points, leaf)), return_inverse=True)
    return inverse.reshape(-1)


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    Output is ordered by voxel key. Labels, when present, take the most
    frequent label of the voxel (ties go to the smallest id).
    """
    if leaf <= 0:
        raise GeometryError(f"leaf size must be positive, got {leaf}")
    if len(cloud) == 0:
        return cloud
    inverse = voxel_inverse(cloud.points, leaf)
    n = int(inverse.max()) + 1
    counts = np.bincount(inverse, minlength=n).astype(np.float64)
    pts = np.stack(
        [np.bincount(inverse, cloud.points[:, d], minlength=n) for d in range(3)],
        axis=1,
    ) / counts[:, None]
    labels = None
    if cloud.labels is not None:
        nl = int(cloud.labels.max()) + 1
        pairs, pair_counts = np.unique(inverse * nl + cloud.labels, return_counts=True)
        vox, lab = pairs // nl, pairs % nl
        # sort by voxel, then count descending, then label ascending
        order = np.lexsort((lab, -pair_counts, vox))
        vox, lab = vox[order], lab[order]
        first = np.ones(len(vox), bool)
        first[1:] = vox[1:] != vox[:-1]
        labels = lab[first]
    return PointCloud(pts, labels, cloud.origin)


def best_fit_transform(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping paired ``source`` rows onto ``target``.

    Centroids are matched first; the rotation comes from the SVD of the
    cross-covariance with the usual reflection fix.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    cs, ct = source.mean(axis=0), target.mean(axis=0)
    H = (source - cs).T @ (target - ct)
    U, _, Vt = np.linalg.svd(H)
    d = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, ct - R @ cs)
