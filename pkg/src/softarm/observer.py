"""Rigid-section orientation observers and pose algebra.

Each effector watches a node set on one of the arm's rigid sections and
reports the rotation that best maps the rest shape onto the current shape
(orthogonal Procrustes, proper rotation branch). The observer also provides
the exact Jacobian of that orientation with respect to node positions, in
the spatial sense: J dq is the rotation vector of R(q + dq) R(q)^-1 for
infinitesimal dq. Orientation residuals between two frames use the log map,
optionally masked to the observable axes (bend sensors see x and y, twist
about z stays unobserved).

Quaternions are (w, x, y, z) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as _Rotation


class ObserverError(Exception):
    pass


# --- small rotation helpers -------------------------------------------------

def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise ObserverError("zero quaternion")
    w, x, y, z = q / n
    return _Rotation.from_quat([x, y, z, w]).as_matrix()

def matrix_to_quat(r):
    x, y, z, w = _Rotation.from_matrix(r).as_quat()
    q = np.array([w, x, y, z])
    # canonical sign: non-negative scalar part, deterministic encoding
    if q[0] < 0 or (q[0] == 0 and (q[1] < 0 or (q[1] == 0 and (q[2] < 0 or (q[2] == 0 and q[3] < 0))))):
        q = -q
    return q

def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )

def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])

def rotvec_to_matrix(v):
    return _Rotation.from_rotvec(np.asarray(v, dtype=np.float64)).as_matrix()

def matrix_to_rotvec(r):
    return _Rotation.from_matrix(r).as_rotvec()


def geodesic_angle(ra, rb):
    """Angle in radians between two rotations."""
    return float(np.linalg.norm(matrix_to_rotvec(ra @ rb.T)))


def delta_rotation(ra, rb, mask=None):
    """Rotation vector of R_a R_b^-1, optionally masked to observable axes.

    mask is an iterable of axis indices to keep (e.g. (0, 1) for bend-only
    sensing); the remaining components are zeroed.
    """
    v = matrix_to_rotvec(np.asarray(ra) @ np.asarray(rb).T)
    if mask is not None:
        keep = np.zeros(3, dtype=bool)
        keep[list(mask)] = True
        v = np.where(keep, v, 0.0)
    return v


# --- pose transforms ---------------------------------------------------------

@dataclass
class PoseTransform:
    """Rigid transform as quaternion (w, x, y, z) plus translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.quat = np.asarray(self.quat, dtype=np.float64)
        n = np.linalg.norm(self.quat)
        if n == 0:
            raise ObserverError("zero quaternion in pose")
        self.quat = self.quat / n
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.translation.shape != (3,):
            raise ObserverError("translation must be a 3-vector")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rotation(cls, r):
        return cls(quat=matrix_to_quat(r))

    @property
    def rotation(self):
        return quat_to_matrix(self.quat)

    def compose(self, other):
        """self applied after other: (self * other) x = self(other(x))."""
        return PoseTransform(
            quat=quat_multiply(self.quat, other.quat),
            translation=self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        rinv = self.rotation.T
        return PoseTransform(
            quat=quat_conjugate(self.quat), translation=-(rinv @ self.translation)
        )

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation


def rectification(nominal_zero, measured_zero):
    """Mounting offset between a sensor's zero pose and the model's.

    Returns delta = nominal_zero^-1 * measured_zero. Applying it with
    apply_rectification(measured, delta) = measured * delta^-1 maps the
    measured zero pose exactly onto the nominal one.
    """
    return nominal_zero.inverse().compose(measured_zero)


def apply_rectification(measured, delta):
    return measured.compose(delta.inverse())


# --- effectors ----------------------------------------------------------------

_DEG = np.pi / 180.0


@dataclass
class OrientationEffector:
    """Orientation observer over a rigid-section node set.

    mask lists the axes of the rotation-vector residual that the matching
    sensor can observe; default is bending only, (0, 1).
    """

    name: str
    node_indices: np.ndarray
    rest_positions: np.ndarray
    mask: tuple = (0, 1)

    def __post_init__(self):
        self.node_indices = np.asarray(self.node_indices, dtype=np.int64)
        self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64)
        if self.rest_positions.shape != (len(self.node_indices), 3):
            raise ObserverError(f"{self.name}: rest positions shape mismatch")
        if len(self.node_indices) < 3:
            raise ObserverError(f"{self.name}: need at least 3 nodes")
        self.mask = tuple(sorted(set(int(m) for m in self.mask)))
        if any(m not in (0, 1, 2) for m in self.mask) or not self.mask:
            raise ObserverError(f"{self.name}: mask must select axes from (0, 1, 2)")
        centroid = self.rest_positions.mean(axis=0)
        self._rest_centered = self.rest_positions - centroid
        # non-degenerate: the set must span a plane at least
        sv = np.linalg.svd(self._rest_centered, compute_uv=False)
        scale = float(sv[0])
        if scale == 0.0 or sv[1] / scale < 1e-9:
            raise ObserverError(f"{self.name}: node set is (near) collinear")

    @classmethod
    def from_mesh(cls, name, mesh, node_indices, mask=(0, 1)):
        node_indices = np.asarray(node_indices, dtype=np.int64)
        return cls(name, node_indices, mesh.nodes[node_indices], mask=mask)

    def positions(self, q):
        return q[self.node_indices]

    def centroid(self, q):
        return q[self.node_indices].mean(axis=0)

    def _correlation(self, q):
        p = self.positions(q)
        p = p - p.mean(axis=0)
        return p.T @ self._rest_centered  # sum of p_j r_j^T

    def orientation(self, q):
        """Best-fit proper rotation mapping rest onto current positions."""
        m = self._correlation(q)
        u, sv, vt = np.linalg.svd(m)
        scale = float(sv[0])
        if scale == 0.0 or sv[1] / scale < 1e-9:
            raise ObserverError(f"{self.name}: degenerate configuration")
        d = np.sign(np.linalg.det(u @ vt))
        return u @ np.diag([1.0, 1.0, d]) @ vt

    def jacobian(self, q):
        """d(orientation)/d(node positions), spatial convention, (3, 3k).

        J dq is the rotation vector of R(q + dq) R(q)^-1 to first order.
        Columns are ordered node-major (node0 xyz, node1 xyz, ...) over
        node_indices. Translations of the set lie exactly in the null space.
        """
        m = self._correlation(q)
        u, sv, vt = np.linalg.svd(m)
        scale = float(sv[0])
        if scale == 0.0 or sv[1] / scale < 1e-9:
            raise ObserverError(f"{self.name}: degenerate configuration")
        d = np.sign(np.linalg.det(u @ vt))
        r = u @ np.diag([1.0, 1.0, d]) @ vt
        s = r.T @ m
        s = 0.5 * (s + s.T)
        g = np.trace(s) * np.eye(3) - s
        try:
            g_inv = np.linalg.inv(g)
        except np.linalg.LinAlgError:
            raise ObserverError(f"{self.name}: orientation derivative singular")
        # dM for node j, component k is e_k r_j^T; the spatial increment is
        # R G^-1 (2 vex(skew(R^T dM)))
        rr = self._rest_centered
        a = np.empty((3, len(rr), 3))
        a[0] = rr[:, 1:2] * r[:, 2:3].T - rr[:, 2:3] * r[:, 1:2].T
        a[1] = rr[:, 2:3] * r[:, 0:1].T - rr[:, 0:1] * r[:, 2:3].T
        a[2] = rr[:, 0:1] * r[:, 1:2].T - rr[:, 1:2] * r[:, 0:1].T
        return (r @ g_inv @ a.reshape(3, -1)).reshape(3, -1)


def orientation_residual(target, current, mask):
    """Masked rotation-vector residual between target and current rotations."""
    return delta_rotation(target, current, mask=mask)
