"""Actuation loads: cavity pressures, point forces and fiber reinforcement.

Every actuator contributes one column to H^T, mapping its scalar effort to
nodal forces. Efforts are stacked pressures-first:

    lambda = (p_1 .. p_6, f_1 .. f_k)   [Pa and N]

Pressure rows follow the deformed cavity geometry (follower forces) and are
rebuilt from the current positions every step. Force directions live in a
segment's local frame and get re-expressed in world coordinates using that
segment's current orientation.

Fiber loops are inextensible-ish reinforcement rings realised as stiff
linear springs between embedded points, contributing exact forces and an
exact (material + geometric) stiffness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import BarycentricEmbedding, SurfaceMesh, embed_points


class ActuationError(Exception):
    pass


DEFAULT_PRESSURE_MAX = 65e3   # Pa
DEFAULT_FORCE_BOUND = 5.0     # N, symmetric box
FIBER_STIFFNESS = 1e4         # N/m per spring segment


def pressure_row(surface, nodes):
    """H row of a unit cavity pressure at the given node positions.

    Each triangle pushes its three vertices along the outward (into the
    material) area normal, one third each. Returns a flat (3n,) vector.
    """
    an = surface.area_normals(nodes)
    tri_nodes = surface.node_indices[surface.triangles]  # global ids, (t, 3)
    row = np.zeros(nodes.size)
    contrib = np.repeat(an / 3.0, 3, axis=0)
    idx = (3 * tri_nodes.reshape(-1, 1) + np.arange(3)).reshape(-1, 3)
    for k in range(3):
        row += np.bincount(idx[:, k], weights=contrib[:, k], minlength=nodes.size)
    return row


def _cross_matrices(e):
    """(..., 3) vectors -> (..., 3, 3) cross-product matrices [e]x."""
    z = np.zeros(e.shape[:-1])
    return np.stack(
        [
            np.stack([z, -e[..., 2], e[..., 1]], axis=-1),
            np.stack([e[..., 2], z, -e[..., 0]], axis=-1),
            np.stack([-e[..., 1], e[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def pressure_stiffness_pattern(surface):
    """Full-DOF (rows, cols) of the pressure follower-load Jacobian.

    The force a triangle puts on each of its vertices follows the deformed
    area normal, so it has a nonzero derivative against all nine vertex
    coordinates: a 3x3 block for every (loaded vertex, moved vertex) pair,
    81 entries per triangle, aligned with pressure_stiffness_values.
    """
    tri_nodes = surface.node_indices[surface.triangles]      # (t, 3) global
    dof = 3 * tri_nodes[:, :, None] + np.arange(3)           # (t, 3, 3)
    t = len(tri_nodes)
    rows = np.broadcast_to(dof[:, :, None, :, None], (t, 3, 3, 3, 3)).ravel()
    cols = np.broadcast_to(dof[:, None, :, None, :], (t, 3, 3, 3, 3)).ravel()
    return rows, cols


def pressure_stiffness_values(surface, nodes, scale=1.0):
    """Values for pressure_stiffness_pattern at wall pressure `scale`.

    With area normal n = (b - a) x (c - a) / 2 the derivative against a
    vertex is half the cross-matrix of its opposite edge, identical for all
    three loaded vertices; the tangent system wants minus that Jacobian.
    """
    x = nodes[surface.node_indices[surface.triangles]]       # (t, 3, 3)
    edges = np.stack(
        [x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1
    )
    blocks = _cross_matrices(edges) * (-scale / 6.0)         # (t, 3j, 3, 3)
    t = len(x)
    return np.broadcast_to(blocks[:, None], (t, 3, 3, 3, 3)).ravel()


def force_row(embedding, mesh, world_direction):
    """H row of a unit force along world_direction at an embedded point."""
    if len(embedding) != 1:
        raise ActuationError("force actuators attach to exactly one point")
    d = np.asarray(world_direction, dtype=np.float64)
    tet = mesh.tets[embedding.tet_indices[0]]
    w = embedding.weights[0]
    row = np.zeros(3 * mesh.num_nodes)
    for j in range(4):
        row[3 * tet[j] : 3 * tet[j] + 3] = w[j] * d
    return row


@dataclass
class PressureActuator:
    name: str
    surface: SurfaceMesh
    lo: float = 0.0
    hi: float = DEFAULT_PRESSURE_MAX

    def __post_init__(self):
        if not self.surface.closed:
            raise ActuationError(f"{self.name}: cavity surface must be closed")
        if not (self.lo < self.hi):
            raise ActuationError(f"{self.name}: empty pressure range")
        self.stiffness_rows, self.stiffness_cols = pressure_stiffness_pattern(
            self.surface
        )

    def stiffness_values(self, nodes, scale=1.0):
        """Follower-load Jacobian values at the given wall pressure."""
        return pressure_stiffness_values(self.surface, nodes, scale)


@dataclass
class ForceActuator:
    """Point force along a local axis of one of the rigid sections."""

    name: str
    embedding: BarycentricEmbedding
    local_direction: np.ndarray
    frame: str                      # effector name whose orientation applies
    lo: float = -DEFAULT_FORCE_BOUND
    hi: float = DEFAULT_FORCE_BOUND

    def __post_init__(self):
        d = np.asarray(self.local_direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0:
            raise ActuationError(f"{self.name}: zero direction")
        self.local_direction = d / n
        if not (self.lo < self.hi):
            raise ActuationError(f"{self.name}: empty force range")


class ActuationSet:
    """Stacked actuators with a common effort vector.

    assemble_h needs the current positions and a mapping from frame name to
    current rotation matrix (for force directions).
    """

    def __init__(self, pressures, forces=()):
        self.pressures = list(pressures)
        self.forces = list(forces)
        names = [a.name for a in self.pressures + self.forces]
        if len(set(names)) != len(names):
            raise ActuationError("duplicate actuator names")

    @property
    def names(self):
        return [a.name for a in self.pressures + self.forces]

    @property
    def num_efforts(self):
        return len(self.pressures) + len(self.forces)

    @property
    def num_pressures(self):
        return len(self.pressures)

    def bounds(self):
        lo = np.array([a.lo for a in self.pressures + self.forces])
        hi = np.array([a.hi for a in self.pressures + self.forces])
        return lo, hi

    def assemble_h(self, mesh, q, frame_rotations):
        """Constraint matrix H, one row per effort, shape (m, 3n)."""
        rows = [pressure_row(a.surface, q) for a in self.pressures]
        for a in self.forces:
            try:
                r = frame_rotations[a.frame]
            except KeyError:
                raise ActuationError(f"{a.name}: no orientation for frame {a.frame!r}")
            rows.append(force_row(a.embedding, mesh, r @ a.local_direction))
        return np.asarray(rows)


class FiberSet:
    """Reinforcement loops as stiff springs between embedded points.

    Spring forces are the exact gradient of sum over segments of
    0.5 * k * (len - rest)^2; the stiffness triplets are the exact Hessian.
    The triplet sparsity structure is fixed, so callers can register it once
    as a fem.ExtraPattern and pass only values per step.
    """

    def __init__(self, mesh, points, loops, stiffness=FIBER_STIFFNESS, snap_distance=1e-6):
        self.mesh = mesh
        self.stiffness = float(stiffness)
        if self.stiffness < 0:
            raise ActuationError("fiber stiffness must be non-negative")
        self.embedding = embed_points(mesh, points, snap_distance=snap_distance)
        pairs = []
        for loop in loops:
            loop = np.asarray(loop)
            if len(loop) < 3:
                raise ActuationError("fiber loops need at least 3 points")
            for i in range(len(loop)):
                pairs.append((loop[i], loop[(i + 1) % len(loop)]))
        self.pairs = np.asarray(pairs, dtype=np.int64)

        rest = self.embedding.positions(mesh)
        d = rest[self.pairs[:, 0]] - rest[self.pairs[:, 1]]
        self.rest_lengths = np.linalg.norm(d, axis=1)
        if (self.rest_lengths <= 0).any():
            raise ActuationError("degenerate fiber segment (coincident points)")

        # per spring: 8 nodes (4 per endpoint tet) with signed weights u such
        # that d = sum u_n x_n
        ta = mesh.tets[self.embedding.tet_indices[self.pairs[:, 0]]]
        tb = mesh.tets[self.embedding.tet_indices[self.pairs[:, 1]]]
        self.spring_nodes = np.concatenate([ta, tb], axis=1)  # (s, 8)
        wa = self.embedding.weights[self.pairs[:, 0]]
        wb = self.embedding.weights[self.pairs[:, 1]]
        self.spring_weights = np.concatenate([wa, -wb], axis=1)  # (s, 8)

        dofs = (3 * self.spring_nodes[:, :, None] + np.arange(3)).reshape(-1, 24)
        self.stiffness_rows = np.repeat(dofs, 24, axis=1).ravel()
        self.stiffness_cols = np.tile(dofs, (1, 24)).ravel()

    @property
    def num_springs(self):
        return len(self.pairs)

    def _geometry(self, q):
        p = self.embedding.positions(self.mesh, q)
        d = p[self.pairs[:, 0]] - p[self.pairs[:, 1]]
        length = np.linalg.norm(d, axis=1)
        unit = d / np.maximum(length, 1e-300)[:, None]
        return length, unit

    def lengths(self, q):
        return self._geometry(q)[0]

    def forces(self, q):
        """Nodal spring forces, shape (n, 3)."""
        length, unit = self._geometry(q)
        tension = self.stiffness * (length - self.rest_lengths)
        f_point = -tension[:, None] * unit  # force on the first endpoint
        contrib = self.spring_weights[:, :, None] * f_point[:, None, :]  # (s, 8, 3)
        dofs = (3 * self.spring_nodes[:, :, None] + np.arange(3)).ravel()
        flat = np.bincount(dofs, weights=contrib.ravel(), minlength=3 * self.mesh.num_nodes)
        return flat.reshape(-1, 3)

    def energy(self, q):
        length, _ = self._geometry(q)
        return float(0.5 * self.stiffness * np.sum((length - self.rest_lengths) ** 2))

    def stiffness_values(self, q):
        """Hessian triplet values aligned with stiffness_rows/cols."""
        length, unit = self._geometry(q)
        eye = np.eye(3)
        uut = unit[:, :, None] * unit[:, None, :]
        slack = 1.0 - self.rest_lengths / np.maximum(length, 1e-300)
        b = self.stiffness * (uut + slack[:, None, None] * (eye - uut))  # (s, 3, 3)
        ww = self.spring_weights[:, :, None] * self.spring_weights[:, None, :]  # (s, 8, 8)
        blocks = ww[:, :, :, None, None] * b[:, None, None, :, :]  # (s, 8, 8, 3, 3)
        return np.transpose(blocks, (0, 1, 3, 2, 4)).ravel()


class TetherSpring:
    """Unilateral stiff spring from an embedded point to a world anchor.

    Pulls only when stretched past its rest length (a cord on a force
    gauge). Contributes forces and, when taut, exact stiffness.
    """

    def __init__(self, mesh, embedding, anchor, stiffness, rest_length=None):
        if len(embedding) != 1:
            raise ActuationError("tether attaches to exactly one point")
        self.mesh = mesh
        self.embedding = embedding
        self.anchor = np.asarray(anchor, dtype=np.float64)
        self.stiffness = float(stiffness)
        if rest_length is None:
            p = embedding.positions(mesh)[0]
            rest_length = float(np.linalg.norm(p - self.anchor))
        self.rest_length = rest_length
        tet = mesh.tets[embedding.tet_indices[0]]
        dofs = (3 * tet[:, None] + np.arange(3)).reshape(-1)
        self.stiffness_rows = np.repeat(dofs, 12)
        self.stiffness_cols = np.tile(dofs, 12)

    def _geometry(self, q):
        p = self.embedding.positions(self.mesh, q)[0]
        d = p - self.anchor
        length = float(np.linalg.norm(d))
        unit = d / max(length, 1e-300)
        return length, unit

    def tension(self, q):
        """Cord tension in N, zero when slack."""
        length, _ = self._geometry(q)
        return self.stiffness * max(0.0, length - self.rest_length)

    def forces(self, q):
        length, unit = self._geometry(q)
        t = self.stiffness * max(0.0, length - self.rest_length)
        f_point = -t * unit
        w = self.embedding.weights[0]
        tet = self.mesh.tets[self.embedding.tet_indices[0]]
        out = np.zeros((self.mesh.num_nodes, 3))
        out[tet] = w[:, None] * f_point[None, :]
        return out

    def stiffness_values(self, q):
        length, unit = self._geometry(q)
        if length <= self.rest_length:
            return np.zeros(144)
        uut = np.outer(unit, unit)
        slack = 1.0 - self.rest_length / length
        b = self.stiffness * (uut + slack * (np.eye(3) - uut))
        w = self.embedding.weights[0]
        ww = np.outer(w, w)
        blocks = ww[:, :, None, None] * b[None, None, :, :]
        return np.transpose(blocks, (0, 2, 1, 3)).ravel()
