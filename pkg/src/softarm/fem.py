"""Corotational tetrahedral FEM with quasi-static stepping.

Per element the deformation gradient is polar-decomposed, F = R S, and the
material is linear Hooke on the corotated strain:

    psi(F) = mu * |F - R|_F^2 + lambda/2 * (tr(R^T F) - 3)^2

Internal forces are the exact negative gradient of this energy; the tangent
stiffness is its exact Hessian including the rotation derivative, so the
stiffness matches finite differences of the forces. K here is the energy
Hessian: positive definite after constraint elimination, and a step solves
K dq = residual. Inverted elements (det F <= 0) reuse their last valid
rotation and are flagged on the state.

Fixed nodes are eliminated by row/column removal before factorization. The
sparsity pattern is constant, so assembly scatters straight into cached CSC
storage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class FemError(Exception):
    pass


class NonConvergenceError(FemError):
    """Static stepping failed to reduce the residual."""


@dataclass
class Material:
    young_modulus: float
    poisson_ratio: float
    density: float = 1070.0

    def __post_init__(self):
        if self.young_modulus <= 0:
            raise FemError("young_modulus must be positive")
        if not (0.0 <= self.poisson_ratio < 0.5):
            raise FemError("poisson_ratio must lie in [0, 0.5)")
        if self.density < 0:
            raise FemError("density must be non-negative")

    @property
    def lame(self):
        e, nu = self.young_modulus, self.poisson_ratio
        mu = e / (2.0 * (1.0 + nu))
        lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        return mu, lam


# Levi-Civita tensor, used for the rotation derivative
_E3 = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _E3[_i, _j, _k] = 1.0
for _i, _j, _k in ((0, 2, 1), (2, 1, 0), (1, 0, 2)):
    _E3[_i, _j, _k] = -1.0


class ElementCache:
    """Precomputed per-element quantities and assembly index arrays."""

    def __init__(self, mesh, materials, gravity=(0.0, 0.0, -9.81)):
        self.mesh = mesh
        self.materials = dict(materials)
        self.gravity = np.asarray(gravity, dtype=np.float64)
        for tag in np.unique(mesh.material_tags):
            if int(tag) not in self.materials:
                raise FemError(f"no material for tag {tag}")
        x = mesh.nodes[mesh.tets]
        dm = np.transpose(x[:, 1:] - x[:, :1], (0, 2, 1))  # columns are edges
        self.volume = np.linalg.det(dm) / 6.0
        if (self.volume <= 0).any():
            raise FemError("non-positive rest volume")
        self.bm_inv = np.linalg.inv(dm)

        m = mesh.num_tets
        self.mu = np.empty(m)
        self.lam = np.empty(m)
        self.density = np.empty(m)
        for tag, mat in self.materials.items():
            sel = mesh.material_tags == tag
            mu, lam = mat.lame
            self.mu[sel] = mu
            self.lam[sel] = lam
            self.density[sel] = mat.density

        # vec(dF) = Be @ dx with row-major vec and element dof order
        # (node0 xyz, node1 xyz, node2 xyz, node3 xyz)
        be = np.zeros((m, 9, 12))
        for a in range(3):
            for b in range(3):
                row = 3 * a + b
                for j in range(3):
                    be[:, row, 3 * (j + 1) + a] += self.bm_inv[:, j, b]
                    be[:, row, 3 * 0 + a] -= self.bm_inv[:, j, b]
        self.be = be
        self.bet = np.ascontiguousarray(np.transpose(be, (0, 2, 1)))
        self.btb = self.bet @ be  # constant part of the Hessian sandwich

        dofs = (3 * mesh.tets[:, :, None] + np.arange(3)[None, None, :]).reshape(m, 12)
        self.elem_dofs = dofs
        rows = np.repeat(dofs, 12, axis=1).ravel()
        cols = np.tile(dofs, (1, 12)).ravel()

        n_dofs = 3 * mesh.num_nodes
        free_mask = np.ones(n_dofs, dtype=bool)
        if mesh.fixed_nodes.size:
            free_mask[(3 * mesh.fixed_nodes[:, None] + np.arange(3)).ravel()] = False
        self.free_mask = free_mask
        self.free_dofs = np.flatnonzero(free_mask)
        self.free_index = np.full(n_dofs, -1, dtype=np.int64)
        self.free_index[self.free_dofs] = np.arange(len(self.free_dofs))

        keep = free_mask[rows] & free_mask[cols]
        self.assembly_keep = keep
        self.assembly_rows = self.free_index[rows[keep]]
        self.assembly_cols = self.free_index[cols[keep]]
        self._plans = {}  # pattern token -> CSC scatter plan

        # lumped gravity load, constant
        grav = np.zeros((mesh.num_nodes, 3))
        w = (self.density * self.volume / 4.0)[:, None] * self.gravity[None, :]
        for j in range(4):
            np.add.at(grav, mesh.tets[:, j], w)
        self.gravity_forces = grav

    @property
    def num_free(self):
        return len(self.free_dofs)

    def _csc_plan(self, pattern):
        """Scatter plan mapping (elastic values + pattern values) straight
        into CSC storage. The plan is built once per extra-triplet pattern;
        values change every step, the structure never does."""
        token = pattern.token if pattern is not None else None
        plan = self._plans.get(token)
        if plan is not None:
            return plan
        rows = self.assembly_rows
        cols = self.assembly_cols
        if pattern is not None:
            rows = np.concatenate([rows, pattern.free_rows])
            cols = np.concatenate([cols, pattern.free_cols])
        order = np.lexsort((rows, cols))
        rs, cs = rows[order], cols[order]
        new_group = np.ones(len(rs), dtype=bool)
        new_group[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
        starts = np.flatnonzero(new_group)
        indices = rs[starts].astype(np.int32)
        counts = np.bincount(cs[starts], minlength=self.num_free)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        plan = (order, starts, indices, indptr)
        self._plans[token] = plan
        return plan


def precompute_elements(mesh, materials, gravity=(0.0, 0.0, -9.81)):
    return ElementCache(mesh, materials, gravity)


class FemState:
    """Current node positions plus the per-element rotation cache."""

    def __init__(self, cache):
        self.cache = cache
        self.q = cache.mesh.nodes.copy()
        m = cache.mesh.num_tets
        self.rotations = np.tile(np.eye(3), (m, 1, 1))
        self.inverted = np.zeros(m, dtype=bool)
        self.version = 0

    def set_positions(self, q):
        q = np.asarray(q, dtype=np.float64)
        if q.shape != self.q.shape:
            raise FemError(f"positions must have shape {self.q.shape}")
        self.q = q.copy()
        self.version += 1

    def commit(self, kin):
        """Adopt a kinematics evaluation: positions and rotation cache."""
        self.q = kin.q
        self.rotations = kin.r
        self.inverted = kin.inverted
        self.version += 1

    def reset(self):
        self.q = self.cache.mesh.nodes.copy()
        self.rotations = np.tile(np.eye(3), (self.cache.mesh.num_tets, 1, 1))
        self.inverted[:] = False
        self.version += 1


@dataclass
class Kinematics:
    """Deformation gradients and polar rotations evaluated at one q."""

    q: np.ndarray
    f: np.ndarray
    r: np.ndarray
    inverted: np.ndarray


def _det3(a):
    return (
        a[:, 0, 0] * (a[:, 1, 1] * a[:, 2, 2] - a[:, 1, 2] * a[:, 2, 1])
        - a[:, 0, 1] * (a[:, 1, 0] * a[:, 2, 2] - a[:, 1, 2] * a[:, 2, 0])
        + a[:, 0, 2] * (a[:, 1, 0] * a[:, 2, 1] - a[:, 1, 1] * a[:, 2, 0])
    )


def _cofactor3(a):
    c = np.empty_like(a)
    c[:, 0, 0] = a[:, 1, 1] * a[:, 2, 2] - a[:, 1, 2] * a[:, 2, 1]
    c[:, 0, 1] = a[:, 1, 2] * a[:, 2, 0] - a[:, 1, 0] * a[:, 2, 2]
    c[:, 0, 2] = a[:, 1, 0] * a[:, 2, 1] - a[:, 1, 1] * a[:, 2, 0]
    c[:, 1, 0] = a[:, 0, 2] * a[:, 2, 1] - a[:, 0, 1] * a[:, 2, 2]
    c[:, 1, 1] = a[:, 0, 0] * a[:, 2, 2] - a[:, 0, 2] * a[:, 2, 0]
    c[:, 1, 2] = a[:, 0, 1] * a[:, 2, 0] - a[:, 0, 0] * a[:, 2, 1]
    c[:, 2, 0] = a[:, 0, 1] * a[:, 1, 2] - a[:, 0, 2] * a[:, 1, 1]
    c[:, 2, 1] = a[:, 0, 2] * a[:, 1, 0] - a[:, 0, 0] * a[:, 1, 2]
    c[:, 2, 2] = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
    return c


def _polar_svd(f):
    u, _, vt = np.linalg.svd(f)
    r = u @ vt
    neg = _det3(r) < 0
    if neg.any():
        u[neg, :, 2] *= -1.0
        r[neg] = u[neg] @ vt[neg]
    return r


def _polar_rotations(f, warm, det):
    """Batched 3x3 polar factors, warm-started on the previous rotations.

    Newton's iteration X <- (X + X^-T)/2 on M = warm^T F converges
    quadratically from the near-orthogonal warm start; the polar factor is
    unique for det > 0, so this matches the SVD route to roundoff.
    Elements that fail to converge (wild trial states) fall back to SVD.
    """
    x = np.matmul(np.transpose(warm, (0, 2, 1)), f)
    ok = det > 1e-14
    x[~ok] = np.eye(3)
    for _ in range(12):
        d = _det3(x)
        ok &= d > 1e-14
        d[~ok] = 1.0
        step = 0.5 * (_cofactor3(x) / d[:, None, None] - x)
        x += step
        if np.abs(step[ok]).max(initial=0.0) < 1e-13:
            break
    r = np.matmul(warm, x)
    eye = np.eye(3)
    orth_err = np.abs(np.matmul(np.transpose(r, (0, 2, 1)), r) - eye).max(axis=(1, 2))
    bad = ok & (orth_err > 1e-10)
    if bad.any():
        r[bad] = _polar_svd(f[bad])
    return r


def kinematics(cache, q, last_rotations):
    x = q[cache.mesh.tets]
    ds = np.transpose(x[:, 1:] - x[:, :1], (0, 2, 1))
    f = ds @ cache.bm_inv
    det = _det3(f)
    inverted = det <= 1e-14
    r = _polar_rotations(f, last_rotations, det)
    if inverted.any():
        r[inverted] = last_rotations[inverted]
    return Kinematics(q=np.asarray(q, dtype=np.float64), f=f, r=r, inverted=inverted)


def elastic_forces(cache, kin):
    """Elastic nodal forces, the negative energy gradient, shape (n, 3)."""
    tr_s = np.einsum("eij,eij->e", kin.r, kin.f)
    mu = cache.mu[:, None, None]
    lam = cache.lam[:, None, None]
    p = 2.0 * mu * (kin.f - kin.r) + lam * (tr_s - 3.0)[:, None, None] * kin.r
    # column j of V * P * Bm^T is the energy gradient wrt node j+1
    h = cache.volume[:, None, None] * (p @ np.transpose(cache.bm_inv, (0, 2, 1)))
    grad = np.empty((cache.mesh.num_tets, 4, 3))
    grad[:, 1:] = np.transpose(h, (0, 2, 1))
    grad[:, 0] = -grad[:, 1:].sum(axis=1)
    flat = np.bincount(
        cache.elem_dofs.ravel(), weights=grad.ravel(), minlength=3 * cache.mesh.num_nodes
    )
    return -flat.reshape(-1, 3)


def internal_forces(cache, state, q=None, commit=True):
    """Elastic forces at q (default: the state's positions).

    With commit=True the state's rotation cache and inversion flags are
    updated from this evaluation.
    """
    kin = kinematics(cache, state.q if q is None else q, state.rotations)
    if commit:
        state.commit(kin)
    return elastic_forces(cache, kin)


def elastic_energy(cache, state, q=None):
    """Total corotated elastic energy at q (rotations not committed)."""
    kin = kinematics(cache, state.q if q is None else q, state.rotations)
    dev = kin.f - kin.r
    tr_s = np.einsum("eij,eij->e", kin.r, kin.f)
    psi = cache.mu * np.einsum("eij,eij->e", dev, dev) + 0.5 * cache.lam * (tr_s - 3.0) ** 2
    return float(np.sum(cache.volume * psi))


def element_tangents(cache, kin):
    """Exact per-element 12x12 Hessian blocks of the elastic energy.

    The Hessian in F splits into 2*mu*I + lam*vec(R)vec(R)^T plus the
    rotation derivative, which factorizes as L G^-1 L^T with a 9x3 L, so the
    12x12 sandwich costs three small matmuls per element.
    """
    m = cache.mesh.num_tets
    s = np.transpose(kin.r, (0, 2, 1)) @ kin.f
    s = 0.5 * (s + np.transpose(s, (0, 2, 1)))
    tr_s = np.trace(s, axis1=1, axis2=2)
    g = tr_s[:, None, None] * np.eye(3)[None] - s
    g_inv = np.linalg.inv(g)

    ke = (2.0 * cache.mu)[:, None, None] * cache.btb

    vec_r = kin.r.reshape(m, 9)
    u = (cache.bet @ vec_r[:, :, None])[:, :, 0]  # Be^T vec(R), (m, 12)
    ke += cache.lam[:, None, None] * (u[:, :, None] * u[:, None, :])

    lam9 = np.einsum("epi,iqk->epqk", kin.r, _E3).reshape(m, 9, 3)
    w = cache.bet @ lam9  # (m, 12, 3)
    coef = cache.lam * (tr_s - 3.0) - 2.0 * cache.mu
    # inverted elements hold their rotation fixed: no rotation derivative
    coef = np.where(kin.inverted, 0.0, coef)
    ke += (w * coef[:, None, None]) @ (g_inv @ np.transpose(w, (0, 2, 1)))

    ke *= cache.volume[:, None, None]
    return 0.5 * (ke + np.transpose(ke, (0, 2, 1)))


class TangentSystem:
    """Factorized tangent stiffness on the free DOFs.

    Guards against stale use: solving after the state moved on raises.
    """

    def __init__(self, cache, state, k_free):
        self.cache = cache
        self._state = state
        self._version = state.version
        self.k = k_free
        self._lu = None

    def _check_fresh(self):
        if self._state.version != self._version:
            raise FemError("tangent factorization is stale: positions changed")

    def _factor(self):
        # factorization is lazy so callers that only inspect the matrix
        # never pay for (or trip over) the decomposition
        if self._lu is None:
            try:
                # K is symmetric positive definite after elimination: static
                # pivot order, no partial pivoting
                self._lu = splu(
                    self.k,
                    permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
            except RuntimeError as exc:
                raise FemError(f"tangent factorization failed: {exc}") from exc
        return self._lu

    def solve(self, rhs):
        """Solve K dq = rhs for full-dof rhs (n, 3); fixed DOFs get zero."""
        self._check_fresh()
        lu = self._factor()
        cache = self.cache
        flat = np.asarray(rhs, dtype=np.float64).reshape(-1)
        out = np.zeros_like(flat)
        out[cache.free_dofs] = lu.solve(flat[cache.free_dofs])
        return out.reshape(-1, 3)

    def solve_columns(self, cols):
        """Solve K X = cols for a (3n, k) block of full-dof right hand sides."""
        self._check_fresh()
        lu = self._factor()
        cache = self.cache
        cols = np.asarray(cols, dtype=np.float64)
        squeeze = cols.ndim == 1
        if squeeze:
            cols = cols[:, None]
        x = np.zeros_like(cols)
        x[cache.free_dofs] = lu.solve(cols[cache.free_dofs])
        return x[:, 0] if squeeze else x


class ExtraPattern:
    """Fixed sparsity structure for spring-like stiffness contributions.

    Callers build this once from full-DOF (rows, cols) and then supply only
    values each step, so assembly can reuse one CSC scatter plan.
    """

    _serial = 0

    def __init__(self, cache, rows, cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        self.keep = cache.free_mask[rows] & cache.free_mask[cols]
        self.free_rows = cache.free_index[rows[self.keep]]
        self.free_cols = cache.free_index[cols[self.keep]]
        ExtraPattern._serial += 1
        self.token = ExtraPattern._serial


def assemble_tangent(cache, state, kin=None, extra_triplets=None, extra_pattern=None):
    """Build and factorize the tangent stiffness at the state's positions.

    Spring contributions (fibers, tethers) enter either as ad-hoc
    extra_triplets (rows, cols, vals) in full DOF indexing, or as
    (extra_pattern, vals) when the caller registered an ExtraPattern; fixed
    DOFs are filtered out in both paths.
    """
    if kin is None:
        kin = kinematics(cache, state.q, state.rotations)
    ke = element_tangents(cache, kin)
    vals = ke.ravel()[cache.assembly_keep]
    nf = cache.num_free
    if extra_triplets is not None:
        er, ec, ev = extra_triplets
        keep = cache.free_mask[er] & cache.free_mask[ec]
        rows = np.concatenate([cache.assembly_rows, cache.free_index[er[keep]]])
        cols = np.concatenate([cache.assembly_cols, cache.free_index[ec[keep]]])
        vals = np.concatenate([vals, ev[keep]])
        k = sp.coo_matrix((vals, (rows, cols)), shape=(nf, nf)).tocsc()
    else:
        pattern = None
        if extra_pattern is not None:
            pattern, ev = extra_pattern
            vals = np.concatenate([vals, ev[pattern.keep]])
        order, starts, indices, indptr = cache._csc_plan(pattern)
        data = np.add.reduceat(vals[order], starts)
        k = sp.csc_matrix((data, indices, indptr), shape=(nf, nf))
    return TangentSystem(cache, state, k)


@dataclass
class StepReport:
    residual_before: float
    residual_after: float
    halvings: int
    scale: float


def residual_norm(cache, r):
    return float(np.linalg.norm(np.asarray(r).reshape(-1)[cache.free_dofs]))


def static_step(
    cache,
    state,
    residual_fn,
    extra_stiffness_fn=None,
    max_halvings=8,
    return_tangent=False,
):
    """One quasi-static step: solve K dq = residual with a step-halving line
    search. residual_fn(q, kin) must return total nodal forces (n, 3)
    including the elastic part for the supplied kinematics.

    A trial step is accepted when either the residual norm decreases or the
    simplified Newton correction K0^-1 r(q_try) contracts against dq (the
    affine-invariant test). The raw residual norm alone is a poor merit
    function here: under a load much smaller than the structure's stiffness
    the corotational second-order forces dwarf the load imbalance along the
    whole Newton path even though the correction itself is shrinking fast.
    Raises NonConvergenceError when neither test passes at the shortest
    step. With return_tangent the factorized pre-step tangent comes back
    alongside the report, letting a live loop reuse the factorization
    instead of assembling the same matrix twice per tick."""
    kin0 = kinematics(cache, state.q, state.rotations)
    r0 = residual_fn(state.q, kin0)
    n0 = residual_norm(cache, r0)
    extra = extra_stiffness_fn(state.q) if extra_stiffness_fn is not None else None
    if extra is not None and isinstance(extra[0], ExtraPattern):
        tangent = assemble_tangent(cache, state, kin=kin0, extra_pattern=extra)
    else:
        tangent = assemble_tangent(cache, state, kin=kin0, extra_triplets=extra)
    dq = tangent.solve(r0)
    d0 = residual_norm(cache, dq)
    scale = 1.0
    for halvings in range(max_halvings + 1):
        q_try = state.q + scale * dq
        kin_try = kinematics(cache, q_try, state.rotations)
        r_try = residual_fn(q_try, kin_try)
        n1 = residual_norm(cache, r_try)
        accept = n1 < n0 or n0 == 0.0
        if not accept:
            d1 = residual_norm(cache, tangent.solve(r_try))
            accept = d1 <= (1.0 - 0.5 * scale) * d0
        if accept:
            state.commit(kin_try)
            report = StepReport(n0, n1, halvings, scale)
            if return_tangent:
                # re-stamp: the caller knowingly gets a one-step-lagged
                # factorization (the commit bumped the state version)
                tangent._version = state.version
                return report, tangent
            return report
        scale *= 0.5
    raise NonConvergenceError(
        f"residual grew from {n0:.3e} after {max_halvings} halvings"
    )


@dataclass
class SettleReport:
    steps: int
    residual: float
    converged: bool


def settle(
    cache,
    state,
    residual_fn,
    extra_stiffness_fn=None,
    load_scale=1.0,
    rel_tol=1e-6,
    abs_floor=1e-9,
    max_steps=60,
):
    """Iterate static steps until the free-DOF residual norm drops below
    max(rel_tol * load_scale, abs_floor). The absolute floor keeps the
    unloaded rest state (residual = accumulated float noise) a fixed point
    instead of demanding an unattainable zero."""
    target = max(rel_tol * load_scale, abs_floor)
    for step in range(max_steps):
        kin = kinematics(cache, state.q, state.rotations)
        last = residual_norm(cache, residual_fn(state.q, kin))
        if last < target:
            return SettleReport(step, last, True)
        static_step(cache, state, residual_fn, extra_stiffness_fn)
    kin = kinematics(cache, state.q, state.rotations)
    last = residual_norm(cache, residual_fn(state.q, kin))
    return SettleReport(max_steps, last, last < target)
