"""Inverse statics: sensitivity assembly and bounded least-squares efforts.

The sensitivity matrix maps effort changes to masked orientation changes
through the factorized tangent: one compliance solve per effort column,
then each effector's orientation Jacobian restricted to its observable
axes. The effort update solves

    min ||W dx - r||^2 + reg ||dx||^2   s.t.  lo <= dx <= hi,  pins exact

with a primal active-set method; problems here have at most a dozen
variables, so the exact method is simplest and is testable against
exhaustive enumeration. The outer loop alternates QP updates with
quasi-static re-settling, damping any update that fails to reduce the
orientation residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import NonConvergenceError


class InverseError(Exception):
    pass


class DivergenceError(InverseError):
    """Residual grew repeatedly despite damping; carries the history."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


def effector_dofs(effector):
    """Flat DOF indices (node-major) covered by an effector's node set."""
    return (3 * effector.node_indices[:, None] + np.arange(3)).reshape(-1)


def assemble_w(scene, tangent, h=None):
    """Sensitivity of masked orientation components to efforts, (k, m).

    Column j is the masked orientation response to a unit change of effort
    j through the current tangent compliance; the factorization is reused
    across columns.
    """
    if h is None:
        h = scene.assemble_h()
    if h.shape[0] == 0:
        return np.zeros((len(scene.masked_axes()), 0))
    x = tangent.solve_columns(h.T)  # (3n, m) displacement response
    q = scene.state.q
    rows = []
    for name in scene.effector_order:
        eff = scene.effectors[name]
        j_local = eff.jacobian(q)                   # (3, 3k)
        block = j_local @ x[effector_dofs(eff), :]  # (3, m)
        rows.append(block[list(eff.mask), :])
    return np.concatenate(rows, axis=0)


# --- box + equality QP --------------------------------------------------------


@dataclass
class QpProblem:
    """min ||w x - r||^2 + reg ||x||^2, box bounds, pinned equalities."""

    w: np.ndarray
    r: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    pins: dict = field(default_factory=dict)
    reg: float = None

    def __post_init__(self):
        self.w = np.atleast_2d(np.asarray(self.w, dtype=np.float64))
        self.r = np.asarray(self.r, dtype=np.float64).reshape(-1)
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(-1)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(-1)
        k, m = self.w.shape
        if self.r.shape != (k,):
            raise InverseError(f"residual must have length {k}")
        if self.lo.shape != (m,) or self.hi.shape != (m,):
            raise InverseError(f"bounds must have length {m}")
        if (self.lo > self.hi).any():
            raise InverseError("empty box: lo > hi")
        self.pins = {int(i): float(v) for i, v in self.pins.items()}
        for i, v in self.pins.items():
            if not (0 <= i < m):
                raise InverseError(f"pin index {i} out of range")
            if not (self.lo[i] - 1e-12 <= v <= self.hi[i] + 1e-12):
                raise InverseError(f"pin {i}={v} outside bounds [{self.lo[i]}, {self.hi[i]}]")
        if self.reg is not None and self.reg < 0:
            raise InverseError("regularization must be non-negative")

    @property
    def num_vars(self):
        return self.w.shape[1]


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    iterations: int
    converged: bool
    active: np.ndarray      # per variable: -1 lower, +1 upper, 0 free, 2 pinned
    kkt: dict
    reg: float


def default_regularization(w, m=None):
    """Tie-breaking Tikhonov weight, scale-following: 1e-8 tr(WtW)/m."""
    m = w.shape[1] if m is None else m
    if m == 0:
        return 0.0
    tr = float(np.einsum("ij,ij->", w, w))
    return 1e-8 * tr / m if tr > 0 else 1.0


def solve_qp(problem, max_iter=200):
    """Primal active-set solve of a QpProblem. Exact for these small boxes."""
    w, r, lo, hi = problem.w, problem.r, problem.lo, problem.hi
    m = problem.num_vars
    reg = problem.reg if problem.reg is not None else default_regularization(w)
    x_full = np.zeros(m)
    pinned = np.zeros(m, dtype=bool)
    for i, v in problem.pins.items():
        x_full[i] = v
        pinned[i] = True
    # degenerate boxes behave like pins
    tight = ~pinned & (lo == hi)
    x_full[tight] = lo[tight]
    pinned |= tight

    free_idx = np.flatnonzero(~pinned)
    nf = len(free_idx)
    if nf == 0 or m == 0:
        resid = w @ x_full - r
        obj = float(resid @ resid + reg * (x_full @ x_full))
        return QpSolution(
            x=x_full,
            objective=obj,
            iterations=0,
            converged=True,
            active=np.where(pinned, 2, 0).astype(np.int8),
            kkt={"stationarity": 0.0, "feasibility": 0.0, "complementarity": 0.0},
            reg=reg,
        )

    wf = w[:, free_idx]
    r_eff = r - w[:, pinned] @ x_full[pinned] if pinned.any() else r
    a = wf.T @ wf + reg * np.eye(nf)
    b = wf.T @ r_eff
    lof, hif = lo[free_idx], hi[free_idx]

    x = np.clip(np.zeros(nf), lof, hif)
    act = np.zeros(nf, dtype=np.int8)
    act[x <= lof] = -1
    act[x >= hif] = 1
    # a zero start strictly inside the box begins fully free
    act[(x > lof) & (x < hif)] = 0

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        free = act == 0
        if free.any():
            sub = a[np.ix_(free, free)]
            rhs = b[free] - a[np.ix_(free, ~free)] @ x[~free]
            try:
                target = np.linalg.solve(sub, rhs)
            except np.linalg.LinAlgError as exc:
                raise InverseError(f"singular reduced system in QP: {exc}") from exc
            step = target - x[free]
            # ratio test against the box
            alpha = 1.0
            block, block_dir = -1, 0
            fidx = np.flatnonzero(free)
            for pos, i in enumerate(fidx):
                if step[pos] > 0 and x[i] + step[pos] > hif[i]:
                    cand = (hif[i] - x[i]) / step[pos]
                    direction = 1
                elif step[pos] < 0 and x[i] + step[pos] < lof[i]:
                    cand = (lof[i] - x[i]) / step[pos]
                    direction = -1
                else:
                    continue
                if cand < alpha:
                    alpha = cand
                    block, block_dir = i, direction
            x[free] = x[free] + alpha * step
            if block >= 0:
                x[block] = hif[block] if block_dir > 0 else lof[block]
                act[block] = block_dir
                continue
        # full step taken (or nothing free): check bound multipliers
        g = 2.0 * (a @ x - b)
        worst, worst_i = 0.0, -1
        for i in range(nf):
            if act[i] == -1 and g[i] < worst:
                worst, worst_i = g[i], i
            elif act[i] == 1 and -g[i] < worst:
                worst, worst_i = -g[i], i
        scale = max(1.0, float(np.abs(g).max()))
        if worst_i >= 0 and -worst > 1e-12 * scale:
            act[worst_i] = 0
            continue
        converged = True
        break

    x_full[free_idx] = x
    resid = w @ x_full - r
    obj = float(resid @ resid + reg * (x_full @ x_full))

    g = 2.0 * (a @ x - b)
    projected = np.where(
        act == 0, g, np.where(act == -1, np.minimum(g, 0.0), np.maximum(g, 0.0))
    )
    active_full = np.where(pinned, 2, 0).astype(np.int8)
    active_full[free_idx] = act
    feas = float(max(np.maximum(lof - x, 0.0).max(initial=0.0),
                     np.maximum(x - hif, 0.0).max(initial=0.0)))
    kkt = {
        "stationarity": float(np.abs(projected).max(initial=0.0)),
        "feasibility": feas,
        "complementarity": 0.0,  # active variables sit exactly on their bound
    }
    return QpSolution(
        x=x_full,
        objective=obj,
        iterations=it,
        converged=converged,
        active=active_full,
        kkt=kkt,
        reg=reg,
    )


# --- outer estimation loop ---------------------------------------------------


@dataclass
class InverseReport:
    efforts: np.ndarray
    history: list           # max masked residual angle (deg) per iteration
    iterations: int
    converged: bool
    stalled: bool
    final_angles: np.ndarray  # per-effector masked residual angle (deg)


def solve_equilibrated_qp(w, r, lo, hi, pins=None, reg=None):
    """Solve the effort QP with unit-normalized columns.

    Efforts mix units (pressures in Pa, forces in N), so raw column norms
    differ by orders of magnitude and a single isotropic regularizer would
    crush the weak-unit block. Scaling each column to unit norm (bounds and
    pins scaled along) makes the trace-based default regularizer a pure
    tie-breaker again. Returns (x, solution) with x in original units; the
    solution object is in scaled units.
    """
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    col_scale = np.linalg.norm(w, axis=0)
    col_scale[col_scale == 0.0] = 1.0
    pins = pins or {}
    problem = QpProblem(
        w=w / col_scale,
        r=r,
        lo=np.asarray(lo, dtype=np.float64) * col_scale,
        hi=np.asarray(hi, dtype=np.float64) * col_scale,
        pins={i: v * col_scale[i] for i, v in pins.items()},
        reg=reg,
    )
    solution = solve_qp(problem)
    return solution.x / col_scale, solution


def _resolve_pins(scene, pins):
    """Map {name-or-index: value} pins to {index: value}."""
    if not pins:
        return {}
    names = scene.effort_names
    out = {}
    for key, value in pins.items():
        if isinstance(key, str):
            try:
                idx = names.index(key)
            except ValueError:
                raise InverseError(f"unknown effort {key!r}") from None
        else:
            idx = int(key)
            if not (0 <= idx < len(names)):
                raise InverseError(f"effort index {idx} out of range")
        out[idx] = float(value)
    return out


def inverse_iterate(
    scene,
    targets,
    pins=None,
    tol_deg=0.1,
    max_iterations=40,
    max_damping=8,
    stall_window=5,
    stall_rel=1e-3,
    max_growths=3,
    qp_reg=None,
):
    """Find efforts whose settled state matches the target orientations.

    targets: {effector name: rotation matrix}. pins: {effort name or index:
    value} held exactly (known pressures, disabled efforts). Iterates
    settle / sensitivity / QP until the worst masked residual angle drops
    below tol_deg, the decrease stalls, or growth persists (DivergenceError).
    """
    pins = _resolve_pins(scene, pins)
    lo, hi = scene.bounds()
    for idx, value in pins.items():
        scene.efforts[idx] = value

    scene.settle()
    angles = np.degrees(scene.residual_angles(targets))
    history = [float(angles.max(initial=0.0))]
    growths = 0
    stalled = False
    improved = False
    converged = history[-1] <= tol_deg
    iterations = 0

    while not converged and iterations < max_iterations:
        if (
            len(history) > stall_window
            and history[-stall_window - 1] - history[-1]
            < stall_rel * max(history[-stall_window - 1], 1e-12)
        ):
            stalled = True
            break
        tangent = scene.tangent()
        w = assemble_w(scene, tangent)
        r = scene.orientation_residual(targets)
        delta, _ = solve_equilibrated_qp(
            w,
            r,
            lo - scene.efforts,
            hi - scene.efforts,
            pins={i: v - scene.efforts[i] for i, v in pins.items()},
            reg=qp_reg,
        )

        lam0 = scene.efforts.copy()
        q0 = scene.state.q.copy()
        rot0 = scene.state.rotations.copy()
        inv0 = scene.state.inverted.copy()
        accepted = False
        scale = 1.0
        fresh = True
        for _ in range(max_damping + 1):
            trial = lam0 + scale * delta
            for i, v in pins.items():
                trial[i] = v
            scene.set_efforts(trial)
            if fresh:
                # successive damped trials warm-start from the previous
                # trial's equilibrium (the settled state is unique, so the
                # starting point only affects speed, not the answer)
                scene.state.set_positions(q0)
                scene.state.rotations = rot0.copy()
                scene.state.inverted = inv0.copy()
            try:
                scene.settle()
                fresh = False
            except NonConvergenceError:
                scale *= 0.5  # an unsettleable trial counts as a growth
                scene.state.set_positions(q0)
                scene.state.rotations = rot0.copy()
                scene.state.inverted = inv0.copy()
                fresh = True
                continue
            angles = np.degrees(scene.residual_angles(targets))
            worst = float(angles.max(initial=0.0))
            if worst < history[-1] or history[-1] == 0.0:
                accepted = True
                break
            scale *= 0.5
        iterations += 1
        if not accepted:
            # restore the best-known state and count the failure
            scene.set_efforts(lam0)
            scene.state.set_positions(q0)
            scene.state.rotations = rot0.copy()
            scene.state.inverted = inv0.copy()
            growths += 1
            if growths >= max_growths:
                if improved:
                    # progress was made before getting stuck: that is the
                    # iteration's numeric floor, a stall rather than a failure
                    stalled = True
                    break
                raise DivergenceError(
                    f"residual stuck at {history[-1]:.4f} deg after "
                    f"{growths} undamped growth attempts",
                    history,
                )
            history.append(history[-1])
            continue
        growths = 0
        improved = True
        history.append(worst)
        converged = worst <= tol_deg

    for idx, value in pins.items():
        scene.efforts[idx] = value
    angles = np.degrees(scene.residual_angles(targets))
    return InverseReport(
        efforts=scene.efforts.copy(),
        history=history,
        iterations=iterations,
        converged=converged,
        stalled=stalled,
        final_angles=angles,
    )
