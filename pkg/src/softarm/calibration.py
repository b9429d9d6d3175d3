"""Model calibration from recorded actuation trials, plus validation.

Two calibration modes share one result type:

- pressure-map: per-chamber pressure sweeps are re-estimated by the model's
  inverse solver; a line through the origin per chamber yields the product
  (modulus scale x command gain), decomposed into a global modulus scale
  and per-chamber gains renormalized to mean one.
- force-scale: with the arm tethered to a force gauge, the modulus scale is
  re-anchored so predicted cord tension matches the measurements, while the
  calibrated kinematic map (the modulus-gain product) is preserved; the
  resulting gains are free to drift from mean one.

Leave-one-out validation replays random reachable poses through the inverse
solver and aggregates tip position / orientation error statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .actuators import DEFAULT_PRESSURE_MAX
from .inverse import DivergenceError, inverse_iterate
from .observer import (
    geodesic_angle,
    matrix_to_quat,
    quat_to_matrix,
    rotvec_to_matrix,
)
from .scene import Scene


class CalibrationError(Exception):
    pass


# --- dataset ------------------------------------------------------------------


@dataclass
class CalibrationTrial:
    """One recorded actuation: commanded pressures and the settled pose.

    pressures are commanded values (Pa) for every chamber; actuated declares
    which chambers the trial intentionally drives (the rest must be zero).
    orientations maps effector names to unit quaternions (w, x, y, z);
    tip_force is an optional cord-tension measurement (N).
    """

    pressures: np.ndarray
    orientations: dict
    actuated: tuple
    tip_force: float = None

    def __post_init__(self):
        self.pressures = np.asarray(self.pressures, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.pressures)):
            raise CalibrationError("trial pressures must be finite")
        if np.any(self.pressures < 0) or np.any(self.pressures > DEFAULT_PRESSURE_MAX):
            raise CalibrationError(
                f"trial pressures must lie within [0, {DEFAULT_PRESSURE_MAX:g}] Pa"
            )
        self.actuated = tuple(int(i) for i in self.actuated)
        for i in self.actuated:
            if not (0 <= i < self.pressures.size):
                raise CalibrationError(f"actuated chamber {i} out of range")
        driven = set(np.flatnonzero(self.pressures > 0.0).tolist())
        if not driven.issubset(self.actuated):
            raise CalibrationError(
                "trial drives chambers outside its declared actuated subset"
            )
        self.orientations = {
            str(k): np.asarray(v, dtype=np.float64).reshape(4)
            for k, v in self.orientations.items()
        }
        for name, q in self.orientations.items():
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise CalibrationError(f"orientation {name!r} is not a unit quaternion")
        if self.tip_force is not None:
            self.tip_force = float(self.tip_force)
            if not np.isfinite(self.tip_force):
                raise CalibrationError("tip force must be finite")

    def target_rotations(self):
        return {name: quat_to_matrix(q) for name, q in self.orientations.items()}


@dataclass
class CalibrationDataset:
    trials: list

    def __post_init__(self):
        self.trials = list(self.trials)
        if not self.trials:
            raise CalibrationError("dataset has no trials")
        sizes = {t.pressures.size for t in self.trials}
        if len(sizes) != 1:
            raise CalibrationError("trials disagree on chamber count")

    @property
    def num_chambers(self):
        return self.trials[0].pressures.size

    def force_trials(self):
        return [t for t in self.trials if t.tip_force is not None]


@dataclass
class CalibrationResult:
    """Calibrated scene parameters plus the correction relative to the
    estimation scene.

    alpha / nu are absolute: apply() writes them into a config directly.
    relative_alpha / relative_nu express the same fit as multipliers on the
    estimation scene's existing parameters (identity when nothing changed).
    """

    mode: str
    alpha: float
    nu: np.ndarray
    relative_alpha: float
    relative_nu: np.ndarray
    residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=np.float64).reshape(-1)
        self.relative_nu = np.asarray(self.relative_nu, dtype=np.float64).reshape(-1)
        if self.alpha <= 0 or np.any(self.nu <= 0):
            raise CalibrationError("calibrated scales must be positive")

    @property
    def mean_nu(self):
        return float(np.mean(self.nu))

    def apply(self, config):
        """Config with the calibrated modulus scale and chamber gains."""
        return config.replace(
            modulus_scale=float(self.alpha),
            chamber_efficiencies=self.nu.copy(),
            calibration_mode=self.mode,
        )

    def to_dict(self):
        return {
            "mode": self.mode,
            "alpha": float(self.alpha),
            "nu": [float(v) for v in self.nu],
            "mean_nu": self.mean_nu,
            "relative_alpha": float(self.relative_alpha),
            "relative_nu": [float(v) for v in self.relative_nu],
            "residuals": self.residuals,
        }


# --- shared estimation helpers ------------------------------------------------


def _pin_all_but(scene, free_chambers):
    """Pins holding every effort at zero except the given chamber indices."""
    free = set(int(i) for i in free_chambers)
    pins = {}
    for i in range(scene.num_pressures):
        if i not in free:
            pins[i] = 0.0
    for i in range(scene.num_pressures, len(scene.effort_names)):
        pins[i] = 0.0
    return pins


def estimate_trial(scene, trial, tol_deg=0.005, max_iterations=60):
    """Pressures the scene needs to reproduce a trial's orientations.

    Only the trial's actuated chambers are free; everything else is pinned
    at zero. The scene is reset and left at the estimated equilibrium.
    """
    scene.reset()
    report = inverse_iterate(
        scene,
        trial.target_rotations(),
        pins=_pin_all_but(scene, trial.actuated),
        tol_deg=tol_deg,
        max_iterations=max_iterations,
    )
    return report.efforts[: scene.num_pressures], report


# --- pressure-map calibration ---------------------------------------------------


def _fit_relative_products(dataset, scene, tol_deg, max_iterations):
    """One estimation pass: per-chamber correction products on this scene.

    For every trial the inverse solver, with only the actuated chambers
    free, estimates the pressures that reproduce the recorded orientations.
    Per chamber, estimated vs commanded pressure is fit by a line through
    the origin; its inverse slope is the correction product (modulus scale
    x gain) relative to the scene's current configuration.
    """
    m = scene.num_pressures
    pairs = [[] for _ in range(m)]
    unconverged = 0
    skipped = 0
    for trial in dataset.trials:
        if not np.any(trial.pressures > 0.0):
            continue  # a zero trial has no slope information
        try:
            estimated, report = estimate_trial(
                scene, trial, tol_deg=tol_deg, max_iterations=max_iterations
            )
        except DivergenceError:
            skipped += 1
            continue
        if not report.converged:
            unconverged += 1
        for i in trial.actuated:
            if trial.pressures[i] > 0.0:
                pairs[i].append((trial.pressures[i], estimated[i]))
    scene.reset()

    slopes = np.zeros(m)
    rms = np.zeros(m)
    for i in range(m):
        if len(pairs[i]) < 3:
            raise CalibrationError(
                f"chamber {i}: need at least 3 usable trials, got {len(pairs[i])}"
            )
        c, e = np.asarray(pairs[i]).T
        slopes[i] = float(c @ e / (c @ c))
        if slopes[i] <= 0:
            raise CalibrationError(f"chamber {i} shows no pressure response")
        rms[i] = float(
            np.sqrt(np.sum((e - slopes[i] * c) ** 2) / max(np.sum(e**2), 1e-30))
        )

    counters = {
        "per_chamber_rms": [float(v) for v in rms],
        "trials_used": [len(p) for p in pairs],
        "unconverged": unconverged,
        "diverged": skipped,
    }
    return 1.0 / slopes, counters


def calibrate_pressure_map(
    dataset, scene, tol_deg=0.005, max_iterations=60, passes=4, pass_tol=0.01
):
    """Fit modulus scale and per-chamber command gains from pressure sweeps.

    Each pass re-estimates the dataset on the current model and fits one
    correction product (modulus scale x gain) per chamber; the products
    decompose into a global scale and gains explicitly renormalized to
    mean one. Gravity does not rescale with the modulus, so a single pass
    is slightly biased whenever the correction is large; re-fitting on the
    corrected model contracts that bias geometrically, and the loop stops
    once a pass's corrections all fall within `pass_tol`. The returned
    relative factors compare against the scene's incoming configuration.
    """
    m = scene.num_pressures
    if dataset.num_chambers != m:
        raise CalibrationError(
            f"dataset has {dataset.num_chambers} chambers, scene has {m}"
        )
    work = scene
    passes_run = 0
    for _ in range(max(1, passes)):
        relative, counters = _fit_relative_products(
            dataset, work, tol_deg=tol_deg, max_iterations=max_iterations
        )
        passes_run += 1
        work_nu = np.asarray(work.config.chamber_efficiencies, dtype=np.float64)
        product = work.config.modulus_scale * work_nu * relative
        alpha = float(np.mean(product))
        nu = product / alpha
        # explicit renormalization: mean(nu) == 1 to machine precision
        drift = float(np.mean(nu))
        nu = nu / drift
        alpha = alpha * drift
        if float(np.max(np.abs(relative - 1.0))) < pass_tol:
            break
        work = Scene(
            work.config.replace(
                modulus_scale=alpha, chamber_efficiencies=tuple(float(v) for v in nu)
            ),
            arm=scene.arm,
        )
    scene.reset()

    base_nu = np.asarray(scene.config.chamber_efficiencies, dtype=np.float64)
    total_relative = product / (scene.config.modulus_scale * base_nu)
    relative_alpha = float(np.mean(total_relative))
    relative_nu = total_relative / relative_alpha
    counters["passes"] = passes_run

    return CalibrationResult(
        mode="pressure-map",
        alpha=alpha,
        nu=nu,
        relative_alpha=relative_alpha,
        relative_nu=relative_nu,
        residuals=counters,
    )


# --- force-scale calibration ----------------------------------------------------


def calibrate_force_scale(dataset, scene, bounds=(0.25, 4.0), xatol=1e-5):
    """Re-anchor the modulus scale against measured cord tensions.

    The scene must carry the fixed-tip rig: a tether attached where the
    gauge cord was. Candidate modulus scales keep the calibrated kinematic
    map fixed (gains shrink as the modulus grows), so only the predicted
    tension changes; the scale minimizing the squared tension mismatch is
    returned. The resulting gains generally no longer average to one.
    """
    trials = dataset.force_trials()
    if not trials:
        raise CalibrationError("dataset has no tip-force measurements")
    if scene.tether is None:
        raise CalibrationError("force-scale calibration needs an attached tether")
    m = scene.num_pressures
    if dataset.num_chambers != m:
        raise CalibrationError(
            f"dataset has {dataset.num_chambers} chambers, scene has {m}"
        )

    base_alpha = scene.config.modulus_scale
    base_nu = np.asarray(scene.config.chamber_efficiencies, dtype=np.float64)
    product = base_alpha * base_nu  # the kinematic map, held fixed
    anchor = scene.tether.anchor.copy()
    stiffness = scene.tether.stiffness
    rest_length = scene.tether.rest_length
    point = scene.tether.embedding.positions(scene.mesh)[0]
    measured = np.array([t.tip_force for t in trials])

    def predicted(scale):
        cfg = scene.config.replace(
            modulus_scale=float(scale),
            chamber_efficiencies=product / scale,
        )
        trial_scene = Scene(cfg, arm=scene.arm)
        trial_scene.attach_tether(anchor, stiffness, rest_length, point=point)
        out = np.empty(len(trials))
        for k, trial in enumerate(trials):
            trial_scene.reset()
            trial_scene.set_pressures(trial.pressures)
            trial_scene.settle()
            out[k] = trial_scene.tether.tension(trial_scene.state.q)
        return out

    def sse(rel):
        diff = predicted(base_alpha * rel) - measured
        return float(diff @ diff)

    fit = minimize_scalar(
        sse, bounds=bounds, method="bounded", options={"xatol": xatol}
    )
    relative_alpha = float(fit.x)
    alpha = base_alpha * relative_alpha
    nu = product / alpha

    return CalibrationResult(
        mode="force-scale",
        alpha=alpha,
        nu=nu,
        relative_alpha=relative_alpha,
        relative_nu=nu / base_nu,
        residuals={
            "sse": float(fit.fun),
            "per_trial": [float(v) for v in (predicted(alpha) - measured)],
            "mean_nu": float(np.mean(nu)),
        },
    )


# --- leave-one-out validation ---------------------------------------------------


@dataclass
class ValidationReport:
    """Tip-error statistics over random leave-one-out actuation trials."""

    position_m: dict
    orientation_deg: dict
    trials: list
    failures: int
    seed: int

    def to_dict(self):
        return {
            "seed": self.seed,
            "trial_count": len(self.trials),
            "failures": self.failures,
            "position_m": self.position_m,
            "orientation_deg": self.orientation_deg,
            "trials": self.trials,
        }

    def table(self):
        """Statistics rendered as an aligned text table."""
        rows = ["        Position (m)   Orientation (deg)"]
        for key in ("min", "max", "mean", "std"):
            rows.append(
                f"{key.capitalize():<6} {self.position_m[key]:>13.6f} "
                f"{self.orientation_deg[key]:>17.4f}"
            )
        return "\n".join(rows)


def _stats(values):
    values = np.asarray(values, dtype=np.float64)
    return {
        "min": float(values.min()),
        "max": float(values.max()),
        "mean": float(values.mean()),
        "std": float(values.std()),
    }


def validate_leave_one_out(
    scene,
    trial_count=20,
    seed=0,
    twin=None,
    noise_deg=0.0,
    pressure_range=(5e3, 45e3),
    tol_deg=0.05,
    max_iterations=60,
):
    """Replay random reachable poses through the inverse solver.

    Each trial drives a random two-of-three chamber subset per segment on
    the twin (default: a clone of the scene), optionally perturbs the
    resulting orientations, then estimates pressures with the left-out
    chambers pinned. Errors are tip distance and tip geodesic angle against
    the twin's unperturbed pose.
    """
    if twin is None:
        twin = Scene(scene.config, arm=scene.arm)
    m = scene.num_pressures
    if twin.num_pressures != m:
        raise CalibrationError("twin and scene disagree on chamber count")
    segments = m // 3
    rng = np.random.default_rng(seed)
    tip_name = scene.effector_order[-1]
    lo, hi = pressure_range

    records = []
    failures = 0
    for index in range(trial_count):
        actuated = []
        pressures = np.zeros(m)
        for s in range(segments):
            pair = rng.choice(3, size=2, replace=False)
            for j in pair:
                i = 3 * s + int(j)
                actuated.append(i)
                pressures[i] = rng.uniform(lo, hi)
        twin.reset()
        twin.set_pressures(pressures)
        twin.settle()
        truth = twin.orientations()
        tip_truth = twin.tip_position()

        targets = {name: rot.copy() for name, rot in truth.items()}
        if noise_deg > 0.0:
            sigma = np.radians(noise_deg)
            for name in targets:
                targets[name] = rotvec_to_matrix(rng.normal(0.0, sigma, 3)) @ targets[name]

        scene.reset()
        converged = True
        try:
            report = inverse_iterate(
                scene,
                targets,
                pins=_pin_all_but(scene, actuated),
                tol_deg=tol_deg,
                max_iterations=max_iterations,
            )
            converged = report.converged
        except DivergenceError:
            failures += 1
            converged = False

        pos_err = float(np.linalg.norm(scene.tip_position() - tip_truth))
        orient_err = float(
            np.degrees(geodesic_angle(scene.orientations()[tip_name], truth[tip_name]))
        )
        records.append(
            {
                "trial": index,
                "actuated": sorted(actuated),
                "position_error_m": pos_err,
                "orientation_error_deg": orient_err,
                "converged": bool(converged),
            }
        )
    scene.reset()

    return ValidationReport(
        position_m=_stats([r["position_error_m"] for r in records]),
        orientation_deg=_stats([r["orientation_error_deg"] for r in records]),
        trials=records,
        failures=failures,
        seed=seed,
    )


# --- synthetic datasets ---------------------------------------------------------


def synthesize_pressure_sweep(twin, magnitudes=None):
    """Sweep each chamber group on a twin and record the settled poses.

    Groups drive the same chamber slot of every segment simultaneously
    (one chamber per segment, as the estimation step requires). The default
    sweep steps 0 to 65 kPa in 5 kPa increments.
    """
    if magnitudes is None:
        magnitudes = np.arange(14) * 5e3
    m = twin.num_pressures
    segments = m // 3
    trials = []
    for j in range(3):
        chambers = tuple(3 * s + j for s in range(segments))
        for c in magnitudes:
            pressures = np.zeros(m)
            pressures[list(chambers)] = c
            twin.reset()
            twin.set_pressures(pressures)
            twin.settle()
            trials.append(
                CalibrationTrial(
                    pressures=pressures,
                    orientations={
                        name: matrix_to_quat(rot)
                        for name, rot in twin.orientations().items()
                    },
                    actuated=chambers,
                )
            )
    twin.reset()
    return CalibrationDataset(trials)


def synthesize_force_trials(twin, pressure_profiles):
    """Settle a tethered twin at each pressure profile, recording tension."""
    if twin.tether is None:
        raise CalibrationError("force trials need a tethered twin")
    trials = []
    for pressures in pressure_profiles:
        pressures = np.asarray(pressures, dtype=np.float64)
        twin.reset()
        twin.set_pressures(pressures)
        twin.settle()
        trials.append(
            CalibrationTrial(
                pressures=pressures,
                orientations={
                    name: matrix_to_quat(rot)
                    for name, rot in twin.orientations().items()
                },
                actuated=tuple(np.flatnonzero(pressures > 0.0).tolist()),
                tip_force=twin.tether.tension(twin.state.q),
            )
        )
    twin.reset()
    return CalibrationDataset(trials)
