"""Executable protocols: synthetic experiments, log ingestion, disturbance
estimation and teach mode.

Sensor frames carry what a motion-capture + pressure-logging rig would
record: timestamps, commanded chamber pressures, per-segment orientations
and an optional gauge force. The CSV schema is fixed and documented:

    t,p1..p6,qBI_w,qBI_x,qBI_y,qBI_z,qIT_w,qIT_x,qIT_y,qIT_z,f_meas

with SI units, '.' decimal separator and LF line endings. qBI is the first
segment's orientation in the world (base) frame; qIT is the tip segment's
orientation relative to the first segment. f_meas is empty when absent.
Floats serialize via repr(), so a written file re-imports bit-exactly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .actuators import DEFAULT_PRESSURE_MAX
from .calibration import CalibrationDataset, CalibrationTrial
from .fem import NonConvergenceError
from .inverse import DivergenceError, inverse_iterate
from .observer import (
    matrix_to_quat,
    quat_conjugate,
    quat_multiply,
    quat_to_matrix,
    rotvec_to_matrix,
)
from .scene import Scene, SceneConfig


class ScenarioError(Exception):
    pass


class TeachError(Exception):
    pass


CSV_HEADER = (
    "t,p1,p2,p3,p4,p5,p6,"
    "qBI_w,qBI_x,qBI_y,qBI_z,qIT_w,qIT_x,qIT_y,qIT_z,f_meas"
)
QUAT_NORM_TOL = 1e-3


# --- sensor frames --------------------------------------------------------------


@dataclass
class SensorFrame:
    """One time-stamped measurement: pressures, segment orientations, force.

    orientations maps effector names to world-frame unit quaternions
    (w, x, y, z); pressures are commanded values in Pa.
    """

    t: float
    pressures: np.ndarray
    orientations: dict
    f_meas: float = None

    def __post_init__(self):
        self.t = float(self.t)
        self.pressures = np.asarray(self.pressures, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.pressures)):
            raise ScenarioError("frame pressures must be finite")
        if np.any(self.pressures < 0) or np.any(
            self.pressures > 1.1 * DEFAULT_PRESSURE_MAX
        ):
            raise ScenarioError("frame pressures outside the plausible range")
        self.orientations = {
            str(k): np.asarray(v, dtype=np.float64).reshape(4)
            for k, v in self.orientations.items()
        }
        for name, q in self.orientations.items():
            norm = float(np.linalg.norm(q))
            if abs(norm - 1.0) > QUAT_NORM_TOL:
                raise ScenarioError(f"orientation {name!r} quaternion norm {norm:.4f}")
            self.orientations[name] = q / norm
        if self.f_meas is not None:
            self.f_meas = float(self.f_meas)
            if not np.isfinite(self.f_meas):
                raise ScenarioError("measured force must be finite")

    def target_rotations(self):
        return {name: quat_to_matrix(q) for name, q in self.orientations.items()}


def frame_from_scene(scene, t, f_meas=None):
    """Snapshot the scene's settled pose as a sensor frame."""
    return SensorFrame(
        t=t,
        pressures=scene.pressures,
        orientations={
            name: matrix_to_quat(rot) for name, rot in scene.orientations().items()
        },
        f_meas=f_meas,
    )


def _frame_to_row(frame):
    if frame.pressures.size != 6:
        raise ScenarioError("the CSV schema is fixed at six chambers")
    if set(frame.orientations) != {"e1", "e2"}:
        raise ScenarioError("the CSV schema is fixed at segments e1, e2")
    q1 = frame.orientations["e1"]
    q12 = quat_multiply(quat_conjugate(q1), frame.orientations["e2"])
    cells = [repr(frame.t)]
    cells += [repr(float(p)) for p in frame.pressures]
    cells += [repr(float(c)) for c in q1]
    cells += [repr(float(c)) for c in q12]
    cells.append("" if frame.f_meas is None else repr(frame.f_meas))
    return ",".join(cells)


def frames_to_csv(frames):
    """Render frames in the documented CSV schema (LF endings)."""
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for frame in frames:
        out.write(_frame_to_row(frame) + "\n")
    return out.getvalue()


def write_frames(frames, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(frames_to_csv(frames))


@dataclass
class ImportReport:
    """Accepted frames plus (line number, reason) for every rejected row."""

    frames: list
    rejected: list


def import_log(source):
    """Parse a CSV log (path or text) into validated sensor frames.

    The header must match the documented schema exactly. Rows with the
    wrong arity, non-finite numbers, quaternion norms off by more than
    1e-3, or non-increasing timestamps are rejected individually with
    their line numbers; the rest are kept.
    """
    if isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, "r") as fh:
            text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise ScenarioError(
            f"log header must be exactly {CSV_HEADER!r}"
            + (f", got {lines[0].strip()!r}" if lines else " (empty file)")
        )
    frames = []
    rejected = []
    last_t = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != 16:
            rejected.append((lineno, f"expected 16 fields, got {len(cells)}"))
            continue
        try:
            values = [float(c) for c in cells[:15]]
            f_meas = None if cells[15].strip() == "" else float(cells[15])
        except ValueError as exc:
            rejected.append((lineno, f"unparsable number: {exc}"))
            continue
        t = values[0]
        q1 = np.array(values[7:11])
        q12 = np.array(values[11:15])
        try:
            frame = SensorFrame(
                t=t,
                pressures=values[1:7],
                orientations={"e1": q1, "e2": quat_multiply(q1, q12)},
                f_meas=f_meas,
            )
        except ScenarioError as exc:
            rejected.append((lineno, str(exc)))
            continue
        if last_t is not None and t <= last_t:
            rejected.append((lineno, f"timestamp {t!r} not increasing"))
            continue
        last_t = t
        frames.append(frame)
    return ImportReport(frames=frames, rejected=rejected)


def rectify_frames(frames, scene, zero_frame=None):
    """Align a measured stream with the model's zero-pressure pose.

    The correction per segment is the relative rotation between the scene's
    settled zero-pressure orientation and the stream's zero reading
    (default: the first frame), applied on the right to every measurement
    so the corrected zero reading matches the model exactly.
    """
    if zero_frame is None:
        if not frames:
            raise ScenarioError("cannot rectify an empty stream")
        zero_frame = frames[0]
    scene.reset()
    scene.settle()
    nominal = {
        name: matrix_to_quat(rot) for name, rot in scene.orientations().items()
    }
    deltas = {}
    for name, q_nominal in nominal.items():
        if name not in zero_frame.orientations:
            raise ScenarioError(f"zero frame lacks effector {name!r}")
        deltas[name] = quat_multiply(
            quat_conjugate(q_nominal), zero_frame.orientations[name]
        )
    out = []
    for frame in frames:
        corrected = {
            name: quat_multiply(q, quat_conjugate(deltas[name]))
            for name, q in frame.orientations.items()
        }
        out.append(
            SensorFrame(
                t=frame.t,
                pressures=frame.pressures,
                orientations=corrected,
                f_meas=frame.f_meas,
            )
        )
    return out


def frames_to_calibration(frames):
    """Convert a frame stream into calibration trials.

    A frame's actuated subset is whatever chambers it drives; frames with
    measured forces keep them as cord tensions.
    """
    trials = []
    for frame in frames:
        trials.append(
            CalibrationTrial(
                pressures=frame.pressures,
                orientations=dict(frame.orientations),
                actuated=tuple(np.flatnonzero(frame.pressures > 0.0).tolist()),
                tip_force=frame.f_meas,
            )
        )
    return CalibrationDataset(trials)


# --- synthetic experiments --------------------------------------------------------


PROTOCOLS = ("sweep", "force_ramp", "tether_ramp", "random")


@dataclass
class ScenarioSpec:
    """A synthetic experiment: which protocol to run on which twin.

    The twin's config carries any hidden ground truth (modulus scale,
    per-chamber gains). Orientation noise is an isotropic rotation-vector
    Gaussian in degrees, applied after settling.
    """

    scene: SceneConfig = field(default_factory=SceneConfig)
    protocol: str = "sweep"
    dt: float = 1.0
    noise_deg: float = 0.0
    # sweep: every chamber, pressure_levels steps of pressure_step from zero
    pressure_levels: int = 14
    pressure_step: float = 5e3
    # force_ramp: ramp one force actuator 0 -> force_max over `frames` frames
    frames: int = 34
    force_axis: str = "f_e2_x"
    force_max: float = 0.66
    # tether_ramp: tether the tip, ramp the given chambers 0 -> ramp_max
    tether_offset: tuple = (0.0, 0.0, -0.1)
    tether_stiffness: float = 2e4
    ramp_chambers: tuple = (0, 3)
    ramp_max: float = 65e3
    # random: uniform pressures on a 2-of-3 subset per segment, per frame
    random_range: tuple = (5e3, 45e3)

    def __post_init__(self):
        if isinstance(self.scene, dict):
            self.scene = SceneConfig.from_dict(self.scene)
        if self.protocol not in PROTOCOLS:
            raise ScenarioError(f"protocol must be one of {PROTOCOLS}")
        if self.dt <= 0:
            raise ScenarioError("dt must be positive")
        if self.noise_deg < 0:
            raise ScenarioError("noise_deg must be non-negative")
        if self.pressure_levels < 1 or self.frames < 2:
            raise ScenarioError("sweep needs >= 1 level, ramps need >= 2 frames")
        if self.pressure_step < 0 or self.force_max < 0 or self.ramp_max < 0:
            raise ScenarioError("magnitudes must be non-negative")
        top = (self.pressure_levels - 1) * self.pressure_step
        if top > self.scene.pressure_max:
            raise ScenarioError(
                f"sweep tops out at {top:g} Pa, above the {self.scene.pressure_max:g} Pa bound"
            )
        if self.ramp_max > self.scene.pressure_max:
            raise ScenarioError("ramp_max exceeds the pressure bound")
        self.tether_offset = tuple(float(c) for c in self.tether_offset)
        if len(self.tether_offset) != 3 or self.tether_stiffness <= 0:
            raise ScenarioError("tether needs a 3-vector offset and positive stiffness")
        self.ramp_chambers = tuple(int(c) for c in self.ramp_chambers)
        self.random_range = (float(self.random_range[0]), float(self.random_range[1]))
        if not (0 <= self.random_range[0] < self.random_range[1]):
            raise ScenarioError("random_range must be an increasing pair of pressures")

    def to_dict(self):
        return {
            "scene": self.scene.to_dict(),
            "protocol": self.protocol,
            "dt": self.dt,
            "noise_deg": self.noise_deg,
            "pressure_levels": self.pressure_levels,
            "pressure_step": self.pressure_step,
            "frames": self.frames,
            "force_axis": self.force_axis,
            "force_max": self.force_max,
            "tether_offset": list(self.tether_offset),
            "tether_stiffness": self.tether_stiffness,
            "ramp_chambers": list(self.ramp_chambers),
            "ramp_max": self.ramp_max,
            "random_range": list(self.random_range),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise ScenarioError(f"bad scenario spec: {exc}") from exc


def synth_experiment(spec, seed=0):
    """Forward-simulate a protocol on a twin, returning sensor frames.

    Fully deterministic for a fixed spec and seed; timestamps are synthetic
    multiples of dt.
    """
    rng = np.random.default_rng(seed)
    twin = Scene(spec.scene)
    m = twin.num_pressures

    def snapshot(t, f_meas=None):
        frame = frame_from_scene(twin, t, f_meas=f_meas)
        if spec.noise_deg > 0.0:
            sigma = np.radians(spec.noise_deg)
            noisy = {}
            for name, q in frame.orientations.items():
                wobble = rotvec_to_matrix(rng.normal(0.0, sigma, 3))
                noisy[name] = matrix_to_quat(wobble @ quat_to_matrix(q))
            frame.orientations = noisy
        return frame

    frames = []
    step = 0
    if spec.protocol == "sweep":
        for chamber in range(m):
            for level in range(spec.pressure_levels):
                pressures = np.zeros(m)
                pressures[chamber] = level * spec.pressure_step
                twin.reset()
                twin.set_pressures(pressures)
                twin.settle()
                frames.append(snapshot(step * spec.dt))
                step += 1
    elif spec.protocol == "force_ramp":
        names = twin.effort_names
        if spec.force_axis not in names:
            raise ScenarioError(f"unknown force actuator {spec.force_axis!r}")
        index = names.index(spec.force_axis)
        # ramps run incrementally: each frame settles from the previous
        # equilibrium, matching a gauge pulled away in small steps
        for k in range(spec.frames):
            magnitude = spec.force_max * k / (spec.frames - 1)
            twin.efforts[index] = magnitude
            twin.settle()
            frames.append(snapshot(step * spec.dt, f_meas=magnitude))
            step += 1
    elif spec.protocol == "tether_ramp":
        twin.settle()
        anchor = twin.tip_position() + np.asarray(spec.tether_offset)
        twin.attach_tether(anchor, spec.tether_stiffness)
        for chamber in spec.ramp_chambers:
            if not (0 <= chamber < m):
                raise ScenarioError(f"ramp chamber {chamber} out of range")
        # the pressure ramp is incremental by nature: the cord keeps the tip
        # loaded, and each frame settles from the previous equilibrium. The
        # slack/taut kink of the cord can defeat a full-increment solve, so
        # an increment that fails to settle is bisected until it does.
        reached = np.zeros(m)
        for k in range(spec.frames):
            pressures = np.zeros(m)
            pressures[list(spec.ramp_chambers)] = spec.ramp_max * k / (spec.frames - 1)
            frac = 1.0
            while True:
                attempt = reached + frac * (pressures - reached)
                twin.set_pressures(attempt)
                try:
                    twin.settle()
                except NonConvergenceError:
                    frac /= 2.0
                    if frac < 2.0 ** -12:
                        raise
                    continue
                reached = attempt
                if frac == 1.0:
                    break
                frac = min(1.0, 2.0 * frac)
            tension = twin.tether.tension(twin.state.q)
            frames.append(snapshot(step * spec.dt, f_meas=tension))
            step += 1
    else:  # random
        segments = m // 3
        lo, hi = spec.random_range
        for k in range(spec.frames):
            pressures = np.zeros(m)
            for s in range(segments):
                pair = rng.choice(3, size=2, replace=False)
                for j in pair:
                    pressures[3 * s + int(j)] = rng.uniform(lo, hi)
            twin.reset()
            twin.set_pressures(pressures)
            twin.settle()
            frames.append(snapshot(step * spec.dt))
            step += 1
    return frames


# --- disturbance estimation --------------------------------------------------------


@dataclass
class DisturbanceEstimate:
    """External point forces that best explain an observed pose."""

    forces: dict                # actuator name -> signed magnitude (N)
    directions_world: dict      # actuator name -> unit direction in world
    magnitude: float            # norm of the summed world-frame force vector
    residual_deg: float         # worst masked orientation residual after fit
    converged: bool
    flagged: bool
    pressures: np.ndarray       # the pinned commanded pressures

    def world_force(self):
        total = np.zeros(3)
        for name, value in self.forces.items():
            total += value * self.directions_world[name]
        return total

    def to_dict(self):
        return {
            "forces": {k: float(v) for k, v in self.forces.items()},
            "directions_world": {
                k: [float(c) for c in v] for k, v in self.directions_world.items()
            },
            "magnitude": float(self.magnitude),
            "residual_deg": float(self.residual_deg),
            "converged": bool(self.converged),
            "flagged": bool(self.flagged),
            "pressures": [float(p) for p in self.pressures],
        }


def estimate_disturbance(scene, frame, tol_deg=0.005, max_iterations=60):
    """Estimate the external forces explaining a frame's orientations.

    Measured pressures are pinned as equalities; only the scene's force
    efforts stay free. Non-convergence flags the estimate but still
    returns the last (best) iterate.
    """
    targets = frame.target_rotations() if isinstance(frame, SensorFrame) else {
        name: np.asarray(rot, dtype=np.float64) for name, rot in frame.items()
    }
    pressures = (
        frame.pressures
        if isinstance(frame, SensorFrame)
        else scene.pressures
    )
    m = scene.num_pressures
    if pressures.size != m:
        raise ScenarioError(f"need {m} pressures, got {pressures.size}")
    # sensor headroom allows readings slightly above the actuator bound;
    # equality pins must stay inside the box
    lo, hi = scene.bounds()
    pins = {
        i: float(np.clip(pressures[i], lo[i], hi[i])) for i in range(m)
    }

    flagged = False
    converged = False
    try:
        report = inverse_iterate(
            scene, targets, pins=pins, tol_deg=tol_deg, max_iterations=max_iterations
        )
        converged = report.converged
        flagged = not report.converged
        efforts = report.efforts
    except DivergenceError:
        flagged = True
        efforts = scene.efforts.copy()

    rotations = scene.frame_rotations()
    forces = {}
    directions = {}
    for k, actuator in enumerate(scene.actuation.forces):
        forces[actuator.name] = float(efforts[m + k])
        directions[actuator.name] = rotations[actuator.frame] @ actuator.local_direction
    estimate = DisturbanceEstimate(
        forces=forces,
        directions_world=directions,
        magnitude=0.0,
        residual_deg=float(
            np.degrees(scene.residual_angles(targets)).max(initial=0.0)
        ),
        converged=converged,
        flagged=flagged,
        pressures=np.asarray(pressures, dtype=np.float64).copy(),
    )
    estimate.magnitude = float(np.linalg.norm(estimate.world_force()))
    return estimate


# --- teach mode ---------------------------------------------------------------------


@dataclass
class TeachState:
    """A live teach estimate: targets, pressures, and whether to trust it."""

    targets: dict               # effector name -> rotation matrix
    pressures: np.ndarray       # estimated commanded pressures (Pa)
    residual_deg: float
    converged: bool
    flagged: bool               # solver stalled/diverged: do not commit
    committed: bool = False
    commanded: np.ndarray = None  # final ramp output once committed

    def to_dict(self):
        return {
            "targets": {
                name: [float(c) for c in matrix_to_quat(rot)]
                for name, rot in self.targets.items()
            },
            "pressures": [float(p) for p in self.pressures],
            "residual_deg": float(self.residual_deg),
            "converged": bool(self.converged),
            "flagged": bool(self.flagged),
            "committed": bool(self.committed),
            "commanded": None
            if self.commanded is None
            else [float(p) for p in self.commanded],
        }


def teach_step(scene, targets, tol_deg=0.1, max_iterations=40):
    """Estimate pressures reproducing the given orientations.

    All chambers are free; force efforts are disabled (pinned at zero).
    Unreachable targets come back flagged, with the boundary pressures and
    the residual that remained. Pass max_iterations=1 for a single live
    update inside a streaming loop.
    """
    pins = {
        i: 0.0 for i in range(scene.num_pressures, len(scene.effort_names))
    }
    flagged = False
    converged = False
    try:
        report = inverse_iterate(
            scene, targets, pins=pins, tol_deg=tol_deg, max_iterations=max_iterations
        )
        converged = report.converged
        flagged = bool(report.stalled and not report.converged)
        pressures = report.efforts[: scene.num_pressures]
        residual = float(np.max(report.final_angles, initial=0.0))
    except DivergenceError:
        flagged = True
        pressures = scene.pressures
        residual = float(
            np.degrees(scene.residual_angles(targets)).max(initial=0.0)
        )
    return TeachState(
        targets={name: np.asarray(rot).copy() for name, rot in targets.items()},
        pressures=np.asarray(pressures, dtype=np.float64).copy(),
        residual_deg=residual,
        converged=converged,
        flagged=flagged,
    )


def teach_commit(scene, state, duration=2.0, steps=20):
    """Build the linear per-chamber ramp from current to estimated pressures.

    Returns (schedule, dt): schedule rows are the commanded pressures per
    step, ending exactly at the estimate; dt is the per-step interval.
    Refuses flagged estimates and anything outside the pressure bounds.
    A no-op estimate collapses to a single step.
    """
    if state.flagged:
        raise TeachError("refusing to commit a flagged (unreachable) estimate")
    if duration <= 0 or steps < 1:
        raise TeachError("ramp needs positive duration and at least one step")
    lo, hi = scene.bounds()
    m = scene.num_pressures
    target = np.asarray(state.pressures, dtype=np.float64)
    if target.shape != (m,):
        raise TeachError(f"estimate must have {m} pressures")
    current = scene.pressures
    if np.array_equal(target, current):
        schedule = target[None, :].copy()
    else:
        fractions = np.arange(1, steps + 1) / steps
        schedule = current[None, :] + fractions[:, None] * (target - current)[None, :]
        schedule[-1] = target
    if np.any(schedule < lo[None, :m] - 1e-9) or np.any(
        schedule > hi[None, :m] + 1e-9
    ):
        raise TeachError("ramp leaves the commanded pressure bounds")
    state.committed = True
    state.commanded = schedule[-1].copy()
    return schedule, duration / len(schedule)


def apply_ramp(scene, schedule):
    """Forward-run a committed ramp, settling at each step."""
    for pressures in np.asarray(schedule, dtype=np.float64):
        scene.set_pressures(pressures)
        scene.settle()
    return scene.orientations()
