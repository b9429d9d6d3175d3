"""Batch command line for the soft-arm engine.

Subcommands: ``simulate``, ``synth``, ``calibrate``, ``validate``,
``teach``, ``estimate-force``, ``serve``. All reports are JSON with an
embedded schema version and contain no wall-clock timestamps, so a rerun
of a seeded command reproduces its artifacts byte for byte.

Exit codes: 0 success, 2 validation error (bad config, bad data, bad
request), 3 solver non-convergence, 64 usage error (unknown flags).

The default scene configuration comes from ``--scene``, else the
``SOFTARM_SCENE`` environment variable, else built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .calibration import (
    CalibrationError,
    calibrate_force_scale,
    calibrate_pressure_map,
    validate_leave_one_out,
)
from .fem import NonConvergenceError
from .inverse import DivergenceError, InverseError
from .mesh import MeshError
from .observer import geodesic_angle, quat_to_matrix
from .scene import Scene, SceneConfig, SceneError
from .scenarios import (
    ScenarioError,
    ScenarioSpec,
    TeachError,
    frame_from_scene,
    frames_to_calibration,
    estimate_disturbance,
    import_log,
    rectify_frames,
    synth_experiment,
    teach_commit,
    teach_step,
    write_frames,
)

REPORT_SCHEMA = "softarm-report/1"
ENV_SCENE = "SOFTARM_SCENE"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_USAGE = 64

_VALIDATION_ERRORS = (
    SceneError,
    ScenarioError,
    CalibrationError,
    MeshError,
    InverseError,
    TeachError,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    json.JSONDecodeError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    """argparse with BSD-style usage exits (64) instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- shared helpers -----------------------------------------------------------------


def _load_config(path):
    if path is None:
        path = os.environ.get(ENV_SCENE)
    if path is None:
        return SceneConfig()
    return SceneConfig.from_json(Path(path).read_text())


def _write_report(path, kind, payload):
    report = {"schema": REPORT_SCHEMA, "kind": kind}
    report.update(payload)
    text = json.dumps(report, indent=2) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _parse_assignments(pairs):
    out = {}
    for pair in pairs or []:
        name, sep, value = pair.partition("=")
        if not sep:
            raise SceneError(f"expected name=value, got {pair!r}")
        out[name.strip()] = float(value)
    return out


def _parse_vector(text, n, kind=float):
    parts = [kind(p) for p in text.split(",")]
    if n is not None and len(parts) != n:
        raise SceneError(f"expected {n} comma-separated values, got {text!r}")
    return parts


def _apply_efforts(scene, assignments):
    names = list(scene.effort_names)
    lo, hi = scene.bounds()
    efforts = scene.efforts.copy()
    for name, value in assignments.items():
        if name not in names:
            raise SceneError(f"unknown effort {name!r}; have {names}")
        i = names.index(name)
        if not lo[i] <= value <= hi[i]:
            raise SceneError(
                f"{name}={value:g} outside bounds [{lo[i]:g}, {hi[i]:g}]"
            )
        efforts[i] = value
    scene.set_efforts(efforts)


def _orientation_dict(scene):
    from .observer import matrix_to_quat

    return {
        name: [float(c) for c in matrix_to_quat(rot)]
        for name, rot in scene.orientations().items()
    }


def _load_targets(path):
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or not data:
        raise ScenarioError("targets file must map effector names to [w,x,y,z]")
    targets = {}
    for name, values in data.items():
        q = np.asarray(values, dtype=np.float64).reshape(-1)
        if q.shape != (4,):
            raise ScenarioError(f"target for {name!r} must be [w, x, y, z]")
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > 1e-3:
            raise ScenarioError(f"target for {name!r} is not a unit quaternion")
        targets[name] = quat_to_matrix(q / norm)
    return targets


# --- subcommand implementations -------------------------------------------------------


def _cmd_simulate(args):
    config = _load_config(args.scene)
    scene = Scene(config)
    assignments = _parse_assignments(args.set)
    if args.efforts:
        assignments = {**json.loads(Path(args.efforts).read_text()), **assignments}
    _apply_efforts(scene, assignments)
    report = scene.settle()
    if not report.converged:
        raise NonConvergenceError(
            f"settle stopped at residual {report.residual:.3e} after {report.steps} steps"
        )
    if args.csv:
        write_frames([frame_from_scene(scene, t=0.0)], args.csv)
    _write_report(
        args.out,
        "simulate",
        {
            "converged": report.converged,
            "steps": report.steps,
            "residual": report.residual,
            "efforts": dict(zip(scene.effort_names, scene.efforts.tolist())),
            "orientations": _orientation_dict(scene),
            "tip": [float(c) for c in scene.tip_position()],
        },
    )
    return EXIT_OK


def _cmd_synth(args):
    config = _load_config(args.scene)
    spec = ScenarioSpec(
        scene=config,
        protocol=args.protocol,
        dt=args.dt,
        noise_deg=args.noise_deg,
        pressure_levels=args.levels,
        pressure_step=args.step_pa,
        frames=args.frames,
        force_axis=args.force_axis,
        force_max=args.force_max,
        tether_offset=tuple(_parse_vector(args.tether_offset, 3)),
        tether_stiffness=args.tether_stiffness,
        ramp_chambers=tuple(_parse_vector(args.ramp_chambers, None, int)),
        ramp_max=args.ramp_max,
        random_range=tuple(_parse_vector(args.random_range, 2)),
    )
    frames = synth_experiment(spec, seed=args.seed)
    write_frames(frames, args.out)
    if args.report:
        _write_report(
            args.report,
            "synth",
            {"protocol": args.protocol, "seed": args.seed, "frames": len(frames),
             "output": str(args.out)},
        )
    return EXIT_OK


def _load_frames(path, scene, rectify):
    imported = import_log(Path(path).read_text())
    frames = imported.frames
    if not frames:
        raise ScenarioError(f"no usable rows in {path}")
    if rectify:
        frames = rectify_frames(frames, scene)
    return frames, imported.rejected


def _cmd_calibrate(args):
    config = _load_config(args.scene)
    scene = Scene(config)
    frames, rejected = _load_frames(args.data, scene, args.rectify)
    dataset = frames_to_calibration(frames)
    if args.mode == "pressure":
        result = calibrate_pressure_map(
            dataset, scene, tol_deg=args.tol_deg, max_iterations=args.max_iterations
        )
    else:
        if args.tether_anchor is None:
            raise CalibrationError("force mode needs --tether-anchor x,y,z")
        scene.attach_tether(
            np.asarray(_parse_vector(args.tether_anchor, 3)), args.tether_stiffness
        )
        result = calibrate_force_scale(dataset, scene)
    payload = result.to_dict()
    payload["rejected_rows"] = [{"line": ln, "reason": why} for ln, why in rejected]
    _write_report(args.out, "calibrate", payload)
    if args.apply:
        Path(args.apply).write_text(result.apply(config).to_json() + "\n")
    return EXIT_OK


def _cmd_validate(args):
    config = _load_config(args.scene)
    scene = Scene(config)
    report = validate_leave_one_out(
        scene,
        trial_count=args.trials,
        seed=args.seed,
        noise_deg=args.noise_deg,
        pressure_range=tuple(_parse_vector(args.pressure_range, 2)),
        tol_deg=args.tol_deg,
    )
    payload = report.to_dict()
    payload["table"] = report.table().splitlines()
    _write_report(args.out, "validate", payload)
    if args.out not in (None, "-"):
        print(report.table())
    return EXIT_OK


def _cmd_teach(args):
    config = _load_config(args.scene)
    targets = _load_targets(args.targets)
    estimator = Scene(config)
    state = teach_step(
        estimator, targets, tol_deg=args.tol_deg, max_iterations=args.max_iterations
    )
    payload = state.to_dict()
    if args.commit:
        if state.flagged:
            raise DivergenceError(
                f"teach estimate flagged (residual {state.residual_deg:.3g} deg); "
                "not committing",
                [],
            )
        plant = Scene(config, arm=estimator.arm)
        schedule, dt = teach_commit(plant, state, duration=args.duration, steps=args.steps)
        ramp_frames = []
        for i, row in enumerate(schedule):
            plant.set_pressures(row)
            plant.settle()
            if args.csv:
                ramp_frames.append(frame_from_scene(plant, t=i * dt))
        if args.csv:
            write_frames(ramp_frames, args.csv)
        reached = plant.orientations()
        payload["commit"] = {
            "steps": len(schedule),
            "interval": dt,
            "final_orientations": _orientation_dict(plant),
            "geodesic_error_deg": {
                name: float(np.degrees(geodesic_angle(reached[name], rot)))
                for name, rot in state.targets.items()
            },
        }
        payload["committed"] = True
    _write_report(args.out, "teach", payload)
    return EXIT_OK


def _cmd_estimate_force(args):
    config = _load_config(args.scene)
    scene = Scene(config)
    frames, rejected = _load_frames(args.log, scene, args.rectify)
    rows = []
    for frame in frames:
        estimate = estimate_disturbance(
            scene, frame, tol_deg=args.tol_deg, max_iterations=args.max_iterations
        )
        row = estimate.to_dict()
        row["t"] = frame.t
        if frame.f_meas is not None:
            row["f_meas"] = frame.f_meas
        rows.append(row)
    magnitudes = [row["magnitude"] for row in rows]
    _write_report(
        args.out,
        "estimate-force",
        {
            "frames": rows,
            "max_force": max(magnitudes),
            "mean_force": float(np.mean(magnitudes)),
            "flagged": sum(1 for row in rows if row["flagged"]),
            "rejected_rows": [{"line": ln, "reason": why} for ln, why in rejected],
        },
    )
    return EXIT_OK


def _cmd_serve(args):
    from .service import serve

    config = _load_config(args.scene)
    serve(
        config,
        host=args.host,
        port=args.port,
        stream_hz=args.stream_hz,
        teach_iterations=args.teach_iterations,
    )
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="softarm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scene_flag(p):
        p.add_argument("--scene", help="scene config JSON (default: $SOFTARM_SCENE or built-ins)")

    p = sub.add_parser("simulate", help="settle the arm under commanded efforts")
    scene_flag(p)
    p.add_argument("--set", action="append", metavar="NAME=VALUE",
                   help="effort assignment, e.g. p1=10e3 (repeatable)")
    p.add_argument("--efforts", help="JSON file of effort assignments")
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--csv", help="write the settled pose as a one-row sensor log")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("synth", help="synthesize a sensor log from a twin scene")
    scene_flag(p)
    p.add_argument("--protocol", required=True,
                   choices=("sweep", "force_ramp", "tether_ramp", "random"))
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--noise-deg", type=float, default=0.0)
    p.add_argument("--levels", type=int, default=14, help="sweep pressure levels")
    p.add_argument("--step-pa", type=float, default=5e3, help="sweep pressure step")
    p.add_argument("--frames", type=int, default=34, help="ramp frame count")
    p.add_argument("--force-axis", default="f_e2_x")
    p.add_argument("--force-max", type=float, default=0.66)
    p.add_argument("--tether-offset", default="0,0,-0.1")
    p.add_argument("--tether-stiffness", type=float, default=2e4)
    p.add_argument("--ramp-chambers", default="0,3")
    p.add_argument("--ramp-max", type=float, default=65e3)
    p.add_argument("--random-range", default="5e3,45e3")
    p.add_argument("--report", help="optional JSON summary path")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("calibrate", help="fit modulus scale and chamber gains to a log")
    scene_flag(p)
    p.add_argument("--mode", choices=("pressure", "force"), default="pressure")
    p.add_argument("--data", required=True, help="sensor log CSV")
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--apply", help="write the calibrated scene config here")
    p.add_argument("--rectify", action="store_true",
                   help="remove mounting skew using the first row")
    p.add_argument("--tol-deg", type=float, default=0.005)
    p.add_argument("--max-iterations", type=int, default=60)
    p.add_argument("--tether-anchor", help="force mode: world anchor x,y,z")
    p.add_argument("--tether-stiffness", type=float, default=2e4)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("validate", help="leave-one-out accuracy statistics")
    scene_flag(p)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-deg", type=float, default=0.0)
    p.add_argument("--pressure-range", default="5e3,45e3")
    p.add_argument("--tol-deg", type=float, default=0.05)
    p.add_argument("--out", help="report path (default stdout)")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("teach", help="estimate pressures for orientation targets")
    scene_flag(p)
    p.add_argument("--targets", required=True,
                   help="JSON file: {effector: [w,x,y,z], ...}")
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--commit", action="store_true",
                   help="replay the commit ramp on a fresh plant")
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--csv", help="write the ramp trace as a sensor log")
    p.add_argument("--tol-deg", type=float, default=0.1)
    p.add_argument("--max-iterations", type=int, default=40)
    p.set_defaults(func=_cmd_teach)

    p = sub.add_parser("estimate-force", help="recover external forces from a log")
    scene_flag(p)
    p.add_argument("--log", required=True, help="sensor log CSV")
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--rectify", action="store_true",
                   help="remove mounting skew using the first row")
    p.add_argument("--tol-deg", type=float, default=0.005)
    p.add_argument("--max-iterations", type=int, default=60)
    p.set_defaults(func=_cmd_estimate_force)

    p = sub.add_parser("serve", help="run the live HTTP/SSE service")
    scene_flag(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--stream-hz", type=float, default=15.0)
    p.add_argument("--teach-iterations", type=int, default=6)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NonConvergenceError, DivergenceError) as exc:
        print(f"softarm: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except _VALIDATION_ERRORS as exc:
        print(f"softarm: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
