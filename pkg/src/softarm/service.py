"""Live simulation service: one sim thread per scene behind an HTTP/SSE front.

Architecture
------------
:class:`SimHost` owns two scenes built on one shared arm geometry:

* the **plant** — stepped toward equilibrium by a dedicated sim thread.
  Every mutation (pressures, forces, ramps, reset) arrives as a queued
  command; the queue is drained FIFO at step boundaries, so a command is
  never applied mid-step and command handling never blocks the stream for
  more than one step.
* the **estimator** — a second scene owned by a solver thread running
  orientation-target fits (teach mode) and external-force fits
  (disturbance mode). It never touches the plant; the two threads exchange
  immutable snapshots and plain result dicts. Target requests are
  newest-wins with at most one solve in flight, so a drag stream can
  outpace the solver without queueing stale work.

The sim free-runs; the stream decimates it to ``stream_hz`` (default 15).
Stream messages form a single global sequence: each message is rendered to
JSON text once and pushed to every subscriber under one lock, so every
connection sees the same gap-free sequence ids and byte-identical
payloads. Messages are either ``snapshot`` (all physical fields read
between steps of the same sim state) or ``ack`` (one per applied command).
A state-mutating command additionally triggers an immediate snapshot so
its effect follows its ack without waiting for the next paced emission.

HTTP interface (bodies and responses are JSON)
----------------------------------------------
``GET /state``
    Latest snapshot: ``{type, seq, step, t, steady, stalled, residual,
    pressures: {p1: Pa, ...}, forces: {name: N, ...}, orientations:
    {e1: [w,x,y,z], ...}, tip: [x,y,z], ramp, teach, disturbance,
    skin: [[x,y,z], ...]}``.
``GET /mesh``
    Static geometry: skin node ids, triangles (indices into the skin
    list), effector/effort names, bounds, rest tip position.
``GET /config``
    Scene configuration dict plus stream settings.
``GET /stream``
    Server-sent events; each ``data:`` line carries one stream message.
``POST /pressures`` ``{"values": {"p1": 10000.0} | [..m floats..]}``
    Sets commanded pressures (partial dicts keep unnamed chambers);
    cancels any active ramp. Out-of-bounds or unknown names → 400.
``POST /targets`` ``{"orientations": {"e1": [w,x,y,z], ...}, "wait": true}``
    Submits orientation targets for the teach estimator (all effectors
    required). With ``wait`` the response carries the pressure estimate
    ``{pressures, residual_deg, converged, flagged, target_id, ...}``;
    otherwise it returns ``{accepted, target_id}`` and the estimate
    arrives as a stream ack and in later snapshots.
``POST /teach/commit`` ``{"pressures": null | {..} | [..], "duration": 2.0,
    "steps": 20}``
    Ramps the plant from its current commanded pressures to the estimate
    (default: the latest teach result; flagged estimates → 409).
``POST /disturbance`` ``{"forces": {"f_e2_x": -0.3} | null,
    "estimate": true | null}``
    ``forces`` applies true external point forces to the plant;
    ``estimate`` toggles the online estimator that recovers them from the
    streamed orientations.
``POST /reset``
    Rest pose, zero efforts, ramp and estimates cleared, estimator off.

Malformed payloads are rejected with a structured error body
(``{"error": {...}}``, HTTP 400/422) and leave the simulation untouched.
"""

from __future__ import annotations

import itertools
import json
import queue
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .fem import NonConvergenceError
from .observer import matrix_to_quat, quat_to_matrix
from .scene import Scene, SceneError
from .scenarios import (
    QUAT_NORM_TOL,
    SensorFrame,
    TeachError,
    TeachState,
    estimate_disturbance,
    teach_commit,
    teach_step,
)

SCHEMA_VERSION = "softarm-stream/1"


class CommandError(Exception):
    """A command payload that cannot be applied; the simulation is unchanged."""


try:  # request schemas; module-level so deferred annotations resolve
    from pydantic import BaseModel

    class PressureRequest(BaseModel):
        values: dict[str, float] | list[float]

    class TargetRequest(BaseModel):
        orientations: dict[str, list[float]]
        wait: bool = True

    class DisturbanceRequest(BaseModel):
        forces: dict[str, float] | None = None
        estimate: bool | None = None

    class CommitRequest(BaseModel):
        pressures: dict[str, float] | list[float] | None = None
        duration: float = 2.0
        steps: int = 20

except ImportError:  # engine-only use; create_app will fail loudly instead
    BaseModel = None


@dataclass
class _Command:
    id: int
    op: str
    payload: dict
    done: threading.Event = field(default_factory=threading.Event)
    result: dict | None = None


def _as_quat(values, name):
    q = np.asarray(values, dtype=np.float64).reshape(-1)
    if q.shape != (4,):
        raise CommandError(f"orientation for {name!r} must be [w, x, y, z]")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > QUAT_NORM_TOL:
        raise CommandError(f"orientation for {name!r} is not a unit quaternion")
    return q / norm


class SimHost:
    """Plant + estimator scenes, their threads, and the broadcast stream."""

    def __init__(
        self,
        config=None,
        arm=None,
        stream_hz=15.0,
        teach_tol_deg=0.1,
        teach_iterations=6,
        disturb_tol_deg=0.01,
        disturb_iterations=30,
    ):
        if stream_hz <= 0:
            raise SceneError("stream_hz must be positive")
        self.plant = Scene(config, arm=arm)
        self.estimator = Scene(self.plant.config, arm=self.plant.arm)
        self.stream_hz = float(stream_hz)
        self.teach_tol_deg = float(teach_tol_deg)
        self.teach_iterations = int(teach_iterations)
        self.disturb_tol_deg = float(disturb_tol_deg)
        self.disturb_iterations = int(disturb_iterations)

        self._skin_nodes = np.asarray(self.plant.arm.skin.node_indices)
        m = self.plant.num_pressures
        self._pressure_names = list(self.plant.effort_names[:m])
        self._force_names = list(self.plant.effort_names[m:])

        # broadcast stream (one lock guards seq, subscribers, and latest)
        self._stream_lock = threading.Lock()
        self._subscribers = {}
        self._sub_ids = itertools.count()
        self._seq = 0
        self._latest = None  # (dict, rendered text) of the newest snapshot

        # sim-thread state (touched only by the sim thread after start)
        self._commands = queue.SimpleQueue()
        self._command_ids = itertools.count(1)
        self._steps = 0
        self._steps_since_change = 0
        self._residual = None
        self._needs_step = True
        self._stalled = False
        self._ramp = None
        self._t0 = time.monotonic()

        # estimator mailbox (guarded by the condition's lock)
        self._solver_cv = threading.Condition()
        self._teach_ids = itertools.count(1)
        self._teach_request = None  # (id, {name: rotation matrix})
        self._teach_done_id = 0
        self._teach_latest = None
        self._disturb_enabled = False
        self._disturb_latest = None
        self._epoch = 0

        self._stop = threading.Event()
        self._sim_thread = threading.Thread(
            target=self._sim_loop, name="softarm-sim", daemon=True
        )
        self._solver_thread = threading.Thread(
            target=self._solver_loop, name="softarm-solver", daemon=True
        )
        self._started = False
        # an initial snapshot so GET /state answers before the first step
        self._publish_snapshot()

    # --- lifecycle ----------------------------------------------------------

    def start(self):
        if not self._started:
            self._started = True
            self._sim_thread.start()
            self._solver_thread.start()

    def stop(self):
        self._stop.set()
        with self._solver_cv:
            self._solver_cv.notify_all()
        self._commands.put(None)  # wake the sim thread
        if self._started:
            self._sim_thread.join(timeout=10.0)
            self._solver_thread.join(timeout=10.0)
        with self._stream_lock:
            for q in self._subscribers.values():
                q.put(None)

    # --- stream -------------------------------------------------------------

    def subscribe(self):
        q = queue.SimpleQueue()
        with self._stream_lock:
            sid = next(self._sub_ids)
            self._subscribers[sid] = q
        return sid, q

    def unsubscribe(self, sid):
        with self._stream_lock:
            self._subscribers.pop(sid, None)

    def _broadcast(self, message):
        with self._stream_lock:
            self._seq += 1
            message = dict(message, seq=self._seq)
            text = json.dumps(message, separators=(",", ":"))
            for q in self._subscribers.values():
                q.put(text)
            if message["type"] == "snapshot":
                self._latest = (message, text)
        return message

    def latest_snapshot(self):
        with self._stream_lock:
            return self._latest[0]

    def latest_text(self):
        with self._stream_lock:
            return self._latest[1]

    # --- commands (called from network threads) -------------------------------

    def submit(self, op, payload=None, timeout=60.0):
        """Queue a command for the sim thread and wait for its ack."""
        cmd = _Command(id=next(self._command_ids), op=op, payload=payload or {})
        self._commands.put(cmd)
        if not cmd.done.wait(timeout):
            raise CommandError(f"command {op!r} timed out")
        if not cmd.result.get("ok"):
            raise CommandError(cmd.result.get("error", "command failed"))
        return cmd.result

    def solve_targets(self, orientations, wait=True, timeout=120.0):
        """Submit teach targets (newest wins) and optionally await the fit."""
        targets = {}
        for name, values in orientations.items():
            if name not in self.plant.effectors:
                raise CommandError(f"unknown effector {name!r}")
            targets[name] = quat_to_matrix(_as_quat(values, name))
        missing = [n for n in self.plant.effector_order if n not in targets]
        if missing:
            raise CommandError(f"targets required for all effectors; missing {missing}")
        deadline = time.monotonic() + timeout
        with self._solver_cv:
            rid = next(self._teach_ids)
            self._teach_request = (rid, targets)
            self._solver_cv.notify_all()
            if not wait:
                return {"accepted": True, "target_id": rid}
            while self._teach_done_id < rid:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not self._solver_cv.wait(remaining):
                    raise CommandError("teach solve timed out")
            if self._teach_latest is None:  # reset raced the solve
                return {"target_id": rid, "reset": True, "estimate": None}
            return dict(self._teach_latest)

    def teach_estimate(self):
        with self._solver_cv:
            return None if self._teach_latest is None else dict(self._teach_latest)

    # --- sim thread -----------------------------------------------------------

    def _sim_loop(self):
        interval = 1.0 / self.stream_hz
        next_emit = time.monotonic() + interval
        while not self._stop.is_set():
            busy = (self._needs_step and not self._stalled) or self._ramp is not None
            timeout = 0.0 if busy else max(0.0, min(next_emit - time.monotonic(), 0.1))
            self._drain_commands(timeout)
            if self._stop.is_set():
                break
            self._advance_ramp()
            if self._needs_step and not self._stalled:
                self._advance()
            now = time.monotonic()
            if now >= next_emit:
                self._publish_snapshot()
                next_emit += interval
                if next_emit < now:  # fell behind more than one period
                    next_emit = now + interval

    def _drain_commands(self, timeout):
        try:
            cmd = self._commands.get(timeout=timeout) if timeout > 0 else self._commands.get_nowait()
        except queue.Empty:
            return
        while True:
            if cmd is not None:
                self._execute(cmd)
            try:
                cmd = self._commands.get_nowait()
            except queue.Empty:
                return

    def _execute(self, cmd):
        handlers = {
            "set_pressures": self._exec_set_pressures,
            "set_disturbance": self._exec_set_disturbance,
            "commit": self._exec_commit,
            "reset": self._exec_reset,
        }
        try:
            handler = handlers.get(cmd.op)
            if handler is None:
                raise CommandError(f"unknown command {cmd.op!r}")
            detail, mutated = handler(cmd.payload)
            cmd.result = {"ok": True, "id": cmd.id, "command": cmd.op, "detail": detail}
        except (CommandError, SceneError, TeachError) as exc:
            cmd.result = {"ok": False, "id": cmd.id, "command": cmd.op, "error": str(exc)}
            mutated = False
        self._broadcast(dict(cmd.result, type="ack"))
        if mutated:
            self._publish_snapshot()
        cmd.done.set()

    def _mark_dirty(self):
        self._needs_step = True
        self._stalled = False
        self._steps_since_change = 0

    def _effort_vector(self, values, names, current, lo, hi, kind):
        if isinstance(values, dict):
            vec = current.copy()
            for name, value in values.items():
                if name not in names:
                    raise CommandError(f"unknown {kind} {name!r}")
                vec[names.index(name)] = float(value)
        else:
            vec = np.asarray(values, dtype=np.float64).reshape(-1)
            if vec.shape != current.shape:
                raise CommandError(f"need {current.size} {kind} values")
        bad = (vec < lo) | (vec > hi)
        if np.any(bad):
            name = names[int(np.argmax(bad))]
            raise CommandError(f"{kind} {name!r} outside bounds")
        return vec

    def _exec_set_pressures(self, payload):
        values = payload.get("values")
        if values is None:
            raise CommandError("missing 'values'")
        lo, hi = self.plant.bounds()
        m = self.plant.num_pressures
        vec = self._effort_vector(
            values, self._pressure_names, self.plant.pressures, lo[:m], hi[:m], "chamber"
        )
        self._ramp = None
        self.plant.set_pressures(vec)
        self._mark_dirty()
        return {"pressures": dict(zip(self._pressure_names, vec.tolist()))}, True

    def _exec_set_disturbance(self, payload):
        detail = {}
        mutated = False
        forces = payload.get("forces")
        if forces is not None:
            lo, hi = self.plant.bounds()
            m = self.plant.num_pressures
            vec = self._effort_vector(
                forces, self._force_names, self.plant.force_efforts, lo[m:], hi[m:], "force"
            )
            self.plant.set_forces(vec)
            self._mark_dirty()
            detail["forces"] = dict(zip(self._force_names, vec.tolist()))
            mutated = True
        estimate = payload.get("estimate")
        if estimate is not None:
            with self._solver_cv:
                self._disturb_enabled = bool(estimate)
                if not self._disturb_enabled:
                    self._disturb_latest = None
                self._solver_cv.notify_all()
            detail["estimate"] = bool(estimate)
        return detail, mutated

    def _exec_commit(self, payload):
        pressures = payload.get("pressures")
        if pressures is None:
            raise CommandError("no pressure estimate to commit")
        lo, hi = self.plant.bounds()
        m = self.plant.num_pressures
        vec = self._effort_vector(
            pressures, self._pressure_names, self.plant.pressures, lo[:m], hi[:m], "chamber"
        )
        state = TeachState(
            targets={}, pressures=vec, residual_deg=0.0, converged=True, flagged=False
        )
        schedule, dt = teach_commit(
            self.plant, state, duration=payload.get("duration", 2.0),
            steps=payload.get("steps", 20),
        )
        self._ramp = {"rows": schedule, "index": 0, "interval": dt,
                      "due": time.monotonic()}
        return {
            "steps": len(schedule),
            "interval": dt,
            "target": dict(zip(self._pressure_names, schedule[-1].tolist())),
        }, True

    def _exec_reset(self, payload):
        self.plant.reset()
        self._ramp = None
        self._residual = None
        self._steps = 0
        self._mark_dirty()
        with self._solver_cv:
            self._epoch += 1
            self._teach_request = None
            self._teach_done_id = next(self._teach_ids) - 1
            self._teach_latest = None
            self._disturb_enabled = False
            self._disturb_latest = None
            self._solver_cv.notify_all()
        return {"reset": True}, True

    def _advance_ramp(self):
        if self._ramp is None or time.monotonic() < self._ramp["due"]:
            return
        ramp = self._ramp
        self.plant.set_pressures(ramp["rows"][ramp["index"]])
        ramp["index"] += 1
        if ramp["index"] >= len(ramp["rows"]):
            self._ramp = None
        else:
            ramp["due"] = time.monotonic() + ramp["interval"]
        self._mark_dirty()

    def _settle_target(self):
        return max(
            self.plant.config.settle_rel_tol * self.plant.load_scale(), 1e-9
        )

    def _advance(self):
        scene = self.plant
        kin = fem.kinematics(scene.cache, scene.state.q, scene.state.rotations)
        self._residual = fem.residual_norm(
            scene.cache, scene.residual(scene.state.q, kin)
        )
        if self._residual <= self._settle_target():
            self._needs_step = False
            return
        if self._steps_since_change >= scene.config.settle_max_steps:
            self._stalled = True
            return
        try:
            report = scene.step()
        except NonConvergenceError:
            self._stalled = True  # hold position until the load changes
            return
        self._steps += 1
        self._steps_since_change += 1
        self._residual = report.residual_after
        if report.residual_after <= self._settle_target():
            self._needs_step = False

    def _publish_snapshot(self):
        scene = self.plant
        q = scene.state.q
        quats = {
            name: [float(c) for c in matrix_to_quat(rot)]
            for name, rot in scene.frame_rotations().items()
        }
        pressures = scene.pressures
        forces = scene.force_efforts
        with self._solver_cv:
            teach = self._teach_latest
            disturbance = {
                "estimating": self._disturb_enabled,
                "estimate": self._disturb_latest,
            }
        ramp = None
        if self._ramp is not None:
            ramp = {
                "remaining": len(self._ramp["rows"]) - self._ramp["index"],
                "interval": self._ramp["interval"],
            }
        snapshot = {
            "type": "snapshot",
            "step": self._steps,
            "t": round(time.monotonic() - self._t0, 4),
            "steady": not self._needs_step and not self._stalled and self._ramp is None,
            "stalled": self._stalled,
            "residual": self._residual,
            "pressures": dict(zip(self._pressure_names, pressures.tolist())),
            "forces": dict(zip(self._force_names, forces.tolist())),
            "orientations": quats,
            "tip": [float(c) for c in scene.tip_position()],
            "ramp": ramp,
            "teach": teach,
            "disturbance": disturbance,
            "skin": [
                [round(float(c), 6) for c in row] for row in q[self._skin_nodes]
            ],
        }
        return self._broadcast(snapshot)

    # --- estimator thread -------------------------------------------------------

    def _solver_loop(self):
        last_disturb_step = -1
        while not self._stop.is_set():
            with self._solver_cv:
                request = self._teach_request
                self._teach_request = None
                disturb = self._disturb_enabled and request is None
                epoch = self._epoch
                if request is None and not disturb:
                    self._solver_cv.wait(timeout=0.1)
                    continue
            if request is not None:
                self._solve_teach(request, epoch)
                continue
            snap = self.latest_snapshot()
            if snap["step"] == last_disturb_step:
                time.sleep(0.02)
                continue
            last_disturb_step = snap["step"]
            self._solve_disturbance(snap, epoch)

    def _solve_teach(self, request, epoch):
        rid, targets = request
        result = teach_step(
            self.estimator,
            targets,
            tol_deg=self.teach_tol_deg,
            max_iterations=self.teach_iterations,
        )
        detail = result.to_dict()
        detail["target_id"] = rid
        with self._solver_cv:
            if epoch == self._epoch:
                self._teach_latest = detail
            self._teach_done_id = max(self._teach_done_id, rid)
            self._solver_cv.notify_all()
        self._broadcast(
            {"type": "ack", "command": "set_targets", "id": rid,
             "ok": epoch == self._epoch, "detail": detail}
        )

    def _solve_disturbance(self, snap, epoch):
        frame = SensorFrame(
            t=snap["t"],
            pressures=np.array([snap["pressures"][n] for n in self._pressure_names]),
            orientations={
                name: np.asarray(qv, dtype=np.float64)
                for name, qv in snap["orientations"].items()
            },
        )
        estimate = estimate_disturbance(
            self.estimator,
            frame,
            tol_deg=self.disturb_tol_deg,
            max_iterations=self.disturb_iterations,
        )
        detail = estimate.to_dict()
        detail["source_step"] = snap["step"]
        with self._solver_cv:
            if epoch == self._epoch and self._disturb_enabled:
                self._disturb_latest = detail

    # --- static descriptions ------------------------------------------------------

    def mesh_info(self):
        arm = self.plant.arm
        lo, hi = self.plant.bounds()
        return {
            "schema": SCHEMA_VERSION,
            "skin_nodes": self._skin_nodes.tolist(),
            "triangles": arm.skin.triangles.tolist(),
            "effectors": list(self.plant.effector_order),
            "effort_names": list(self.plant.effort_names),
            "pressure_names": self._pressure_names,
            "force_names": self._force_names,
            "bounds": {"lo": lo.tolist(), "hi": hi.tolist()},
            "tip_rest": [float(c) for c in self.plant.tip_position(self.plant.mesh.nodes)],
            "node_count": self.plant.mesh.num_nodes,
            "tet_count": self.plant.mesh.num_tets,
        }

    def config_info(self):
        return {
            "schema": SCHEMA_VERSION,
            "scene": self.plant.config.to_dict(),
            "stream_hz": self.stream_hz,
            "teach_tol_deg": self.teach_tol_deg,
            "teach_iterations": self.teach_iterations,
            "disturb_tol_deg": self.disturb_tol_deg,
            "disturb_iterations": self.disturb_iterations,
        }


# --- HTTP layer -------------------------------------------------------------------


def create_app(config=None, arm=None, **host_kwargs):
    """Build the FastAPI app around a fresh :class:`SimHost`."""
    from fastapi import FastAPI, Request
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import JSONResponse, Response, StreamingResponse

    host = SimHost(config, arm=arm, **host_kwargs)

    @asynccontextmanager
    async def lifespan(app):
        host.start()
        try:
            yield
        finally:
            host.stop()

    app = FastAPI(title="softarm service", lifespan=lifespan)
    app.state.host = host
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(CommandError)
    async def _command_error(request: Request, exc: CommandError):
        return JSONResponse(
            status_code=400,
            content={"error": {"type": "command", "message": str(exc)}},
        )

    @app.get("/health")
    def health():
        return {"status": "ok", "step": host.latest_snapshot()["step"]}

    @app.get("/state")
    def state():
        return Response(host.latest_text(), media_type="application/json")

    @app.get("/mesh")
    def mesh():
        return host.mesh_info()

    @app.get("/config")
    def config_view():
        return host.config_info()

    @app.post("/pressures")
    def set_pressures(body: PressureRequest):
        return host.submit("set_pressures", {"values": body.values})

    @app.post("/targets")
    def set_targets(body: TargetRequest):
        return host.solve_targets(body.orientations, wait=body.wait)

    @app.post("/disturbance")
    def set_disturbance(body: DisturbanceRequest):
        return host.submit(
            "set_disturbance", {"forces": body.forces, "estimate": body.estimate}
        )

    @app.post("/teach/commit")
    def commit(body: CommitRequest):
        pressures = body.pressures
        if pressures is None:
            estimate = host.teach_estimate()
            if estimate is None:
                raise CommandError("no teach estimate available to commit")
            if estimate["flagged"]:
                raise CommandError("latest teach estimate is flagged; not committing")
            pressures = estimate["pressures"]
        return host.submit(
            "commit",
            {"pressures": pressures, "duration": body.duration, "steps": body.steps},
        )

    @app.post("/reset")
    def reset():
        return host.submit("reset")

    def _sse(sid, q):
        try:
            yield "retry: 1000\n\n"
            while True:
                try:
                    text = q.get(timeout=15.0)
                except queue.Empty:
                    yield ": keepalive\n\n"
                    continue
                if text is None:
                    return
                yield f"data: {text}\n\n"
        finally:
            host.unsubscribe(sid)

    @app.get("/stream")
    def stream():
        sid, q = host.subscribe()
        return StreamingResponse(
            _sse(sid, q),
            media_type="text/event-stream",
            headers={"Cache-Control": "no-cache", "X-Accel-Buffering": "no"},
        )

    return app


def serve(config=None, host="127.0.0.1", port=8000, arm=None, **host_kwargs):
    """Run the service under uvicorn (blocking)."""
    import uvicorn

    app = create_app(config, arm=arm, **host_kwargs)
    uvicorn.run(app, host=host, port=port, log_level="warning")
