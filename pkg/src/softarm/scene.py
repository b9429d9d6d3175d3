"""Scene assembly: mesh, FEM, actuation, fibers and observers as one unit.

A Scene owns the simulation state of one arm. Its effort vector is ordered
pressures-first (one per chamber, segment-major) followed by the configured
point-force actuators. Efforts are stored in commanded units; the
per-chamber efficiency factors and the force scale are folded into the
actuation rows, so bounds, equality pins and logs all speak commanded
pressures (Pa) and commanded forces (N).

The same class serves as the estimation model and as the synthetic twin
standing in for the physical arm: a twin is simply a Scene whose config
carries the hidden ground-truth modulus scale and efficiency factors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .actuators import (
    DEFAULT_FORCE_BOUND,
    DEFAULT_PRESSURE_MAX,
    FIBER_STIFFNESS,
    ActuationSet,
    FiberSet,
    ForceActuator,
    PressureActuator,
    TetherSpring,
)
from .armgen import ArmParams, generate_arm
from .fem import ElementCache, ExtraPattern, FemState, Material
from .mesh import embed_points
from .observer import OrientationEffector, delta_rotation


class SceneError(Exception):
    pass


DEFAULT_SOFT_MODULUS = 2.0e5    # Pa
DEFAULT_RIGID_MODULUS = 2.4e6   # Pa
DEFAULT_POISSON = 0.45
DEFAULT_DENSITY = 1070.0        # kg/m^3
DEFAULT_GRAVITY = 9.81          # m/s^2, acting along -z

CALIBRATION_MODES = ("pressure-map", "force-scale")


@dataclass
class ForceActuatorSpec:
    """A point-force effort along a local axis of one rigid section."""

    name: str
    frame: str = "e2"
    direction: tuple = (1.0, 0.0, 0.0)
    bound: float = DEFAULT_FORCE_BOUND

    def __post_init__(self):
        self.direction = tuple(float(c) for c in self.direction)
        if len(self.direction) != 3 or not any(self.direction):
            raise SceneError(f"{self.name}: direction must be a nonzero 3-vector")
        if self.bound <= 0:
            raise SceneError(f"{self.name}: force bound must be positive")

    def to_dict(self):
        return {
            "name": self.name,
            "frame": self.frame,
            "direction": list(self.direction),
            "bound": self.bound,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            frame=d.get("frame", "e2"),
            direction=tuple(d.get("direction", (1.0, 0.0, 0.0))),
            bound=float(d.get("bound", DEFAULT_FORCE_BOUND)),
        )


def _default_force_actuators():
    # disturbance components at the tip along its local x and y axes
    return (
        ForceActuatorSpec(name="f_e2_x", frame="e2", direction=(1.0, 0.0, 0.0)),
        ForceActuatorSpec(name="f_e2_y", frame="e2", direction=(0.0, 1.0, 0.0)),
    )


@dataclass
class SceneConfig:
    """Everything needed to build a Scene, JSON round-trippable."""

    arm: ArmParams = field(default_factory=ArmParams)
    soft_modulus: float = DEFAULT_SOFT_MODULUS
    rigid_modulus: float = DEFAULT_RIGID_MODULUS
    poisson_ratio: float = DEFAULT_POISSON
    density: float = DEFAULT_DENSITY
    gravity: float = DEFAULT_GRAVITY
    pressure_max: float = DEFAULT_PRESSURE_MAX
    fiber_stiffness: float = FIBER_STIFFNESS
    force_actuators: tuple = field(default_factory=_default_force_actuators)
    # calibration state: modulus scale alpha, per-chamber efficiencies nu
    # (commanded pressure p acts on the walls as p / nu), force scale for
    # commanded point forces, and which calibration produced them
    modulus_scale: float = 1.0
    chamber_efficiencies: tuple = None
    force_scale: float = 1.0
    calibration_mode: str = "pressure-map"
    # axis masks per effector name; missing names default to bending-only
    effector_masks: dict = field(default_factory=dict)
    # solver tolerances
    settle_rel_tol: float = 1e-6
    settle_max_steps: int = 60

    def __post_init__(self):
        if isinstance(self.arm, dict):
            self.arm = ArmParams.from_dict(self.arm)
        self.force_actuators = tuple(
            ForceActuatorSpec.from_dict(s) if isinstance(s, dict) else s
            for s in self.force_actuators
        )
        names = [s.name for s in self.force_actuators]
        if len(set(names)) != len(names):
            raise SceneError("duplicate force actuator names")
        n_chambers = self.arm.segment_count * self.arm.chambers_per_segment
        if self.chamber_efficiencies is None:
            self.chamber_efficiencies = (1.0,) * n_chambers
        self.chamber_efficiencies = tuple(float(v) for v in self.chamber_efficiencies)
        if len(self.chamber_efficiencies) != n_chambers:
            raise SceneError(
                f"need {n_chambers} chamber efficiencies, got {len(self.chamber_efficiencies)}"
            )
        if any(v <= 0 for v in self.chamber_efficiencies):
            raise SceneError("chamber efficiencies must be positive")
        if self.modulus_scale <= 0:
            raise SceneError("modulus scale must be positive")
        if self.force_scale <= 0:
            raise SceneError("force scale must be positive")
        if self.calibration_mode not in CALIBRATION_MODES:
            raise SceneError(f"calibration_mode must be one of {CALIBRATION_MODES}")
        if self.gravity < 0:
            raise SceneError("gravity magnitude must be non-negative")
        if self.pressure_max <= 0:
            raise SceneError("pressure_max must be positive")
        self.effector_masks = {
            k: tuple(int(a) for a in v) for k, v in self.effector_masks.items()
        }

    def to_dict(self):
        return {
            "arm": self.arm.to_dict(),
            "soft_modulus": self.soft_modulus,
            "rigid_modulus": self.rigid_modulus,
            "poisson_ratio": self.poisson_ratio,
            "density": self.density,
            "gravity": self.gravity,
            "pressure_max": self.pressure_max,
            "fiber_stiffness": self.fiber_stiffness,
            "force_actuators": [s.to_dict() for s in self.force_actuators],
            "modulus_scale": self.modulus_scale,
            "chamber_efficiencies": list(self.chamber_efficiencies),
            "force_scale": self.force_scale,
            "calibration_mode": self.calibration_mode,
            "effector_masks": {k: list(v) for k, v in self.effector_masks.items()},
            "settle_rel_tol": self.settle_rel_tol,
            "settle_max_steps": self.settle_max_steps,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "force_actuators" in d:
            d["force_actuators"] = tuple(
                ForceActuatorSpec.from_dict(s) for s in d["force_actuators"]
            )
        if "chamber_efficiencies" in d and d["chamber_efficiencies"] is not None:
            d["chamber_efficiencies"] = tuple(d["chamber_efficiencies"])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SceneError(f"bad scene config: {exc}") from exc

    def replace(self, **kwargs):
        d = self.to_dict()
        d.update(kwargs)
        return SceneConfig.from_dict(d)


class Scene:
    """One simulated arm: geometry, materials, actuation and observers."""

    def __init__(self, config=None, arm=None):
        self.config = config or SceneConfig()
        cfg = self.config
        self.arm = arm if arm is not None else generate_arm(cfg.arm)
        if arm is not None and arm.params != cfg.arm:
            raise SceneError("supplied arm geometry does not match the config")
        mesh = self.arm.mesh

        alpha = cfg.modulus_scale
        materials = {
            0: Material(alpha * cfg.soft_modulus, cfg.poisson_ratio, cfg.density),
            1: Material(alpha * cfg.rigid_modulus, cfg.poisson_ratio, cfg.density),
        }
        self.cache = ElementCache(mesh, materials, gravity=(0.0, 0.0, -cfg.gravity))
        self.state = FemState(self.cache)

        self.effectors = {}
        for name, nodes in zip(self.arm.effector_names, self.arm.effector_nodes):
            mask = cfg.effector_masks.get(name, (0, 1))
            self.effectors[name] = OrientationEffector.from_mesh(name, mesh, nodes, mask=mask)
        self.effector_order = list(self.arm.effector_names)

        self._frame_points = {
            name: embed_points(mesh, point[None, :])
            for name, point in zip(self.arm.effector_names, self.arm.effector_points)
        }
        self.tip_embedding = self._frame_points[self.effector_order[-1]]

        pressures = [
            PressureActuator(f"p{i + 1}", cav, lo=0.0, hi=cfg.pressure_max)
            for i, cav in enumerate(self.arm.cavities)
        ]
        forces = []
        for spec in cfg.force_actuators:
            if spec.frame not in self.effectors:
                raise SceneError(f"{spec.name}: unknown frame {spec.frame!r}")
            forces.append(
                ForceActuator(
                    spec.name,
                    self._frame_points[spec.frame],
                    np.asarray(spec.direction),
                    frame=spec.frame,
                    lo=-spec.bound,
                    hi=spec.bound,
                )
            )
        self.actuation = ActuationSet(pressures, forces)
        self.efforts = np.zeros(self.actuation.num_efforts)
        # commanded -> wall/physical conversion folded into the H rows
        self._row_scale = np.concatenate(
            [
                1.0 / np.asarray(cfg.chamber_efficiencies),
                np.full(len(forces), cfg.force_scale),
            ]
        )

        if cfg.fiber_stiffness > 0 and len(self.arm.fiber_points):
            self.fibers = FiberSet(
                mesh,
                self.arm.fiber_points,
                self.arm.fiber_loops,
                stiffness=alpha * cfg.fiber_stiffness,
            )
        else:
            self.fibers = None
        self.tether = None
        self._rebuild_extra_pattern()

    # --- wiring ---------------------------------------------------------

    def _rebuild_extra_pattern(self):
        rows, cols = [], []
        if self.fibers is not None:
            rows.append(self.fibers.stiffness_rows)
            cols.append(self.fibers.stiffness_cols)
        if self.tether is not None:
            rows.append(self.tether.stiffness_rows)
            cols.append(self.tether.stiffness_cols)
        for act in self.actuation.pressures:
            rows.append(act.stiffness_rows)
            cols.append(act.stiffness_cols)
        if rows:
            self._extra_pattern = ExtraPattern(
                self.cache, np.concatenate(rows), np.concatenate(cols)
            )
        else:
            self._extra_pattern = None

    def _extra_values(self, q):
        vals = []
        if self.fibers is not None:
            vals.append(self.fibers.stiffness_values(q))
        if self.tether is not None:
            vals.append(self.tether.stiffness_values(q))
        # follower-load stiffness: pressure tracks the deformed surface, and
        # leaving its Jacobian out of the tangent stalls Newton at high load
        for i, act in enumerate(self.actuation.pressures):
            wall = self.efforts[i] * self._row_scale[i]
            vals.append(act.stiffness_values(q, wall))
        return np.concatenate(vals) if vals else None

    def _extra_stiffness(self, q):
        if self._extra_pattern is None:
            return None
        return (self._extra_pattern, self._extra_values(q))

    @property
    def mesh(self):
        return self.arm.mesh

    @property
    def num_pressures(self):
        return self.actuation.num_pressures

    @property
    def effort_names(self):
        return self.actuation.names

    def bounds(self):
        """(lo, hi) per effort, commanded units."""
        return self.actuation.bounds()

    # --- efforts ----------------------------------------------------------

    def set_efforts(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.efforts.shape:
            raise SceneError(f"effort vector must have shape {self.efforts.shape}")
        self.efforts = values.copy()

    def set_pressures(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.num_pressures,):
            raise SceneError(f"need {self.num_pressures} pressures")
        self.efforts[: self.num_pressures] = values

    def set_forces(self, values):
        values = np.asarray(values, dtype=np.float64)
        k = self.actuation.num_efforts - self.num_pressures
        if values.shape != (k,):
            raise SceneError(f"need {k} force efforts")
        self.efforts[self.num_pressures :] = values

    @property
    def pressures(self):
        return self.efforts[: self.num_pressures].copy()

    @property
    def force_efforts(self):
        return self.efforts[self.num_pressures :].copy()

    # --- tether (external gauge cord; not scaled by the modulus) ---------

    def attach_tether(self, anchor, stiffness, rest_length=None, point=None):
        """Cord from an embedded point (default: the tip) to a world anchor."""
        embedding = (
            self.tip_embedding
            if point is None
            else embed_points(self.mesh, np.asarray(point)[None, :])
        )
        self.tether = TetherSpring(
            self.mesh, embedding, anchor, stiffness, rest_length=rest_length
        )
        self._rebuild_extra_pattern()
        return self.tether

    def detach_tether(self):
        self.tether = None
        self._rebuild_extra_pattern()

    # --- observation -------------------------------------------------------

    def frame_rotations(self, q=None):
        q = self.state.q if q is None else q
        return {name: eff.orientation(q) for name, eff in self.effectors.items()}

    def orientations(self):
        return self.frame_rotations()

    def tip_position(self, q=None):
        q = self.state.q if q is None else q
        return self.tip_embedding.positions(self.mesh, q)[0]

    def masked_axes(self):
        """Stacked (effector name, axis) rows of the orientation residual."""
        out = []
        for name in self.effector_order:
            for axis in self.effectors[name].mask:
                out.append((name, axis))
        return out

    def orientation_residual(self, targets, q=None):
        """Masked rotation-vector residuals target vs current, stacked."""
        rots = self.frame_rotations(q)
        rows = []
        for name in self.effector_order:
            eff = self.effectors[name]
            delta = delta_rotation(targets[name], rots[name], mask=eff.mask)
            rows.extend(delta[list(eff.mask)])
        return np.asarray(rows)

    def residual_angles(self, targets, q=None):
        """Masked residual angle (rad) per effector, in effector order."""
        rots = self.frame_rotations(q)
        out = []
        for name in self.effector_order:
            eff = self.effectors[name]
            delta = delta_rotation(targets[name], rots[name], mask=eff.mask)
            out.append(float(np.linalg.norm(delta)))
        return np.asarray(out)

    # --- loads ------------------------------------------------------------

    def assemble_h(self, q=None):
        """Actuation rows at q, commanded units (efficiencies folded in)."""
        q = self.state.q if q is None else q
        h = self.actuation.assemble_h(self.mesh, q, self.frame_rotations(q))
        return h * self._row_scale[:, None]

    def actuation_forces(self, q=None):
        h = self.assemble_h(q)
        return (h.T @ self.efforts).reshape(-1, 3)

    def residual(self, q, kin):
        """Total nodal out-of-balance forces at q, shape (n, 3)."""
        r = fem.elastic_forces(self.cache, kin) + self.cache.gravity_forces
        r = r + self.actuation_forces(q)
        if self.fibers is not None:
            r = r + self.fibers.forces(q)
        if self.tether is not None:
            r = r + self.tether.forces(q)
        return r

    def load_scale(self):
        """Magnitude of the applied loads, the settle tolerance reference."""
        scale = float(np.linalg.norm(self.cache.gravity_forces))
        scale += float(np.linalg.norm(self.actuation_forces()))
        if self.tether is not None:
            scale += self.tether.tension(self.state.q)
        return scale

    # --- stepping -----------------------------------------------------------

    def step(self, return_tangent=False):
        """One quasi-static step toward equilibrium under current efforts."""
        return fem.static_step(
            self.cache,
            self.state,
            self.residual,
            self._extra_stiffness,
            return_tangent=return_tangent,
        )

    def settle(self, rel_tol=None, max_steps=None):
        """Step until equilibrium at the current efforts."""
        return fem.settle(
            self.cache,
            self.state,
            self.residual,
            self._extra_stiffness,
            load_scale=self.load_scale(),
            rel_tol=self.config.settle_rel_tol if rel_tol is None else rel_tol,
            max_steps=self.config.settle_max_steps if max_steps is None else max_steps,
        )

    def tangent(self):
        """Factorized tangent stiffness at the current positions."""
        extra = self._extra_stiffness(self.state.q)
        if extra is not None:
            return fem.assemble_tangent(self.cache, self.state, extra_pattern=extra)
        return fem.assemble_tangent(self.cache, self.state)

    def reset(self):
        self.state.reset()
        self.efforts[:] = 0.0
