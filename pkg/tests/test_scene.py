"""Scene wiring: config serialization, effort plumbing, settling physics."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import COARSE_PARAMS
from softarm.observer import geodesic_angle
from softarm.scene import ForceActuatorSpec, Scene, SceneConfig, SceneError


class TestConfigValidation:
    def test_duplicate_force_actuator_names(self):
        spec = ForceActuatorSpec(name="fx")
        with pytest.raises(SceneError, match="duplicate"):
            SceneConfig(force_actuators=(spec, spec))

    def test_efficiency_count(self):
        with pytest.raises(SceneError, match="need 6 chamber efficiencies"):
            SceneConfig(arm=COARSE_PARAMS, chamber_efficiencies=(1.0, 1.0))

    def test_efficiency_positive(self):
        with pytest.raises(SceneError, match="positive"):
            SceneConfig(arm=COARSE_PARAMS, chamber_efficiencies=(0.0,) * 6)

    def test_modulus_scale_positive(self):
        with pytest.raises(SceneError, match="modulus scale"):
            SceneConfig(modulus_scale=-1.0)

    def test_force_scale_positive(self):
        with pytest.raises(SceneError, match="force scale"):
            SceneConfig(force_scale=0.0)

    def test_calibration_mode_known(self):
        with pytest.raises(SceneError, match="calibration_mode"):
            SceneConfig(calibration_mode="vibes")

    def test_gravity_non_negative(self):
        with pytest.raises(SceneError, match="gravity"):
            SceneConfig(gravity=-9.81)

    def test_pressure_max_positive(self):
        with pytest.raises(SceneError, match="pressure_max"):
            SceneConfig(pressure_max=0.0)

    def test_force_spec_direction_nonzero(self):
        with pytest.raises(SceneError, match="nonzero 3-vector"):
            ForceActuatorSpec(name="fx", direction=(0.0, 0.0, 0.0))

    def test_force_spec_bound_positive(self):
        with pytest.raises(SceneError, match="bound"):
            ForceActuatorSpec(name="fx", bound=0.0)

    def test_force_spec_unknown_frame(self, coarse_arm):
        cfg = SceneConfig(
            arm=COARSE_PARAMS,
            force_actuators=(ForceActuatorSpec(name="fx", frame="e9"),),
        )
        with pytest.raises(SceneError, match="unknown frame"):
            Scene(cfg, arm=coarse_arm)


class TestConfigSerialization:
    def test_json_round_trip(self):
        cfg = SceneConfig(
            arm=COARSE_PARAMS,
            modulus_scale=1.3,
            chamber_efficiencies=(0.9, 1.1, 1.0, 0.95, 1.05, 1.0),
            effector_masks={"e2": (0, 1, 2)},
            force_actuators=(ForceActuatorSpec(name="fx", frame="e1", bound=2.5),),
            settle_max_steps=42,
        )
        again = SceneConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_json_deterministic(self):
        cfg = SceneConfig(arm=COARSE_PARAMS)
        assert cfg.to_json() == SceneConfig.from_json(cfg.to_json()).to_json()

    def test_bad_json_rejected(self):
        with pytest.raises(SceneError, match="bad scene config"):
            SceneConfig.from_json("{not json")

    def test_replace_is_a_modified_copy(self):
        cfg = SceneConfig(arm=COARSE_PARAMS)
        other = cfg.replace(modulus_scale=1.5)
        assert other.modulus_scale == 1.5
        assert cfg.modulus_scale == 1.0
        assert other.arm == cfg.arm


class TestSceneBasics:
    def test_arm_params_must_match_config(self, coarse_arm):
        with pytest.raises(SceneError, match="does not match"):
            Scene(SceneConfig(), arm=coarse_arm)

    def test_effort_layout(self, coarse_scene):
        assert coarse_scene.effort_names == [
            "p1", "p2", "p3", "p4", "p5", "p6", "f_e2_x", "f_e2_y",
        ]
        assert coarse_scene.num_pressures == 6
        assert_allclose(coarse_scene.efforts, np.zeros(8))
        lo, hi = coarse_scene.bounds()
        assert_allclose(lo, [0, 0, 0, 0, 0, 0, -5, -5])
        assert_allclose(hi, [65e3] * 6 + [5, 5])

    def test_effort_setters_validate_shape(self, coarse_scene):
        with pytest.raises(SceneError, match="shape"):
            coarse_scene.set_efforts(np.zeros(3))
        with pytest.raises(SceneError, match="6 pressures"):
            coarse_scene.set_pressures(np.zeros(5))
        with pytest.raises(SceneError, match="2 force efforts"):
            coarse_scene.set_forces(np.zeros(3))

    def test_effort_views_are_copies(self, coarse_scene):
        coarse_scene.set_pressures([1e3, 0, 0, 0, 0, 0])
        p = coarse_scene.pressures
        p[0] = 99.0
        assert coarse_scene.efforts[0] == 1e3
        f = coarse_scene.force_efforts
        f[0] = 99.0
        assert coarse_scene.efforts[6] == 0.0

    def test_rest_orientations_are_identity(self, coarse_scene):
        for rot in coarse_scene.frame_rotations().values():
            assert_allclose(rot, np.eye(3), atol=1e-12)

    def test_tip_point_sits_on_axis_near_the_top(self, coarse_scene):
        tip = coarse_scene.tip_position()
        z_max = coarse_scene.mesh.nodes[:, 2].max()
        assert tip[2] > 0.8 * z_max
        assert np.hypot(tip[0], tip[1]) < COARSE_PARAMS.base_radius

    def test_effector_mask_override(self, make_coarse_scene):
        scene = make_coarse_scene(effector_masks={"e2": (0, 1, 2)})
        assert scene.effectors["e2"].mask == (0, 1, 2)
        assert len(scene.masked_axes()) == 5

    def test_reset_restores_rest_exactly(self, coarse_scene):
        coarse_scene.set_pressures([15e3, 0, 0, 0, 0, 0])
        coarse_scene.settle()
        assert not np.array_equal(coarse_scene.state.q, coarse_scene.mesh.nodes)
        coarse_scene.reset()
        assert np.array_equal(coarse_scene.state.q, coarse_scene.mesh.nodes)
        assert_allclose(coarse_scene.efforts, np.zeros(8))

    def test_step_reports_and_reuses_tangent(self, coarse_scene):
        coarse_scene.set_pressures([10e3, 0, 0, 0, 0, 0])
        report, tangent = coarse_scene.step(return_tangent=True)
        assert report.residual_after < report.residual_before
        x = tangent.solve(np.zeros((coarse_scene.mesh.num_nodes, 3)))
        assert_allclose(x, 0.0, atol=0.0)


class TestScenePhysics:
    def test_zero_gravity_rest_is_equilibrium(self, make_coarse_scene):
        scene = make_coarse_scene(gravity=0.0)
        before = scene.state.q.copy()
        report = scene.settle()
        assert report.converged
        assert report.steps == 0
        assert np.array_equal(scene.state.q, before)

    def test_gravity_sags_the_tip(self, coarse_scene):
        z_rest = coarse_scene.tip_position()[2]
        report = coarse_scene.settle()
        assert report.converged
        drop = z_rest - coarse_scene.tip_position()[2]
        assert 1e-6 < drop < 0.05

    def test_settling_is_deterministic(self, make_coarse_scene):
        results = []
        for _ in range(2):
            scene = make_coarse_scene()
            scene.set_pressures([20e3, 0, 0, 5e3, 0, 0])
            scene.settle()
            results.append(scene.state.q.copy())
        assert np.array_equal(results[0], results[1])

    def test_efficiency_rescales_commanded_pressure(self, make_coarse_scene):
        derated = make_coarse_scene(chamber_efficiencies=(0.5, 1, 1, 1, 1, 1))
        derated.set_pressures([10e3, 0, 0, 0, 0, 0])
        derated.settle()

        unit = make_coarse_scene()
        unit.set_pressures([20e3, 0, 0, 0, 0, 0])
        unit.settle()
        assert np.array_equal(derated.state.q, unit.state.q)

    def test_force_scale_rescales_commanded_force(self, make_coarse_scene):
        scaled = make_coarse_scene(force_scale=2.0)
        scaled.set_forces([1.0, 0.0])
        scaled.settle()

        unit = make_coarse_scene()
        unit.set_forces([2.0, 0.0])
        unit.settle()
        assert np.array_equal(scaled.state.q, unit.state.q)

    def test_stiffer_modulus_bends_less(self, make_coarse_scene):
        angles = {}
        for scale in (1.0, 2.0):
            scene = make_coarse_scene(modulus_scale=scale)
            scene.set_pressures([25e3, 0, 0, 0, 0, 0])
            scene.settle()
            angles[scale] = geodesic_angle(scene.orientations()["e2"], np.eye(3))
        assert angles[2.0] < 0.75 * angles[1.0]

    def test_tether_pulls_tip_toward_anchor(self, make_coarse_scene):
        plain = make_coarse_scene()
        plain.settle()
        free_tip = plain.tip_position()

        scene = make_coarse_scene()
        anchor = np.array([0.15, 0.0, free_tip[2]])
        tether = scene.attach_tether(anchor, stiffness=2e4, rest_length=0.0)
        assert scene.tether is tether
        scene.settle()
        pulled_tip = scene.tip_position()
        assert pulled_tip[0] > free_tip[0] + 1e-4
        assert tether.tension(scene.state.q) > 0.0

        scene.detach_tether()
        assert scene.tether is None
        scene.reset()
        scene.settle()
        assert_allclose(scene.tip_position(), free_tip, atol=1e-12)

    def test_load_scale_tracks_applied_loads(self, coarse_scene):
        gravity_only = coarse_scene.load_scale()
        assert gravity_only > 0.0
        coarse_scene.set_pressures([20e3, 0, 0, 0, 0, 0])
        assert coarse_scene.load_scale() > gravity_only
