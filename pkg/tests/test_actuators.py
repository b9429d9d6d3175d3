"""Effort-to-force maps: cavity pressure, point forces, fibers, tether."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from softarm.actuators import (
    ActuationError,
    ActuationSet,
    FiberSet,
    ForceActuator,
    PressureActuator,
    TetherSpring,
    force_row,
    pressure_row,
    pressure_stiffness_pattern,
    pressure_stiffness_values,
)
from softarm.armgen import generate_arm
from softarm.mesh import SurfaceMesh, TetMesh, embed_points
from softarm.observer import rotvec_to_matrix
from conftest import COARSE_PARAMS
from oracles import rotation_about_z
from rigs import box_mesh, hoop_ring_body, ring_bulge, unit_tet_mesh


def closed_tet_surface():
    return SurfaceMesh(
        node_indices=np.arange(4),
        triangles=np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]),
        closed=True,
    )


class TestPressureRow:
    def test_single_triangle_analytic(self):
        nodes = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        surface = SurfaceMesh(node_indices=np.arange(3), triangles=np.array([[0, 1, 2]]))
        row = pressure_row(surface, nodes).reshape(-1, 3)
        assert_allclose(row, np.full((3, 1), 1.0) * [[0.0, 0.0, 1.0 / 6.0]], atol=1e-15)

    def test_closed_surface_sums_to_zero(self, rng):
        mesh = unit_tet_mesh()
        surface = closed_tet_surface()
        q = mesh.nodes + 0.1 * rng.standard_normal(mesh.nodes.shape)
        row = pressure_row(surface, q).reshape(-1, 3)
        area = np.linalg.norm(surface.area_normals(q), axis=1).sum()
        assert np.linalg.norm(row.sum(axis=0)) <= 1e-12 * area

    def test_arm_cavities_are_wrench_free(self, coarse_arm):
        nodes = coarse_arm.mesh.nodes
        for cavity in coarse_arm.cavities:
            f = pressure_row(cavity, nodes).reshape(-1, 3)
            area = np.linalg.norm(cavity.area_normals(nodes), axis=1).sum()
            net_force = f.sum(axis=0)
            net_torque = np.cross(nodes, f).sum(axis=0)
            assert np.linalg.norm(net_force) <= 1e-12 * area
            assert np.linalg.norm(net_torque) <= 1e-12 * area  # lever arms < 1 m

    def test_open_cavity_rejected(self):
        open_surface = SurfaceMesh(
            node_indices=np.arange(3), triangles=np.array([[0, 1, 2]])
        )
        with pytest.raises(ActuationError, match="closed"):
            PressureActuator("c0", open_surface)


class TestFollowerStiffness:
    def test_jacobian_matches_finite_differences(self, rng):
        mesh = unit_tet_mesh()
        surface = closed_tet_surface()
        rows, cols = pressure_stiffness_pattern(surface)
        q = mesh.nodes + 0.05 * rng.standard_normal(mesh.nodes.shape)
        scale = 1.7e3
        n = mesh.nodes.size
        jac = np.zeros((n, n))
        np.add.at(jac, (rows, cols), pressure_stiffness_values(surface, q, scale))
        h = 1e-7
        worst = 0.0
        for _ in range(10):
            d = rng.standard_normal(q.shape)
            fp = scale * pressure_row(surface, q + h * d)
            fm = scale * pressure_row(surface, q - h * d)
            fd = (fp - fm) / (2 * h)
            # values contribute to the tangent K = -d(force)/d(positions)
            jd = jac @ d.ravel()
            worst = max(worst, np.linalg.norm(fd + jd) / np.linalg.norm(jd))
        assert worst < 1e-6

    def test_closed_cavity_jacobian_is_symmetric(self, rng):
        # pressure on a closed cavity is the gradient of lambda * volume, so
        # its Jacobian must be a symmetric matrix at any configuration
        mesh = unit_tet_mesh()
        surface = closed_tet_surface()
        rows, cols = pressure_stiffness_pattern(surface)
        q = mesh.nodes + 0.05 * rng.standard_normal(mesh.nodes.shape)
        n = mesh.nodes.size
        jac = np.zeros((n, n))
        np.add.at(jac, (rows, cols), pressure_stiffness_values(surface, q, 1.0))
        assert np.abs(jac - jac.T).max() <= 1e-12 * np.abs(jac).max()


class TestForceRow:
    def test_point_at_node_hits_that_node_only(self):
        mesh = unit_tet_mesh()
        emb = embed_points(mesh, mesh.nodes[1])
        row = force_row(emb, mesh, [1.0, 0.0, 0.0]).reshape(-1, 3)
        expected = np.zeros((4, 3))
        expected[1, 0] = 1.0
        assert_allclose(row, expected, atol=1e-12)

    def test_centroid_splits_into_quarters(self):
        mesh = unit_tet_mesh()
        emb = embed_points(mesh, mesh.nodes.mean(axis=0))
        row = force_row(emb, mesh, [0.0, 0.0, 1.0]).reshape(-1, 3)
        assert_allclose(row[:, 2], 0.25, atol=1e-12)
        assert_allclose(row[:, :2], 0.0, atol=1e-12)

    def test_local_direction_rotates_with_frame(self):
        mesh = unit_tet_mesh()
        emb = embed_points(mesh, mesh.nodes[2])
        actuator = ForceActuator("f", emb, [1.0, 0.0, 0.0], frame="e1")
        world = rotation_about_z(np.pi / 2) @ actuator.local_direction
        assert_allclose(world, [0.0, 1.0, 0.0], atol=1e-12)
        row = force_row(emb, mesh, world).reshape(-1, 3)
        assert_allclose(row[2], [0.0, 1.0, 0.0], atol=1e-12)

    def test_multi_point_embedding_rejected(self):
        mesh = unit_tet_mesh()
        emb = embed_points(mesh, mesh.nodes[:2])
        with pytest.raises(ActuationError, match="exactly one"):
            force_row(emb, mesh, [1.0, 0.0, 0.0])


class TestActuationSet:
    def test_h_has_one_row_per_effort(self, coarse_arm):
        pressures = [
            PressureActuator(f"c{i}", cavity) for i, cavity in enumerate(coarse_arm.cavities)
        ]
        emb = embed_points(coarse_arm.mesh, coarse_arm.e2_point)
        forces = [ForceActuator("f_e2_x", emb, [1.0, 0.0, 0.0], frame="e2")]
        acts = ActuationSet(pressures, forces)
        h = acts.assemble_h(
            coarse_arm.mesh, coarse_arm.mesh.nodes, {"e2": np.eye(3)}
        )
        assert h.shape == (7, 3 * coarse_arm.mesh.num_nodes)
        assert acts.names == [a.name for a in pressures] + ["f_e2_x"]

    def test_zero_effort_contributes_nothing(self, coarse_arm):
        pressures = [PressureActuator("c0", coarse_arm.cavities[0])]
        acts = ActuationSet(pressures)
        h = acts.assemble_h(coarse_arm.mesh, coarse_arm.mesh.nodes, {})
        force = h.T @ np.zeros(1)
        assert np.abs(force).max() == 0.0

    def test_bounds_stack_in_order(self, coarse_arm):
        pressures = [PressureActuator("c0", coarse_arm.cavities[0], lo=0.0, hi=65e3)]
        emb = embed_points(coarse_arm.mesh, coarse_arm.e2_point)
        forces = [ForceActuator("f", emb, [1, 0, 0], frame="e2", lo=-5.0, hi=5.0)]
        acts = ActuationSet(pressures, forces)
        lo, hi = acts.bounds()
        assert_allclose(lo, [0.0, -5.0])
        assert_allclose(hi, [65e3, 5.0])


class TestFibers:
    @pytest.fixture
    def square_loop(self):
        mesh = box_mesh((0.04, 0.04, 0.04), (2, 2, 2))
        points = np.array(
            [
                [0.00, -0.02, 0.0],
                [0.02, -0.02, 0.0],
                [0.02, 0.02, 0.0],
                [0.00, 0.02, 0.0],
            ]
        )
        fibers = FiberSet(mesh, points, [np.arange(4)], stiffness=1e4)
        return mesh, points, fibers

    def test_rest_state_has_zero_force(self, square_loop):
        mesh, _, fibers = square_loop
        assert np.abs(fibers.forces(mesh.nodes)).max() == 0.0
        assert fibers.energy(mesh.nodes) == 0.0

    def test_millimeter_stretch_pulls_with_ten_newtons(self, square_loop):
        mesh, points, fibers = square_loop
        q = mesh.nodes.copy()
        moved = np.isclose(mesh.nodes[:, 0], 0.02) & np.isclose(
            np.abs(mesh.nodes[:, 1]), 0.02
        )
        q[moved, 0] += 1e-3
        f = fibers.forces(q)
        node_b = np.flatnonzero(
            np.isclose(mesh.nodes[:, 0], 0.02)
            & np.isclose(mesh.nodes[:, 1], -0.02)
            & np.isclose(mesh.nodes[:, 2], 0.0)
        )[0]
        assert_allclose(f[node_b], [-10.0, 0.0, 0.0], atol=1e-9)

    def test_forces_are_exact_energy_gradient(self, square_loop, rng):
        mesh, _, fibers = square_loop
        q = mesh.nodes + 1e-3 * rng.standard_normal(mesh.nodes.shape)
        f = fibers.forces(q)
        h = 1e-8
        for _ in range(5):
            d = rng.standard_normal(q.shape)
            num = (fibers.energy(q + h * d) - fibers.energy(q - h * d)) / (2 * h)
            assert_allclose(-np.sum(f * d), num, rtol=1e-5, atol=1e-12)

    def test_stiffness_matches_force_differences(self, square_loop, rng):
        mesh, _, fibers = square_loop
        q = mesh.nodes + 1e-3 * rng.standard_normal(mesh.nodes.shape)
        n = mesh.nodes.size
        jac = np.zeros((n, n))
        np.add.at(jac, (fibers.stiffness_rows, fibers.stiffness_cols), fibers.stiffness_values(q))
        h = 1e-7
        for _ in range(5):
            d = rng.standard_normal(q.shape)
            fd = (fibers.forces(q + h * d) - fibers.forces(q - h * d)).ravel() / (2 * h)
            assert np.linalg.norm(fd + jac @ d.ravel()) <= 1e-6 * np.linalg.norm(jac @ d.ravel())

    def test_short_loops_rejected(self):
        mesh = box_mesh((0.04, 0.04, 0.04), (1, 1, 1))
        with pytest.raises(ActuationError, match="at least 3"):
            FiberSet(mesh, mesh.nodes[:2], [np.array([0, 1])])

    def test_radial_containment_on_hoop_body(self):
        # circumferential loops resist hoop stretch: pressurizing an almost
        # fully annular chamber must bulge far less with fibers than without
        arm, mesh = hoop_ring_body()
        free_bulge = ring_bulge(arm, mesh, pressure=8e3, fiber_stiffness=0.0)
        held_bulge = ring_bulge(arm, mesh, pressure=8e3, fiber_stiffness=1e4)
        assert held_bulge < 0.5 * free_bulge


class TestTether:
    def test_slack_cord_pulls_nothing(self):
        mesh = unit_tet_mesh()
        emb = embed_points(mesh, mesh.nodes[3])
        tether = TetherSpring(mesh, emb, anchor=[0.0, 0.0, 2.0], stiffness=2e4)
        assert tether.tension(mesh.nodes) == 0.0
        q = mesh.nodes.copy()
        q[3, 2] += 0.3  # toward the anchor: even slacker
        assert tether.tension(q) == 0.0
        assert np.abs(tether.forces(q)).max() == 0.0
        assert np.abs(tether.stiffness_values(q)).max() == 0.0

    def test_taut_cord_tension_and_direction(self):
        mesh = unit_tet_mesh()
        emb = embed_points(mesh, mesh.nodes[3])
        tether = TetherSpring(mesh, emb, anchor=[0.0, 0.0, 2.0], stiffness=2e4)
        q = mesh.nodes.copy()
        q[3, 2] -= 1e-3  # away from the anchor: stretch by 1 mm
        assert_allclose(tether.tension(q), 20.0, rtol=1e-12)
        f = tether.forces(q)
        assert_allclose(f[3], [0.0, 0.0, 20.0], rtol=1e-9)

    def test_taut_stiffness_matches_force_differences(self, rng):
        mesh = unit_tet_mesh()
        emb = embed_points(mesh, [[0.25, 0.25, 0.25]])
        tether = TetherSpring(mesh, emb, anchor=[2.0, 0.0, 0.0], stiffness=2e4)
        q = mesh.nodes.copy()
        q[:, 0] -= 0.05  # stretch the cord
        n = mesh.nodes.size
        jac = np.zeros((n, n))
        np.add.at(jac, (tether.stiffness_rows, tether.stiffness_cols), tether.stiffness_values(q))
        h = 1e-7
        for _ in range(5):
            d = rng.standard_normal(q.shape)
            fd = (tether.forces(q + h * d) - tether.forces(q - h * d)).ravel() / (2 * h)
            assert np.linalg.norm(fd + jac @ d.ravel()) <= 1e-6 * np.linalg.norm(jac @ d.ravel())
