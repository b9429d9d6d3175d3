"""Full-scale behavioral gate: one test per shipped guarantee, in order.

Each test states its tolerance and wall-clock budget inline and runs at the
default arm discretization unless the guarantee itself names another rig.
Run with ``pytest -v tests/test_acceptance.py`` for the per-guarantee
pass/fail readout.
"""

import json
import time

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import COARSE_PARAMS
from oracles import brute_force_box_qp, central_difference, euler_bernoulli_tip_deflection
from rigs import beam_mesh
from softarm import cli, fem
from softarm.actuators import pressure_row
from softarm.armgen import ArmParams, generate_arm
from softarm.calibration import (
    calibrate_pressure_map,
    synthesize_pressure_sweep,
    validate_leave_one_out,
)
from softarm.inverse import QpProblem, assemble_w, solve_equilibrated_qp, solve_qp
from softarm.observer import geodesic_angle, matrix_to_rotvec
from softarm.scenarios import ScenarioSpec, apply_ramp, estimate_disturbance, synth_experiment, teach_commit, teach_step
from softarm.scene import Scene, SceneConfig


@pytest.fixture(scope="module")
def default_arm():
    return generate_arm(ArmParams())


def full_stiffness(cache, q, rotations):
    """Assembled 3n x 3n tangent without boundary-condition elimination."""
    kin = fem.kinematics(cache, q, rotations)
    ke = fem.element_tangents(cache, kin)
    rows = np.repeat(cache.elem_dofs, 12, axis=1).ravel()
    cols = np.tile(cache.elem_dofs, (1, 12)).ravel()
    n = cache.elem_dofs.max() + 1
    return sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsc()


def test_a01_cavity_pressure_loads_are_wrench_free(default_arm):
    """Net force and torque of each pressurized cavity vanish at full pressure."""
    t0 = time.perf_counter()
    pressure = 65e3
    nodes = default_arm.mesh.nodes
    assert len(default_arm.cavities) == 6
    worst = 0.0
    for cavity in default_arm.cavities:
        f = pressure * pressure_row(cavity, nodes).reshape(-1, 3)
        scale = pressure * np.linalg.norm(cavity.area_normals(nodes), axis=1).sum()
        net_force = np.linalg.norm(f.sum(axis=0))
        net_torque = np.linalg.norm(np.cross(nodes, f).sum(axis=0))
        worst = max(worst, net_force / scale, net_torque / scale)
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-9
    assert elapsed < 1.0
    print(f"cavity wrench: worst rel {worst:.2e} (tol 1e-9) [{elapsed:.2f}s]")


def test_a02_fem_rigid_invariance_tangent_and_beam_theory():
    """Rigid motions are force-free, the tangent matches finite differences,
    and a slender cantilever lands on the analytic small-deflection answer."""
    t0 = time.perf_counter()
    length, side, modulus, poisson, tip_force = 0.2, 0.01, 1e7, 0.3, 0.01
    material = fem.Material(modulus, poisson, 1000.0)
    rng = np.random.default_rng(2)

    # rigid-motion invariance on a slender beam
    mesh = beam_mesh(length, side, 20, 4)
    cache = fem.precompute_elements(mesh, {0: material}, gravity=(0, 0, 0))
    state = fem.FemState(cache)
    axis = rng.standard_normal(3)
    from softarm.observer import rotvec_to_matrix

    rotation = rotvec_to_matrix(axis / np.linalg.norm(axis) * 0.8)
    q = mesh.nodes @ rotation.T + np.array([0.1, -0.2, 0.05])
    force_norm = np.linalg.norm(fem.internal_forces(cache, state, q=q, commit=False))
    rigid_bound = 1e-8 * modulus * mesh.diameter() ** 2
    assert force_norm <= rigid_bound

    # tangent vs central differences on 20 random directions
    q = mesh.nodes + 1e-4 * rng.standard_normal(mesh.nodes.shape)
    state.set_positions(q)
    k = full_stiffness(cache, q, state.rotations)
    h = 1e-6 * mesh.diameter()
    worst_fd = 0.0
    for _ in range(20):
        d = rng.standard_normal(q.shape)
        fd = central_difference(
            lambda x: fem.internal_forces(cache, state, q=x, commit=False), q, d, h
        ).ravel()
        kd = k @ d.ravel()
        worst_fd = max(worst_fd, np.linalg.norm(fd + kd) / np.linalg.norm(kd))
    assert worst_fd < 1e-4

    # cantilever tip deflection against beam theory
    fine = beam_mesh(length, side, 80, 8)
    cache = fem.precompute_elements(fine, {0: material}, gravity=(0, 0, 0))
    state = fem.FemState(cache)
    tip_nodes = np.flatnonzero(fine.nodes[:, 0] == length)
    load = np.zeros((fine.num_nodes, 3))
    load[tip_nodes, 2] = -tip_force / len(tip_nodes)

    def residual(q, kin):
        return fem.elastic_forces(cache, kin) + load

    report = fem.settle(cache, state, residual, load_scale=tip_force, max_steps=40)
    assert report.converged
    deflection = -(state.q[tip_nodes, 2] - fine.nodes[tip_nodes, 2]).mean()
    reference = euler_bernoulli_tip_deflection(tip_force, length, modulus, side)
    beam_err = abs(deflection - reference) / reference
    assert beam_err < 0.15

    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    print(
        f"fem: rigid |F| {force_norm:.2e} (tol {rigid_bound:.2e}), "
        f"tangent FD {worst_fd:.2e} (tol 1e-4), "
        f"beam {beam_err * 100:.1f}% (tol 15%) [{elapsed:.1f}s]"
    )


def test_a03_orientation_jacobian_matches_fd_and_ignores_translation():
    t0 = time.perf_counter()
    scene = Scene(SceneConfig(arm=COARSE_PARAMS))
    pressures = np.zeros(scene.num_pressures)
    pressures[[1, 3]] = (20e3, 10e3)
    scene.set_pressures(pressures)
    scene.settle()
    rng = np.random.default_rng(3)

    worst_fd, worst_null = 0.0, 0.0
    for name in scene.effector_order:
        effector = scene.effectors[name]
        q = scene.state.q
        indices = effector.node_indices
        jac = effector.jacobian(q)
        for axis in range(3):
            d = np.zeros((len(indices), 3))
            d[:, axis] = 1.0
            worst_null = max(worst_null, np.abs(jac @ d.ravel()).max())
        h = 1e-7
        for _ in range(20):
            d = rng.standard_normal((len(indices), 3))
            plus, minus = q.copy(), q.copy()
            plus[indices] += h * d
            minus[indices] -= h * d
            numeric = matrix_to_rotvec(
                effector.orientation(plus) @ effector.orientation(minus).T
            ) / (2 * h)
            analytic = jac @ d.ravel()
            worst_fd = max(
                worst_fd,
                np.linalg.norm(numeric - analytic) / np.linalg.norm(analytic),
            )
    elapsed = time.perf_counter() - t0
    assert worst_null <= 1e-9
    assert worst_fd < 1e-4
    assert elapsed < 5.0
    print(
        f"orientation jacobian: FD {worst_fd:.2e} (tol 1e-4), "
        f"translation {worst_null:.2e} (tol 1e-9) [{elapsed:.1f}s]"
    )


def test_a04_qp_matches_exhaustive_enumeration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_dx, worst_kkt = 0.0, 0.0
    for _ in range(500):
        m = int(rng.integers(1, 7))
        n = int(rng.integers(m, m + 12))
        w = rng.normal(size=(n, m))
        r = rng.normal(size=n) * rng.choice([0.1, 1.0, 10.0])
        lo = rng.uniform(-2, 0, m)
        hi = rng.uniform(0.05, 2, m)
        reg = float(rng.choice([1e-8, 1e-4, 1e-2])) * np.trace(w.T @ w) / m
        solution = solve_qp(QpProblem(w=w, r=r, lo=lo, hi=hi, reg=reg))
        best_x, best_obj = brute_force_box_qp(w, r, lo, hi, reg)
        worst_dx = max(worst_dx, np.max(np.abs(solution.x - best_x)))
        assert solution.objective <= best_obj + 1e-8
        scale = max(1.0, np.abs(w.T @ r).max())
        worst_kkt = max(
            worst_kkt,
            solution.kkt["stationarity"] / scale,
            solution.kkt["feasibility"],
            solution.kkt["complementarity"] / scale,
        )
    elapsed = time.perf_counter() - t0
    assert worst_dx <= 1e-8
    assert worst_kkt <= 1e-6
    assert elapsed < 10.0
    print(
        f"qp: 500 problems, worst |dx| {worst_dx:.2e} (tol 1e-8), "
        f"worst KKT {worst_kkt:.2e} (tol 1e-6) [{elapsed:.1f}s]"
    )


def test_a05_calibration_recovers_twin_parameters(default_arm):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    nu_true = rng.uniform(0.9, 1.1, 6)
    nu_true *= 1.0 / nu_true.mean()
    alpha_true = 1.3
    twin = Scene(
        SceneConfig(modulus_scale=alpha_true, chamber_efficiencies=tuple(nu_true)),
        arm=default_arm,
    )
    dataset = synthesize_pressure_sweep(
        twin, magnitudes=np.array([0.0, 10e3, 25e3, 40e3, 55e3])
    )
    model = Scene(SceneConfig(), arm=default_arm)
    result = calibrate_pressure_map(dataset, model)

    alpha_err = abs(result.alpha - alpha_true) / alpha_true
    nu_err = np.abs(np.asarray(result.nu) - nu_true) / nu_true
    mean_err = abs(float(np.mean(result.nu)) - 1.0)
    elapsed = time.perf_counter() - t0
    assert alpha_err <= 0.02
    assert nu_err.max() <= 0.02
    assert mean_err <= 1e-9
    assert elapsed < 600.0
    print(
        f"calibration: alpha err {alpha_err * 100:.3f}% (tol 2%), "
        f"nu err {nu_err.max() * 100:.3f}% (tol 2%), "
        f"|mean(nu)-1| {mean_err:.1e} (tol 1e-9), "
        f"passes {result.residuals['passes']} [{elapsed:.0f}s]"
    )


def test_a06_leave_one_out_validation_on_noiseless_twin(default_arm):
    t0 = time.perf_counter()
    scene = Scene(SceneConfig(), arm=default_arm)
    report = validate_leave_one_out(scene, trial_count=20, seed=0)
    elapsed = time.perf_counter() - t0

    assert report.failures == 0
    assert report.position_m["mean"] < 1e-3
    assert report.orientation_deg["mean"] < 0.5
    table = report.table().splitlines()
    assert table[0] == "        Position (m)   Orientation (deg)"
    assert [row.split()[0] for row in table[1:]] == ["Min", "Max", "Mean", "Std"]
    print(report.table())
    assert elapsed < 900.0
    print(
        f"leave-one-out: 20 trials, mean {report.position_m['mean'] * 1e3:.4f} mm "
        f"(tol 1 mm) / {report.orientation_deg['mean']:.4f} deg (tol 0.5) "
        f"[{elapsed:.0f}s]"
    )


def test_a07_teach_round_trip_reproduces_targets(default_arm):
    t0 = time.perf_counter()
    scene = Scene(SceneConfig(), arm=default_arm)
    rng = np.random.default_rng(7)
    trial_means = []
    for _ in range(15):
        pressures = rng.uniform(0.0, 40e3, scene.num_pressures)
        scene.reset()
        scene.set_pressures(pressures)
        scene.settle()
        targets = {name: rot.copy() for name, rot in scene.orientations().items()}
        scene.reset()
        state = teach_step(scene, targets)
        schedule, _ = teach_commit(scene, state)
        achieved = apply_ramp(scene, schedule)
        angles = [
            np.degrees(geodesic_angle(achieved[name], targets[name]))
            for name in targets
        ]
        trial_means.append(float(np.mean(angles)))
    mean_err = float(np.mean(trial_means))
    elapsed = time.perf_counter() - t0
    assert mean_err <= 2.0
    assert elapsed < 900.0
    print(
        f"teach: 15 targets, mean geodesic {mean_err:.4f} deg (tol 2), "
        f"worst trial {max(trial_means):.4f} deg [{elapsed:.0f}s]"
    )


def test_a08_force_ramp_estimation_unpressurized(default_arm):
    t0 = time.perf_counter()
    config = SceneConfig()
    spec = ScenarioSpec(
        scene=config, protocol="force_ramp", frames=34,
        force_axis="f_e2_x", force_max=0.66,
    )
    frames = synth_experiment(spec, seed=0)
    measured = np.array([frame.f_meas for frame in frames])
    assert measured.min() == 0.0 and np.isclose(measured.max(), 0.66)

    estimator = Scene(config, arm=default_arm)
    errors = [
        abs(estimate_disturbance(estimator, frame).magnitude - abs(frame.f_meas))
        for frame in frames
    ]
    force_range = measured.max() - measured.min()
    rel = float(np.mean(errors)) / force_range
    elapsed = time.perf_counter() - t0
    assert rel <= 0.012
    assert elapsed < 600.0
    print(
        f"force ramp: mean abs err {np.mean(errors):.5f} N = {rel * 100:.3f}% of "
        f"{force_range:.2f} N (tol 1.2%) [{elapsed:.0f}s]"
    )


def test_a09_force_estimation_under_tethered_pressure_ramp():
    t0 = time.perf_counter()
    wide = ArmParams(chamber_arc_fraction=0.25, radial_fractions=(0.3, 0.9, 1.0))
    arm = generate_arm(wide)
    config = SceneConfig(arm=wide)

    # pick the anchor opposing the bend direction observed at mid pressure
    probe = Scene(config, arm=arm)
    rest_tip = probe.tip_position().copy()
    pressures = np.zeros(probe.num_pressures)
    pressures[[0, 3]] = 30e3
    probe.set_pressures(pressures)
    probe.settle()
    direction = probe.tip_position() - rest_tip
    d_xy = direction[:2] / np.linalg.norm(direction[:2])
    offset = (-0.08 * d_xy[0], -0.08 * d_xy[1], 0.0)

    spec = ScenarioSpec(
        scene=config, protocol="tether_ramp", frames=34,
        tether_offset=offset, tether_stiffness=2e4,
        ramp_chambers=(0, 3), ramp_max=46e3,
    )
    frames = synth_experiment(spec, seed=0)
    measured = np.array([frame.f_meas for frame in frames])
    assert 1.8 <= measured.max() <= 2.2  # ramp reaches the ~2 N regime

    estimator = Scene(config, arm=arm)
    errors = [
        abs(
            estimate_disturbance(
                estimator, frame, tol_deg=0.05, max_iterations=25
            ).magnitude
            - frame.f_meas
        )
        for frame in frames
    ]
    force_range = measured.max() - measured.min()
    rel = float(np.mean(errors)) / force_range
    elapsed = time.perf_counter() - t0
    assert rel <= 0.015
    assert elapsed < 900.0
    print(
        f"tethered ramp: peak {measured.max():.3f} N, mean abs err "
        f"{np.mean(errors):.4f} N = {rel * 100:.2f}% of {force_range:.3f} N "
        f"(tol 1.5%) [{elapsed:.0f}s]"
    )


def test_a10_interactive_step_rate(default_arm):
    mesh = default_arm.mesh
    assert 0.8 * 1201 <= mesh.num_nodes <= 1.2 * 1201
    assert 0.8 * 3869 <= mesh.num_tets <= 1.2 * 3869

    scene = Scene(SceneConfig(), arm=default_arm)
    targets = {
        name: scene.effectors[name].orientation(scene.state.q)
        for name in scene.effector_order
    }
    scene.set_pressures(np.full(scene.num_pressures, 30e3))
    scene.settle()
    lo, hi = scene.bounds()

    times = []
    sign = 1.0
    for i in range(40):
        t0 = time.perf_counter()
        efforts = scene.efforts.copy()
        efforts[i % scene.num_pressures] += 500.0 * sign
        sign = -sign
        scene.set_efforts(efforts)
        _, tangent = scene.step(return_tangent=True)
        w = assemble_w(scene, tangent)
        residual = scene.orientation_residual(targets)
        solve_equilibrated_qp(w, residual, lo - scene.efforts, hi - scene.efforts)
        times.append(time.perf_counter() - t0)
    median = float(np.median(times[5:]))
    hz = 1.0 / median
    assert hz >= 6.0, f"hard floor: {hz:.1f} Hz < 6 Hz"
    assert hz >= 12.0, f"measured {hz:.1f} Hz < 12 Hz target"
    print(
        f"rate: {mesh.num_nodes} nodes / {mesh.num_tets} tets, "
        f"step+solve median {median * 1e3:.1f} ms -> {hz:.1f} Hz (target 12, floor 6)"
    )


def test_a11_seeded_artifacts_are_bitwise_reproducible(tmp_path, monkeypatch):
    scene_path = tmp_path / "scene.json"
    scene_path.write_text(SceneConfig(arm=COARSE_PARAMS, gravity=0.0).to_json())

    def run(argv):
        assert cli.main(argv) == 0

    outputs = []
    for label in ("first", "second"):
        workdir = tmp_path / label
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        run(
            ["synth", "--scene", str(scene_path), "--protocol", "random",
             "--frames", "5", "--seed", "9", "--noise-deg", "0.3",
             "--out", "log.csv", "--report", "synth.json"]
        )
        run(
            ["validate", "--scene", str(scene_path), "--trials", "2",
             "--seed", "5", "--out", "validate.json"]
        )
        outputs.append(
            {
                name: (workdir / name).read_bytes()
                for name in ("log.csv", "synth.json", "validate.json")
            }
        )
    for name in outputs[0]:
        assert outputs[0][name] == outputs[1][name], f"{name} differs between runs"
    sizes = ", ".join(f"{k} {len(v)}B" for k, v in outputs[0].items())
    print(f"determinism: reruns bitwise-identical ({sizes})")


@pytest.mark.skip(reason="interactive latency is measured in the UI package's own suite")
def test_a12_ui_drag_latency():
    pass
