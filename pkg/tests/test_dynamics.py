import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnn.dynamics import (LjPotential, SimConfig, Trajectory, generate_dataset, integrate,
                          lj_force, load_data_dir, read_step_csv, reference_step, save_data_dir,
                          step_pairs, write_step_csv)

R_MIN = 2.0 ** (1.0 / 6.0)


def test_force_vanishes_at_minimum(pot):
    assert abs(lj_force(pot, R_MIN)) < 1e-12


def test_force_at_sigma(pot):
    assert lj_force(pot, 1.0) == pytest.approx(24.0, rel=1e-14)


def test_well_depth(pot):
    assert pot.energy(R_MIN) == pytest.approx(-1.0, rel=1e-14)
    assert pot.energy(1.0) == 0.0


@pytest.mark.parametrize("x", [0.0, -1.0])
def test_force_domain(pot, x):
    with pytest.raises(ValueError):
        lj_force(pot, x)


@given(st.floats(0.85, 3.0))
def test_force_is_minus_gradient(x):
    pot = LjPotential()
    h = 1e-6
    fd = -(pot.energy(x + h) - pot.energy(x - h)) / (2 * h)
    assert lj_force(pot, x) == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_stationary_at_minimum(pot):
    x, v = reference_step(pot, R_MIN, 0.0, 1e-3)
    assert abs(x - R_MIN) < 1e-15 and abs(v) < 1e-12


def test_fine_step_conserves_energy_over_1e5_steps(pot):
    cfg = SimConfig()
    x0, _ = pot.turning_points(-0.5)
    tr = integrate(pot, x0, 0.0, cfg.dt_fine, 100_000)
    drift = np.max(np.abs(pot.total_energy(tr.x, tr.v) + 0.5))
    assert drift < 1e-6


def test_energy_error_is_second_order(pot):
    x0, _ = pot.turning_points(-0.5)

    def drift(dt):
        tr = integrate(pot, x0, 0.0, dt, int(round(20.0 / dt)))
        return np.max(np.abs(pot.total_energy(tr.x, tr.v) + 0.5))

    assert drift(1e-3) / drift(5e-4) == pytest.approx(4.0, rel=0.05)


def test_friction_dissipates(pot):
    x0, _ = pot.turning_points(-0.5)
    tr = integrate(pot, x0, 0.0, 1e-3, 20_000, gamma=0.1)
    assert np.all(np.diff(pot.total_energy(tr.x, tr.v)) <= 0.0)


def test_weak_friction_dissipates_up_to_verlet_jitter(pot):
    # with gamma = 0.004 the per-step loss can fall below velocity Verlet's own
    # O(dt^2) energy oscillation near turning points
    x0, _ = pot.turning_points(-0.5)
    tr = integrate(pot, x0, 0.0, SimConfig().dt_fine, 50_000, gamma=0.004)
    e = pot.total_energy(tr.x, tr.v)
    assert np.max(np.diff(e)) < 1e-10
    assert e[-1] < e[0] - 0.01


def test_generator_reversible(pot):
    x0, _ = pot.turning_points(-0.6)
    n, dt = 1000, SimConfig().dt_fine
    fwd = integrate(pot, x0, 0.0, dt, n)
    back = integrate(pot, fwd.x[-1], -fwd.v[-1], dt, n)
    assert abs(back.x[-1] - x0) < 1e-8
    assert abs(back.v[-1]) < 1e-8


@given(st.floats(-0.99, -0.05))
def test_turning_points_solve_energy(E):
    pot = LjPotential()
    lo, hi = pot.turning_points(E)
    assert lo < R_MIN < hi
    assert pot.energy(lo) == pytest.approx(E, abs=1e-10)
    assert pot.energy(hi) == pytest.approx(E, abs=1e-10)


@pytest.mark.parametrize("E", [-1.5, 0.0, 0.3])
def test_turning_points_domain(pot, E):
    with pytest.raises(ValueError):
        pot.turning_points(E)


def test_below_well_depth_rejected(pot):
    with pytest.raises(ValueError):
        generate_dataset(pot, SimConfig(energies=[-0.8, -1.5]))


def test_needs_two_energies(pot):
    with pytest.raises(ValueError):
        generate_dataset(pot, SimConfig(energies=[-0.8]))


def test_stride_sets_data_timestep():
    assert SimConfig(dt_fine=0.001, stride=10).dt == pytest.approx(0.01)
    with pytest.raises(ValueError):
        SimConfig(stride=0)


def test_dataset_layout(data):
    cfg = data.config
    assert len(data.trajectories) == 5
    rows_per_traj = cfg.total_steps // cfg.stride
    pool = 4 * rows_per_traj
    assert len(data.train) + len(data.val) == pool
    assert len(data.val) == round(0.2 * pool)
    assert len(data.test) == rows_per_traj
    assert data.trajectories[-1].energy_label == -0.65
    test_x0 = data.trajectories[-1].x[0]
    assert data.test.inputs[0, 0] == test_x0
    # test energy is absent from the training pool
    e_train = data.potential.total_energy(data.train.inputs[:, 0], data.train.inputs[:, 1])
    assert np.min(np.abs(e_train + 0.65)) > 0.04


def test_trajectory_uniform_time(data):
    for tr in data.trajectories:
        dts = np.diff(tr.t)
        assert np.all(dts > 0)
        assert np.allclose(dts, data.config.dt_fine, rtol=1e-9)


def test_trajectories_start_at_inner_turning_point(data, pot):
    for tr in data.trajectories:
        lo, _ = pot.turning_points(tr.energy_label)
        assert tr.x[0] == lo and tr.v[0] == 0.0


def test_bound_motion(data, pot):
    for tr in data.trajectories:
        lo, hi = pot.turning_points(tr.energy_label)
        travel = np.max(np.abs(np.diff(tr.x)))
        assert tr.x.min() >= lo - travel and tr.x.max() <= hi + travel


def test_dataset_is_subsampled_fine_trajectory(data, pot):
    cfg = data.config
    tr = data.trajectories[0]
    ins, outs = step_pairs(tr, cfg.stride)
    for row in (0, 17, len(ins) - 1):
        x, v = ins[row]
        for _ in range(cfg.stride):
            x, v = reference_step(pot, x, v, cfg.dt_fine)
        assert (x, v) == tuple(outs[row])


def test_split_is_seeded(pot):
    cfg = SimConfig(total_steps=500, seed=3)
    a, b = generate_dataset(pot, cfg), generate_dataset(pot, cfg)
    assert np.array_equal(a.val.inputs, b.val.inputs)
    c = generate_dataset(pot, SimConfig(total_steps=500, seed=4))
    assert not np.array_equal(a.val.inputs, c.val.inputs)


def test_trajectory_csv_round_trip(tmp_path, small_data):
    tr = small_data.trajectories[1]
    tr.to_csv(tmp_path / "t.csv")
    back = Trajectory.from_csv(tmp_path / "t.csv", tr.energy_label)
    assert np.array_equal(back.x, tr.x) and np.array_equal(back.v, tr.v)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "t,x,v"


def test_step_csv_round_trip(tmp_path, small_data):
    d = small_data
    write_step_csv(tmp_path / "s.csv", [d.train, d.val, d.test])
    back = read_step_csv(tmp_path / "s.csv", d.dt)
    for split in ("train", "val", "test"):
        assert np.array_equal(back[split].inputs, getattr(d, split).inputs)
        assert np.array_equal(back[split].targets, getattr(d, split).targets)


def test_step_csv_rejects_bad_header(tmp_path):
    (tmp_path / "s.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_step_csv(tmp_path / "s.csv")


def test_data_dir_round_trip(tmp_path, small_data):
    save_data_dir(small_data, tmp_path)
    back = load_data_dir(tmp_path)
    assert back.config == small_data.config
    assert back.dt == small_data.dt
    assert np.array_equal(back.test.targets, small_data.test.targets)
    assert [t.energy_label for t in back.trajectories] == small_data.config.energies
    assert math.isclose(back.trajectories[0].x[-1], small_data.trajectories[0].x[-1])
