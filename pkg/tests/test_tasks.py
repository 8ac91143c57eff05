"""Dataset generator tests: exact target recomputation, bitwise descriptor
regeneration, the pendulum physics against an ODE integrator, the temporal
embedding, and the on-disk container format."""

import numpy as np
import numpy.testing as npt
import pytest

import oracles
from massflow import tasks
from massflow.errors import ContractError, DomainError


# === addition ===

def test_addition_targets_recompute_exactly():
    ds = tasks.gen_addition(50, 30, 0.5, 3, seed=4)
    for row in range(ds.n_samples):
        total = 0.0
        for t in range(ds.seq_len):
            if ds.aux[row, t, 0] == 1.0:
                total += ds.mass[row, t, 0]
        assert total == ds.targets[row, 0]


def test_addition_channel_layout():
    ds = tasks.gen_addition(20, 15, 0.5, 2, seed=9)
    assert ds.mass.shape == (20, 15, 1)
    assert ds.aux.shape == (20, 15, 2)
    assert ds.targets.shape == (20, 1)
    assert (ds.mass >= 0.0).all() and (ds.mass < 0.5).all()
    npt.assert_array_equal(ds.aux[:, :, 0].sum(axis=1), 2.0)
    npt.assert_array_equal(ds.aux[:, -1, 1], -1.0)
    npt.assert_array_equal(ds.aux[:, :-1, 1], 0.0)


def test_addition_marked_final_position_keeps_both_roles():
    # With every position marked the final step carries the marker on one
    # channel and the end signal on the other.
    ds = tasks.gen_addition(5, 6, 0.5, 6, seed=1)
    npt.assert_array_equal(ds.aux[:, :, 0], 1.0)
    npt.assert_array_equal(ds.aux[:, -1, 1], -1.0)
    for row in range(5):
        total = 0.0
        for t in range(6):
            total += ds.mass[row, t, 0]
        assert total == ds.targets[row, 0]


def test_addition_rejects_bad_configurations():
    with pytest.raises(ContractError):
        tasks.gen_addition(10, 5, 0.5, 6, seed=0)
    with pytest.raises(ContractError):
        tasks.gen_addition(10, 5, 0.5, 0, seed=0)
    with pytest.raises(ContractError):
        tasks.gen_addition(10, 5, -1.0, 2, seed=0)
    with pytest.raises(ContractError):
        tasks.gen_addition(0, 5, 0.5, 2, seed=0)


def test_reference_splits_are_sliced_from_one_draw():
    train, valid, test = tasks.addition_reference_splits(seed=0,
                                                         n_train_valid=200,
                                                         n_test=50)
    assert train.n_samples == valid.n_samples == 100
    assert test.n_samples == 50
    assert train.descriptor["slice"] == [0, 100]
    assert valid.descriptor["slice"] == [100, 200]
    pool = tasks.gen_addition(200, 100, 0.5, 2, seed=0)
    npt.assert_array_equal(train.mass, pool.mass[:100])
    npt.assert_array_equal(valid.mass, pool.mass[100:])
    # The test split comes from a derived seed, not a slice of the pool.
    assert test.descriptor["seed"] != 0
    assert not np.array_equal(test.mass[: 50], pool.mass[:50])


def test_generalization_table_is_frozen():
    assert tasks.ADDITION_GENERALIZATION == {
        "seq-length": (1000, 1000, 0.5, 2),
        "input-range": (1000, 100, 5.0, 2),
        "count": (1000, 100, 0.5, 20),
        "combo": (1000, 500, 2.5, 10),
    }
    assert tasks.ADDITION_REFERENCE == {"n": 20000, "seq_len": 100,
                                        "value_hi": 0.5, "n_marked": 2}


# === descriptor regeneration ===

def _assert_same_dataset(a, b):
    assert a.split == b.split
    npt.assert_array_equal(a.mass, b.mass)
    npt.assert_array_equal(a.aux, b.aux)
    npt.assert_array_equal(a.targets, b.targets)


def test_regeneration_is_bitwise_identical():
    candidates = [
        tasks.gen_addition(40, 25, 0.5, 2, seed=7, split="test"),
        tasks.gen_recurrent_arithmetic("sub", 15, 12, seed=3),
        tasks.gen_static_arithmetic("mul", seed=5, n_train=30, n_test=10)[0],
        tasks.pendulum_dataset(tasks.PendulumConfig(gamma=0.1, n_steps=50,
                                                    noise_sigma=0.01, seed=2)),
    ]
    for ds in candidates:
        _assert_same_dataset(ds, tasks.regenerate(ds.descriptor))


def test_regeneration_honors_slices():
    train, valid, _ = tasks.addition_reference_splits(seed=3, n_train_valid=60,
                                                      n_test=10)
    _assert_same_dataset(train, tasks.regenerate(train.descriptor))
    _assert_same_dataset(valid, tasks.regenerate(valid.descriptor))


def test_regeneration_rejects_unknown_task():
    with pytest.raises(ContractError):
        tasks.regenerate({"task": "sudoku"})


# === arithmetic on subset sums ===

def test_recurrent_arithmetic_overlapping_subset_walkthrough():
    # Default subsets are coordinates 6..7 and 7..8 (1-based, inclusive), so
    # the operands share x7 at every step.
    for op, combine in [("add", lambda l, r: l + r), ("sub", lambda l, r: l - r),
                        ("mul", lambda l, r: l * r)]:
        ds = tasks.gen_recurrent_arithmetic(op, 10, 8, seed=11)
        for row in range(10):
            lhs = 0.0
            rhs = 0.0
            for t in range(8):
                lhs += ds.mass[row, t, 5]
                lhs += ds.mass[row, t, 6]
                rhs += ds.mass[row, t, 6]
                rhs += ds.mass[row, t, 7]
            assert combine(lhs, rhs) == ds.targets[row, 0], op


def test_recurrent_arithmetic_aux_is_step_counter_with_end_mark():
    ds = tasks.gen_recurrent_arithmetic("add", 4, 9, seed=0)
    npt.assert_array_equal(ds.aux[:, :-1, 0], 1.0)
    npt.assert_array_equal(ds.aux[:, -1, 0], -1.0)
    assert (ds.mass >= 1.0).all() and (ds.mass <= 2.0).all()


def test_single_step_sequence_matches_static_semantics():
    ds = tasks.gen_recurrent_arithmetic("add", 6, 1, seed=2)
    for row in range(6):
        expect = (ds.mass[row, 0, 5] + ds.mass[row, 0, 6]
                  + ds.mass[row, 0, 6] + ds.mass[row, 0, 7])
        npt.assert_allclose(ds.targets[row, 0], expect, rtol=1e-15)


def test_subset_bounds_are_validated():
    with pytest.raises(ContractError):
        tasks.gen_recurrent_arithmetic("add", 5, 5, seed=0, subset_a=7, subset_b=6)
    with pytest.raises(ContractError):
        tasks.gen_recurrent_arithmetic("add", 5, 5, seed=0, subset_b=10, subset_c=4)
    with pytest.raises(ContractError):
        tasks.gen_recurrent_arithmetic("pow", 5, 5, seed=0)


def test_static_arithmetic_ranges_and_shared_subsets():
    train, test = tasks.gen_static_arithmetic("add", seed=8, n_train=40, n_test=20)
    assert (train.mass >= 1.0).all() and (train.mass <= 2.0).all()
    assert (test.mass >= 2.0).all() and (test.mass <= 6.0).all()
    for key in ("subset_a", "subset_b", "subset_c", "width"):
        assert train.descriptor[key] == test.descriptor[key]
    a = train.descriptor["subset_a"]
    b = train.descriptor["subset_b"]
    c = train.descriptor["subset_c"]
    for ds in (train, test):
        for row in range(ds.n_samples):
            lhs = 0.0
            rhs = 0.0
            for k in range(a - 1, a + c):
                lhs += ds.mass[row, 0, k]
            for k in range(b - 1, b + c):
                rhs += ds.mass[row, 0, k]
            assert lhs + rhs == ds.targets[row, 0]


def test_arithmetic_targets_do_not_equal_total_input_mass():
    # The operands overlap and skip coordinates, so the target is not the
    # conserved total of the inputs; models must route mass, not just keep it.
    ds = tasks.gen_recurrent_arithmetic("add", 10, 6, seed=1)
    totals = ds.mass.sum(axis=(1, 2))
    assert np.abs(ds.targets[:, 0] - totals).min() > 1e-3


def test_imprecision_threshold_tracks_float32():
    ds = tasks.gen_addition(200, 100, 0.5, 2, seed=0)
    thr = tasks.imprecision_threshold(ds)
    assert 1e-30 <= thr < 1e-10
    stat = tasks.gen_static_arithmetic("mul", seed=3, n_train=50, n_test=10)[0]
    assert tasks.imprecision_threshold(stat) >= 1e-30
    with pytest.raises(ContractError):
        tasks.imprecision_threshold(
            tasks.pendulum_dataset(tasks.PendulumConfig(n_steps=10)))


# === pendulum ===

def test_pendulum_starts_at_maximum_displacement():
    cfg = tasks.PendulumConfig(theta0=0.2, n_steps=50)
    series = tasks.pendulum_series(cfg)
    assert series[0, 1] == 0.0
    npt.assert_allclose(series[0, 0], 0.5 * 0.5 * 6.0 * 1.0 * 0.2 ** 2, rtol=1e-15)


def test_frictionless_pendulum_conserves_energy():
    series = tasks.pendulum_series(tasks.PendulumConfig(gamma=0.0, n_steps=400))
    total = series.sum(axis=1)
    npt.assert_allclose(total, total[0], rtol=1e-9)


def test_pendulum_matches_ode_integrator():
    cfg = tasks.PendulumConfig(theta0=0.2, gamma=0.4, n_steps=200, dt=0.075)
    series = tasks.pendulum_series(cfg)
    theta, theta_dot = oracles.rk4_damped_oscillator(
        0.2, cfg.gravity / cfg.length, 0.4, 0.075, 200, substeps=100)
    e_pot, e_kin = oracles.pendulum_energies(theta, theta_dot, cfg.mass,
                                             cfg.gravity, cfg.length)
    npt.assert_allclose(series[:, 0], e_pot, atol=1e-9)
    npt.assert_allclose(series[:, 1], e_kin, atol=1e-9)


def test_damped_total_energy_is_nonincreasing():
    series = tasks.pendulum_series(tasks.PendulumConfig(gamma=0.4, n_steps=300))
    total = series.sum(axis=1)
    assert (np.diff(total) <= 1e-12).all()
    assert total[-1] < total[0]


def test_damped_energy_tracks_exponential_envelope():
    # Instantaneous total energy oscillates around E0*exp(-gamma*t) at twice
    # the pendulum frequency; the bound on the pointwise wobble comes from
    # the integrator oracle, and the cycle average hugs the envelope.
    cfg = tasks.PendulumConfig(theta0=0.2, gamma=0.4, n_steps=400, dt=0.075)
    series = tasks.pendulum_series(cfg)
    t = np.arange(cfg.n_steps) * cfg.dt
    ratio = series.sum(axis=1) * np.exp(cfg.gamma * t) / series[0].sum()
    assert np.abs(ratio - 1.0).max() <= 0.095
    w = np.sqrt(cfg.gravity / cfg.length - cfg.gamma ** 2 / 4.0)
    steps_per_cycle = int(round(2.0 * np.pi / w / cfg.dt))
    for start in range(0, cfg.n_steps - steps_per_cycle):
        assert abs(ratio[start:start + steps_per_cycle].mean() - 1.0) <= 0.02


def test_overdamped_configuration_is_rejected():
    with pytest.raises(DomainError):
        tasks.pendulum_series(tasks.PendulumConfig(gamma=5.0))
    # Just past the underdamped bound (gamma^2 = 24.0002 vs 4 g/l = 24).
    with pytest.raises(DomainError):
        tasks.pendulum_series(tasks.PendulumConfig(gamma=4.899))
    with pytest.raises(ContractError):
        tasks.pendulum_series(tasks.PendulumConfig(n_steps=0))


def test_pendulum_noise_is_seeded():
    cfg = dict(theta0=0.2, gamma=0.1, noise_sigma=0.01, n_steps=60)
    a = tasks.pendulum_series(tasks.PendulumConfig(**cfg, seed=5))
    b = tasks.pendulum_series(tasks.PendulumConfig(**cfg, seed=5))
    c = tasks.pendulum_series(tasks.PendulumConfig(**cfg, seed=6))
    npt.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_pendulum_dataset_is_a_closed_system():
    ds = tasks.pendulum_dataset(tasks.PendulumConfig(n_steps=80))
    assert ds.mass.shape == (1, 80, 1)
    npt.assert_array_equal(ds.mass, 0.0)
    assert ds.aux.shape == (1, 80, 9)
    npt.assert_array_equal(ds.aux[0], tasks.embedding_series(80))
    assert ds.targets.shape == (1, 80, 2)


# === temporal embedding ===

def test_embedding_is_zero_at_origin_and_periodic():
    period = 40
    npt.assert_array_equal(tasks.temporal_embedding(0, period), 0.0)
    ts = np.arange(period)
    npt.assert_allclose(tasks.temporal_embedding(ts + period, period),
                        tasks.temporal_embedding(ts, period), atol=1e-9)
    with pytest.raises(ContractError):
        tasks.temporal_embedding(3, 0)


def test_embedding_frequencies_are_geometric():
    period = 64
    e = tasks.temporal_embedding(1, period)
    expect = np.sin(2.0 * np.pi * 2.0 ** np.arange(9) / period)
    npt.assert_allclose(e, expect, atol=1e-15)
    assert e.shape == (9,)


@pytest.mark.parametrize("period", [7, 8, 16, 17, 63, 64])
def test_embedding_collisions_depend_on_period_parity(period):
    # Integer-frequency sine ladders vanish at both 0 and period/2, so even
    # periods collide exactly there; odd periods are injective on [0, period).
    e = tasks.embedding_series(period)
    dist = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=2)
    dist[np.diag_indices(period)] = np.inf
    if period % 2 == 0:
        npt.assert_allclose(e[period // 2], 0.0, atol=1e-12)
        colliding = np.argwhere(dist < 1e-9)
        assert sorted(map(tuple, colliding)) == [(0, period // 2),
                                                 (period // 2, 0)]
    else:
        assert dist.min() > 1e-9


# === container format ===

def test_dataset_file_roundtrip(tmp_path):
    ds = tasks.gen_addition(12, 9, 0.5, 2, seed=13, split="test")
    path = tmp_path / "addition.mfds"
    tasks.write_dataset(path, ds)
    back = tasks.read_dataset(path)
    _assert_same_dataset(ds, back)
    assert back.descriptor["task"] == "addition"
    assert back.descriptor["seed"] == 13
    # The file regenerates as well as round-trips.
    _assert_same_dataset(back, tasks.regenerate(back.descriptor))


def test_dataset_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.mfds"
    path.write_bytes(b"PNG\x89 definitely not a dataset")
    with pytest.raises(ContractError):
        tasks.read_dataset(path)
    ds = tasks.gen_addition(4, 5, 0.5, 1, seed=0)
    good = tmp_path / "good.mfds"
    tasks.write_dataset(good, ds)
    truncated = tmp_path / "trunc.mfds"
    truncated.write_bytes(good.read_bytes()[:-16])
    with pytest.raises(ContractError):
        tasks.read_dataset(truncated)
