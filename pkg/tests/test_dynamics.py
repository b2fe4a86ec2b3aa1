import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuroplatoon.dynamics import (
    NoiseConfig,
    VehicleParams,
    VehicleState,
    accel_to_desired_velocity,
    build_platoon_model,
    desired_velocity_to_accel,
    error_from_states,
    inject_noise,
    step_double_integrator,
    step_platoon_error,
    step_vehicle,
)


def test_vehicle_params_validation():
    VehicleParams(0.3, 0.1)
    with pytest.raises(ValueError):
        VehicleParams(0.1, 0.1)
    with pytest.raises(ValueError):
        VehicleParams(-0.3, 0.1)
    with pytest.raises(ValueError):
        VehicleParams(float("nan"), 0.1)


@pytest.mark.parametrize(
    "s, a, tau, expected",
    [
        ((0.0, 2.0), 2.0, 0.3, (0.2, 2.0)),
        ((0.0, 0.0), 3.0, 0.3, (0.0, 1.0)),
        ((1.0, 0.0), 0.0, 0.5, (1.0, 0.0)),
    ],
)
def test_step_vehicle(s, a, tau, expected):
    out = step_vehicle(VehicleState(*s), a, VehicleParams(tau, 0.1))
    assert out == pytest.approx(expected, abs=1e-12)


def test_step_vehicle_rejects_nan():
    with pytest.raises(ValueError):
        step_vehicle(VehicleState(0.0, np.nan), 1.0, VehicleParams(0.3, 0.1))


def test_change_of_variable_examples():
    assert accel_to_desired_velocity(0.0, 2.0, 0.3) == 2.0
    assert accel_to_desired_velocity(10.0, 0.0, 0.3) == pytest.approx(3.0)
    assert desired_velocity_to_accel(2.0, 2.0, 0.3) == 0.0
    assert desired_velocity_to_accel(3.0, 0.0, 0.3) == pytest.approx(10.0)
    assert desired_velocity_to_accel(0.0, 4.0, 0.8) == pytest.approx(-5.0)


def test_change_of_variable_round_trip():
    rng = np.random.default_rng(0)
    u = rng.uniform(-5, 5, 1000)
    v = rng.uniform(0, 30, 1000)
    tau = rng.uniform(0.2, 0.8, 1000)
    back = desired_velocity_to_accel(accel_to_desired_velocity(u, v, tau), v, tau)
    np.testing.assert_allclose(back, u, rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "s, u, expected",
    [((1.0, 2.0), 0.0, (1.2, 2.0)), ((0.0, 0.0), 10.0, (0.0, 1.0)), ((0.0, 0.0), 0.0, (0.0, 0.0))],
)
def test_double_integrator(s, u, expected):
    assert step_double_integrator(VehicleState(*s), u, 0.1) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize(
    "pred, foll, gap, expected",
    [((10, 5), (4, 5), 5, (1, 0)), ((5, 5), (0, 5), 5, (0, 0)), ((0, 20), (-5, 25), 5, (0, -5))],
)
def test_error_from_states(pred, foll, gap, expected):
    assert error_from_states(VehicleState(*pred), VehicleState(*foll), gap) == expected


def test_platoon_matrices_n1():
    m = build_platoon_model(1, 0.1, [5.0])
    np.testing.assert_array_equal(m.a_bar, [[1, 0.1], [0, 1]])
    np.testing.assert_array_equal(m.b_bar, [[0], [-0.1]])


def test_platoon_matrices_n2():
    m = build_platoon_model(2, 0.1, [5.0, 5.0])
    b = np.array([0.0, 0.1])
    np.testing.assert_array_equal(m.b_bar[0:2, 0], -b)
    np.testing.assert_array_equal(m.b_bar[2:4, 0], b)
    np.testing.assert_array_equal(m.b_bar[2:4, 1], -b)
    np.testing.assert_array_equal(m.b_bar[0:2, 1], 0)


def test_platoon_matrices_n3_block_diagonal():
    m = build_platoon_model(3, 0.1, [5.0] * 3)
    a = np.array([[1, 0.1], [0, 1]])
    for i in range(3):
        for j in range(3):
            blk = m.a_bar[2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
            np.testing.assert_array_equal(blk, a if i == j else 0)


@pytest.mark.parametrize("n, gaps", [(0, []), (2, [5.0, 0.0]), (2, [5.0])])
def test_platoon_model_rejects(n, gaps):
    with pytest.raises(ValueError):
        build_platoon_model(n, 0.1, gaps)


def test_step_platoon_error_examples():
    m1 = build_platoon_model(1, 0.1, [5.0])
    np.testing.assert_array_equal(step_platoon_error(m1, np.zeros(2), np.zeros(1)), 0)
    np.testing.assert_allclose(step_platoon_error(m1, [1.0, 0.0], [0.0]), [1.0, 0.0])
    with pytest.raises(ValueError):
        step_platoon_error(m1, np.zeros(3), np.zeros(1))


def test_step_platoon_error_matches_matrices():
    rng = np.random.default_rng(1)
    for n in (1, 2, 5):
        m = build_platoon_model(n, 0.1, [5.0] * n)
        x = rng.normal(size=2 * n)
        u = rng.normal(size=n)
        np.testing.assert_allclose(step_platoon_error(m, x, u), m.a_bar @ x + m.b_bar @ u, atol=1e-14)


def _per_vehicle_errors(ref, states, gaps):
    errs = []
    pred = ref
    for s, g in zip(states, gaps):
        errs.extend(error_from_states(pred, s, g))
        pred = s
    return np.array(errs)


def test_platoon_error_consistent_with_vehicle_simulation():
    """Block error dynamics agree with stepping each vehicle separately."""
    rng = np.random.default_rng(2)
    dt = 0.1
    n = 2
    gaps = [5.0, 5.0]
    m = build_platoon_model(n, dt, gaps)
    for _ in range(1000):
        v_ref = rng.uniform(10, 30)
        ref = VehicleState(rng.uniform(-5, 5), v_ref)
        states = [VehicleState(rng.uniform(-20, 0), rng.uniform(10, 30)) for _ in range(n)]
        u = rng.uniform(-3, 3, n)
        x = _per_vehicle_errors(ref, states, gaps)
        ref2 = step_double_integrator(ref, 0.0, dt)
        states2 = [step_double_integrator(s, ui, dt) for s, ui in zip(states, u)]
        x2 = _per_vehicle_errors(ref2, states2, gaps)
        np.testing.assert_allclose(step_platoon_error(m, x, u), x2, rtol=0, atol=1e-12)


def test_change_of_variable_trajectory_equivalence():
    rng = np.random.default_rng(3)
    dt = 0.1
    for _ in range(10):
        tau = rng.uniform(0.2, 0.8)
        params = VehicleParams(tau, dt)
        us = rng.uniform(-3, 3, 1000)
        s1 = s2 = VehicleState(0.0, 20.0)
        for u in us:
            s1 = step_vehicle(s1, accel_to_desired_velocity(u, s1.v, tau), params)
            s2 = step_double_integrator(s2, u, dt)
            assert abs(s1.p - s2.p) < 1e-9 and abs(s1.v - s2.v) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6))
def test_origin_is_equilibrium(n):
    m = build_platoon_model(n, 0.1, [1.0] * n)
    out = step_platoon_error(m, np.zeros(2 * n), np.zeros(n))
    assert np.all(out == 0.0)


def test_inject_noise():
    x = np.arange(5.0)
    quiet = NoiseConfig(0.0, 0.0, 1)
    np.testing.assert_array_equal(inject_noise(x, quiet, np.random.default_rng(0)), x)
    cfg = NoiseConfig(0.01, 0.02, 7)
    r1 = np.random.default_rng(cfg.seed)
    r2 = np.random.default_rng(cfg.seed)
    a = [inject_noise(x, cfg, r1) for _ in range(3)]
    b = [inject_noise(x, cfg, r2) for _ in range(3)]
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p, q)
    big = inject_noise(np.zeros(1_000_000), cfg, np.random.default_rng(0))
    assert abs(big.std() - 0.01) < 0.01 * 0.01
    sens = inject_noise(np.zeros(1_000_000), cfg, np.random.default_rng(0), kind="sensing")
    assert abs(sens.std() - 0.02) < 0.02 * 0.01
    with pytest.raises(ValueError):
        NoiseConfig(-1.0, 0.0, 0)
