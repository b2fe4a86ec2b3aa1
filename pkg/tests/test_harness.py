import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from neuroplatoon.baselines import DmpcConfig
from neuroplatoon.dynamics import NoiseConfig
from neuroplatoon.harness import (
    METRICS_COLUMNS,
    TRAJECTORY_COLUMNS,
    ControllerSpec,
    LeadProfile,
    Scenario,
    TrialAborted,
    TrialRecord,
    detect_collisions,
    rmse_per_vehicle,
    run_experiment,
    run_trial,
    trial_seeds,
    write_metrics_csv,
    write_summary_json,
    write_trajectory_csv,
)
from neuroplatoon.nn import MlpParams, init_mlp, saturate_output

QUIET = NoiseConfig(0.0, 0.0)


def anchored_nn(seed=0):
    return saturate_output(init_mlp([2, 8, 8, 1], np.random.default_rng(seed), anchor_origin=True), 3.0)


def short(kind="linear", **kw):
    spec = ControllerSpec(kind, net=anchored_nn() if kind == "nn" else None)
    base = dict(n=6, profile=LeadProfile((0.0, 2.0, 4.0), (20.0, 22.0, 22.0)))
    base.update(kw)
    return Scenario(spec, **base)


# ---------------------------------------------------------------- profile


def test_default_profile_shape():
    p = LeadProfile()
    assert p.duration == 50.0
    assert Scenario(ControllerSpec("linear")).steps == 500
    np.testing.assert_allclose(p.speed([0, 12.5, 20, 27.5, 40]), [20, 22.5, 25, 22.5, 20])


@settings(max_examples=40, deadline=None)
@given(st.floats(-5.0, 60.0))
def test_profile_distance_is_integral_of_speed(t):
    p = LeadProfile()
    ref, _ = quad(lambda s: float(p.speed(s)), 0.0, t, points=[x for x in p.times if min(0, t) < x < max(0, t)] or None, limit=200)
    assert float(p.distance(t)) == pytest.approx(ref, abs=1e-9)


def test_profile_validation():
    with pytest.raises(ValueError):
        LeadProfile((0.0, 0.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        LeadProfile((0.0, 1.0), (1.0, -1.0))
    assert LeadProfile.constant(20.0, 10.0).distance(4.0) == pytest.approx(80.0)


def test_scenario_validation():
    spec = ControllerSpec("linear")
    with pytest.raises(ValueError):
        Scenario(spec, n=0)
    with pytest.raises(ValueError):
        Scenario(spec, gaps=-1.0)
    with pytest.raises(ValueError):
        Scenario(spec, tau=0.05)
    with pytest.raises(ValueError):
        Scenario(spec, initial="bogus")
    with pytest.raises(ValueError):
        ControllerSpec("nn")
    with pytest.raises(ValueError):
        ControllerSpec("pid")


# ---------------------------------------------------------------- trials


@pytest.mark.parametrize("kind", ["linear", "nn", "dmpc"])
def test_equilibrium_stays_at_zero_error(kind):
    sc = short(kind, profile=LeadProfile.constant(20.0, 3.0), noise=QUIET)
    rec = run_trial(sc, 0)
    tol = 1e-6 if kind == "dmpc" else 1e-9
    assert np.abs(rec.gap_errors).max() <= tol
    assert np.abs(rec.vel_errors).max() <= tol
    assert not rec.collisions


def test_lag_plant_realizes_double_integrator():
    sc = short("linear", noise=QUIET, initial="perturbed")
    rec = run_trial(sc, 3)
    np.testing.assert_allclose(rec.velocities[1:], rec.velocities[:-1] + sc.dt * rec.inputs, atol=1e-12)
    np.testing.assert_allclose(rec.positions[1:], rec.positions[:-1] + sc.dt * rec.velocities[:-1], atol=1e-12)


def test_trials_are_reproducible_and_seed_dependent():
    sc = short("nn")
    a, b = run_trial(sc, 5), run_trial(sc, 5)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.inputs.tobytes() == b.inputs.tobytes()
    c = run_trial(sc, 6)
    assert not np.array_equal(a.positions, c.positions)


def test_matched_seeds_share_taus_and_noise_across_controllers():
    seed = trial_seeds(0, 3)[1]
    recs = [run_trial(short(k), seed) for k in ("linear", "nn", "dmpc")]
    for r in recs[1:]:
        np.testing.assert_array_equal(r.taus, recs[0].taus)
    # the leader does not depend on the follower controller
    for r in recs[1:]:
        np.testing.assert_array_equal(r.positions[:, 0], recs[0].positions[:, 0])


def test_trial_seeds_are_stable():
    a = [s.generate_state(1)[0] for s in trial_seeds(0, 4)]
    b = [s.generate_state(1)[0] for s in trial_seeds(0, 4)]
    assert a == b and len(set(a)) == 4
    assert a[0] != trial_seeds(1, 1)[0].generate_state(1)[0]


def test_taus_stay_in_range():
    rec = run_trial(Scenario(ControllerSpec("linear"), n=50, steps=2), 0)
    assert rec.taus.min() >= 0.2 and rec.taus.max() <= 0.8


def test_errors_are_relative_to_predecessor():
    rec = run_trial(short("linear", initial="perturbed"), 2)
    gaps = 5.0
    np.testing.assert_allclose(rec.gap_errors[:, 1:], rec.positions[:, :-1] - rec.positions[:, 1:] - gaps, atol=1e-12)
    np.testing.assert_allclose(rec.vel_errors[:, 1:], rec.velocities[:, :-1] - rec.velocities[:, 1:], atol=1e-12)


def test_leader_tracks_profile():
    sc = short("linear", noise=QUIET, profile=LeadProfile((0.0, 5.0, 20.0), (20.0, 22.0, 22.0)))
    rec = run_trial(sc, 0)
    assert rec.velocities[-1, 0] == pytest.approx(22.0, abs=1e-3)


def test_diverging_controller_aborts():
    bad = MlpParams([np.array([[np.nan, 0.0]])], [np.zeros(1)])
    sc = Scenario(ControllerSpec("nn", net=bad), n=3, steps=5)
    with pytest.raises(TrialAborted):
        run_trial(sc, 0)
    with pytest.raises(RuntimeError):
        run_experiment(sc, trials=2)


# ---------------------------------------------------------------- metrics


def _record(positions):
    P = np.asarray(positions, dtype=float)
    z = np.zeros_like(P)
    return TrialRecord(P, z, z[:-1], z, z, np.full(P.shape[1], 0.5), 0.1)


def test_collision_onsets_only():
    # vehicle 1 touches vehicle 0 at step 1, stays in contact at step 2, separates, hits again at step 4
    rec = _record([[10, 5, 0], [10, 10, 0], [10, 11, 0], [10, 9, 0], [10, 10, 9.5]])
    ev = detect_collisions(rec)
    assert [(e.step, e.pair) for e in ev] == [(1, (0, 1)), (4, (0, 1))]
    assert ev[1].distance == 0.0


def test_no_collisions_when_ordered():
    assert detect_collisions(_record([[10, 5, 0], [11, 6, 1]])) == []


def test_rmse_examples():
    z = np.zeros((4, 3))
    ep = np.array([[1.0, 0.0, 3.0]] * 4)
    ev = np.array([[0.0, 2.0, 0.0], [0.0, -2.0, 0.0], [0.0, 2.0, 0.0], [0.0, -2.0, 0.0]])
    rec = TrialRecord(z, z, z[:-1], ep, ev, np.ones(3), 0.1)
    pos, vel = rmse_per_vehicle(rec)
    np.testing.assert_allclose(pos, [1.0, 0.0, 3.0])
    np.testing.assert_allclose(vel, [0.0, 2.0, 0.0])


def test_experiment_without_noise_has_zero_width_intervals():
    # without noise the closed loop is the same double integrator for every tau draw
    sc = short("linear", noise=QUIET)
    s = run_experiment(sc, trials=3)
    assert s.trials == 3 and s.aborted == 0
    np.testing.assert_allclose(s.pos_rmse_ci, 0.0, atol=1e-9)
    np.testing.assert_allclose(s.vel_rmse_ci, 0.0, atol=1e-9)


def test_experiment_interval_matches_t_formula():
    sc = short("linear")
    s = run_experiment(sc, trials=4, base_seed=2)
    pos = np.array([rmse_per_vehicle(run_trial(sc, seed))[0] for seed in trial_seeds(2, 4)])
    np.testing.assert_allclose(s.pos_rmse_mean, pos.mean(axis=0), atol=1e-12)
    # t(0.975, 3) = 3.182446305284263
    np.testing.assert_allclose(s.pos_rmse_ci, 3.182446305284263 * pos.std(axis=0, ddof=1) / 2.0, rtol=1e-9)
    assert s.tail_pos_rmse(3) == pytest.approx(pos.mean(axis=0)[3:].mean())
    with pytest.raises(ValueError):
        run_experiment(sc, trials=1)


def test_parallel_matches_serial():
    sc = short("nn")
    a = run_experiment(sc, trials=3, base_seed=1)
    b = run_experiment(sc, trials=3, base_seed=1, parallel=2)
    np.testing.assert_array_equal(a.pos_rmse_mean, b.pos_rmse_mean)
    assert a.collision_events == b.collision_events


def test_writers(tmp_path):
    sc = short("linear", steps=3)
    rec = run_trial(sc, 0)
    write_trajectory_csv(rec, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == TRAJECTORY_COLUMNS and len(rows) == 1 + 4 * sc.n
    assert rows[-1][5] == ""  # no input after the last state
    assert float(rows[1 + sc.n][3]) == rec.positions[1, 0]
    s = run_experiment(sc, trials=2)
    write_metrics_csv(s, tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == METRICS_COLUMNS and [r[0] for r in rows[1:]] == [str(i) for i in range(1, sc.n + 1)]
    write_summary_json(s, tmp_path / "s.json", {"controller": "linear"})
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["controller"] == "linear" and doc["trials"] == 2 and "tail_pos_rmse" in doc


def test_dmpc_uses_scenario_step():
    sc = short("dmpc", noise=QUIET)
    assert sc.controller.dmpc == DmpcConfig()
    rec = run_trial(sc, 0)
    assert np.abs(rec.inputs).max() <= 3.0 + 1e-12
