"""Closed-loop platoon simulation, collision detection and RMSE statistics.

Vehicles are indexed from 0 (the platoon leader) to ``n - 1``. Ahead of the
leader drives a virtual reference vehicle that follows the lead speed profile
exactly; the leader's errors are measured against it. Controllers act in the
double-integrator coordinates and each vehicle converts its ``u`` into the
command of its own first-order lag.
"""

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .baselines import (
    AssumedTrajectory,
    DmpcConfig,
    LinearGains,
    K_LEAD,
    dmpc_step_batch,
    leader_track,
    linear_feedback_batch,
    rollout_plan,
    update_assumed,
)
from .dynamics import DEFAULT_DT, TAU_RANGE, NoiseConfig, accel_to_desired_velocity
from .nn import MlpParams, forward

log = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["step", "time_s", "vehicle", "position_m", "velocity_mps", "input_mps2", "gap_error_m", "vel_error_mps"]
METRICS_COLUMNS = ["vehicle", "pos_rmse_mean", "pos_rmse_ci", "vel_rmse_mean", "vel_rmse_ci"]


class TrialAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class LeadProfile:
    """Piecewise-linear reference speed through ``(time, speed)`` knots."""

    times: Tuple[float, ...] = (0.0, 10.0, 15.0, 25.0, 30.0, 50.0)
    speeds: Tuple[float, ...] = (20.0, 20.0, 25.0, 25.0, 20.0, 20.0)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.speeds, dtype=float)
        if t.shape != s.shape or t.size < 1:
            raise ValueError("need matching, non-empty time and speed knots")
        if np.any(np.diff(t) <= 0):
            raise ValueError("profile times must increase")
        if np.any(s < 0):
            raise ValueError("profile speeds must be non-negative")

    @classmethod
    def constant(cls, speed, duration):
        return cls((0.0, float(duration)), (float(speed), float(speed)))

    @property
    def duration(self):
        return float(self.times[-1] - self.times[0])

    def speed(self, t):
        return np.interp(t, self.times, self.speeds)

    def distance(self, t):
        """Distance covered since the first knot (exact for the linear pieces)."""
        t = np.asarray(t, dtype=float)
        kt = np.asarray(self.times, dtype=float)
        ks = np.asarray(self.speeds, dtype=float)
        seg = np.concatenate([[0.0], np.cumsum(0.5 * (ks[1:] + ks[:-1]) * np.diff(kt))])
        tc = np.clip(t, kt[0], kt[-1])
        i = np.clip(np.searchsorted(kt, tc, side="right") - 1, 0, max(len(kt) - 2, 0))
        partial = 0.5 * (ks[i] + self.speed(tc)) * (tc - kt[i]) if len(kt) > 1 else 0.0
        extra = ks[-1] * np.maximum(t - kt[-1], 0.0) + ks[0] * np.minimum(t - kt[0], 0.0)
        return seg[i] + partial + extra


@dataclass
class ControllerSpec:
    kind: str  # nn | linear | dmpc
    net: Optional[MlpParams] = None
    gains: LinearGains = LinearGains()
    dmpc: DmpcConfig = DmpcConfig()
    u_max: float = 3.0

    def __post_init__(self):
        if self.kind not in ("nn", "linear", "dmpc"):
            raise ValueError(f"unknown controller kind {self.kind!r}")
        if self.kind == "nn" and self.net is None:
            raise ValueError("nn controller needs a network")


@dataclass
class Scenario:
    controller: ControllerSpec
    n: int = 100
    dt: float = DEFAULT_DT
    steps: Optional[int] = None
    gaps: Union[float, Sequence[float]] = 5.0
    tau: Union[float, Tuple[float, float]] = TAU_RANGE
    profile: LeadProfile = LeadProfile()
    noise: NoiseConfig = NoiseConfig()
    initial: str = "formation"  # formation | perturbed
    k_lead: float = K_LEAD

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one vehicle")
        if self.steps is None:
            self.steps = int(round(self.profile.duration / self.dt))
        if self.steps < 1:
            raise ValueError("need at least one step")
        gaps = np.broadcast_to(np.asarray(self.gaps, dtype=float), (self.n,))
        if np.any(gaps <= 0):
            raise ValueError("gaps must be positive")
        self.gaps = gaps.copy()
        lo, hi = (self.tau, self.tau) if np.isscalar(self.tau) else self.tau
        if not 0 < lo <= hi or lo <= self.dt:
            raise ValueError("tau values must exceed dt")
        if self.initial not in ("formation", "perturbed"):
            raise ValueError(f"unknown initial condition {self.initial!r}")


@dataclass
class CollisionEvent:
    step: int
    pair: Tuple[int, int]
    distance: float


@dataclass
class TrialRecord:
    positions: np.ndarray  # (steps + 1, n)
    velocities: np.ndarray
    inputs: np.ndarray  # (steps, n)
    gap_errors: np.ndarray  # (steps + 1, n)
    vel_errors: np.ndarray
    taus: np.ndarray
    dt: float
    collisions: List[CollisionEvent] = field(default_factory=list)


def _taus(sc: Scenario, rng):
    if np.isscalar(sc.tau):
        return np.full(sc.n, float(sc.tau))
    return rng.uniform(sc.tau[0], sc.tau[1], size=sc.n)


def _leader_plan(step, p0, v0, sc: Scenario, horizon):
    """Plan the leader would broadcast: its speed tracker rolled out on the profile."""
    dt = sc.dt
    p, v = p0, v0
    u = np.empty(horizon)
    for k in range(horizon):
        u[k] = leader_track(v, sc.profile.speed((step + k) * dt), sc.controller.u_max, sc.k_lead)
        p, v = p + dt * v, v + dt * u[k]
    return rollout_plan(step, p0, v0, u, dt)


def run_trial(sc: Scenario, seed) -> TrialRecord:
    """Simulate one trial. The same ``seed`` draws the same taus and noise for
    every controller, so trials are matched across controllers."""
    rng = np.random.default_rng(seed)
    n, dt, T = sc.n, sc.dt, sc.steps
    ctrl = sc.controller
    gaps = sc.gaps
    taus = _taus(sc, rng)
    offsets = rng.uniform(-1.0, 1.0, size=n) if sc.initial == "perturbed" else np.zeros(n)

    v0 = float(sc.profile.speed(0.0))
    ref0 = gaps[0]
    p = ref0 - np.cumsum(gaps) + offsets
    v = np.full(n, v0)

    P = np.empty((T + 1, n))
    Vel = np.empty((T + 1, n))
    U = np.empty((T, n))
    EP = np.empty((T + 1, n))
    EV = np.empty((T + 1, n))

    def errors(k, p, v):
        t = k * dt
        pred_p = np.concatenate([[ref0 + sc.profile.distance(t)], p[:-1]])
        pred_v = np.concatenate([[sc.profile.speed(t)], v[:-1]])
        return pred_p - p - gaps, pred_v - v

    if ctrl.kind == "dmpc":
        hp = ctrl.dmpc.horizon
        plans = [AssumedTrajectory.constant_velocity(0, p[i], v[i], hp, dt) for i in range(n)]
        plans[0] = _leader_plan(0, p[0], v[0], sc, hp)

    for k in range(T + 1):
        ep, ev = errors(k, p, v)
        P[k], Vel[k], EP[k], EV[k] = p, v, ep, ev
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise TrialAborted(f"non-finite state at step {k}")
        if k == T:
            break
        sense = rng.normal(0.0, sc.noise.sensing_sigma, size=(n, 2)) if sc.noise.sensing_sigma > 0 else np.zeros((n, 2))
        u = np.empty(n)
        u[0] = leader_track(v[0] + sense[0, 1], sc.profile.speed(k * dt), ctrl.u_max, sc.k_lead)
        if n > 1:
            if ctrl.kind == "nn":
                obs = np.stack([ep[1:] + sense[1:, 0], ev[1:] + sense[1:, 1]], axis=1)
                u[1:] = forward(ctrl.net, obs)[0][:, 0]
            elif ctrl.kind == "linear":
                u[1:] = linear_feedback_batch(ep[1:] + sense[1:, 0], ev[1:] + sense[1:, 1], ctrl.gains)
            else:
                # plans from the previous step cover k+1.., shift them to k+2..
                shifted = plans if k == 0 else [update_assumed(pl, dt) for pl in plans]
                pred_p = np.array([pl.p for pl in shifted[:-1]])
                pred_v = np.array([pl.v for pl in shifted[:-1]])
                u[1:], new = dmpc_step_batch(
                    k, p[1:] + sense[1:, 0], v[1:] + sense[1:, 1], pred_p, pred_v, shifted[1:], ctrl.dmpc, gaps[1:]
                )
                plans = [_leader_plan(k, p[0], v[0], sc, hp)] + list(new)
        U[k] = u
        # each vehicle turns u into its lag command using its own speed
        cmd = accel_to_desired_velocity(u, v, taus)
        p, v = p + dt * v, v + (dt / taus) * (cmd - v)
        if sc.noise.dynamics_sigma > 0:
            kick = rng.normal(0.0, sc.noise.dynamics_sigma, size=(n, 2))
            p, v = p + kick[:, 0], v + kick[:, 1]

    rec = TrialRecord(P, Vel, U, EP, EV, taus, dt)
    rec.collisions = detect_collisions(rec)
    return rec


def detect_collisions(rec: TrialRecord, gaps=None) -> List[CollisionEvent]:
    """Onsets of ``p[i-1] - p[i] <= 0`` between consecutive vehicles.

    A pair that stays in contact produces one event, at the first step.
    ``gaps`` is accepted for symmetry with the error view and is unused:
    distances come straight from positions.
    """
    dist = rec.positions[:, :-1] - rec.positions[:, 1:]
    hit = dist <= 0
    onset = hit.copy()
    onset[1:] &= ~hit[:-1]
    events = []
    for step, j in zip(*np.nonzero(onset)):
        events.append(CollisionEvent(int(step), (int(j), int(j) + 1), float(dist[step, j])))
    return events


def rmse_per_vehicle(rec: TrialRecord):
    pos = np.sqrt(np.mean(rec.gap_errors**2, axis=0))
    vel = np.sqrt(np.mean(rec.vel_errors**2, axis=0))
    return pos, vel


@dataclass
class MetricsSummary:
    pos_rmse_mean: np.ndarray
    pos_rmse_ci: np.ndarray
    vel_rmse_mean: np.ndarray
    vel_rmse_ci: np.ndarray
    collisions: int
    collisions_per_trial: List[int]
    collision_events: List[Tuple[int, int, Tuple[int, int]]]
    trials: int
    aborted: int
    wall_time_s: float

    def tail_pos_rmse(self, start=None):
        """Mean position RMSE over vehicles ``start..n-1`` (0-based).

        The default is the rear half of the platoon (50..99 for 100 vehicles).
        """
        start = self.pos_rmse_mean.shape[0] // 2 if start is None else start
        return float(np.mean(self.pos_rmse_mean[start:]))

    def to_dict(self):
        return {
            "trials": self.trials,
            "aborted": self.aborted,
            "collisions": self.collisions,
            "collisions_per_trial": self.collisions_per_trial,
            "collision_events": [{"trial": t, "step": s, "pair": list(p)} for t, s, p in self.collision_events],
            "tail_pos_rmse": self.tail_pos_rmse(),
            "wall_time_s": self.wall_time_s,
        }


def trial_seeds(base_seed, trials):
    """Per-trial seeds; the same base seed gives the same list for every controller."""
    return [np.random.SeedSequence(base_seed, spawn_key=(k,)) for k in range(trials)]


def _trial_metrics(args):
    sc, seed = args
    try:
        rec = run_trial(sc, seed)
    except TrialAborted as exc:
        return None, str(exc)
    pos, vel = rmse_per_vehicle(rec)
    return (pos, vel, [(c.step, c.pair) for c in rec.collisions]), None


def _ci(samples):
    k = samples.shape[0]
    if k < 2:
        return np.zeros(samples.shape[1])
    return stats.t.ppf(0.975, k - 1) * samples.std(axis=0, ddof=1) / np.sqrt(k)


def run_experiment(sc: Scenario, trials: int = 10, base_seed: int = 0, parallel: int = 1) -> MetricsSummary:
    """Run matched-seed trials and aggregate per-vehicle RMSE with 95% t intervals."""
    if trials < 2:
        raise ValueError("need at least two trials")
    t0 = time.perf_counter()
    jobs = [(sc, s) for s in trial_seeds(base_seed, trials)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            results = list(ex.map(_trial_metrics, jobs))
    else:
        results = [_trial_metrics(j) for j in jobs]
    pos, vel, per_trial, events = [], [], [], []
    aborted = 0
    for idx, (res, err) in enumerate(results):
        if res is None:
            log.warning("trial %d aborted: %s", idx, err)
            aborted += 1
            continue
        pos.append(res[0])
        vel.append(res[1])
        per_trial.append(len(res[2]))
        events.extend((idx, s, pr) for s, pr in res[2])
    if len(pos) < 2:
        raise RuntimeError("fewer than two trials completed")
    pos = np.array(pos)
    vel = np.array(vel)
    return MetricsSummary(
        pos_rmse_mean=pos.mean(axis=0),
        pos_rmse_ci=_ci(pos),
        vel_rmse_mean=vel.mean(axis=0),
        vel_rmse_ci=_ci(vel),
        collisions=int(sum(per_trial)),
        collisions_per_trial=per_trial,
        collision_events=events,
        trials=len(pos),
        aborted=aborted,
        wall_time_s=time.perf_counter() - t0,
    )


def write_trajectory_csv(rec: TrialRecord, path):
    T1, n = rec.positions.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRAJECTORY_COLUMNS)
        for k in range(T1):
            u = rec.inputs[k] if k < rec.inputs.shape[0] else np.full(n, np.nan)
            for i in range(n):
                wr.writerow(
                    [k, repr(round(k * rec.dt, 10)), i + 1, repr(float(rec.positions[k, i])), repr(float(rec.velocities[k, i])),
                     "" if np.isnan(u[i]) else repr(float(u[i])), repr(float(rec.gap_errors[k, i])), repr(float(rec.vel_errors[k, i]))]
                )


def write_metrics_csv(summary: MetricsSummary, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRICS_COLUMNS)
        for i in range(summary.pos_rmse_mean.shape[0]):
            wr.writerow(
                [i + 1, repr(float(summary.pos_rmse_mean[i])), repr(float(summary.pos_rmse_ci[i])),
                 repr(float(summary.vel_rmse_mean[i])), repr(float(summary.vel_rmse_ci[i]))]
            )


def write_summary_json(summary: MetricsSummary, path, extra=None):
    doc = summary.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
