"""Counterexample-guided training of a Lyapunov function and a controller.

The outer loop picks a start state (the worst violator from the last
verification, or a random draw), the inner loop follows the closed loop from
there while taking one gradient step per visited state, and every episode ends
with a MILP check of both Lyapunov conditions over the current region.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .dynamics import PlatoonModel, step_platoon_error
from .losses import (
    LyapunovHyper,
    ShapingWeights,
    control_loss,
    controller_batch,
    loss_dec,
    loss_pos,
    lyapunov_loss,
    lyapunov_loss_grad,
)
from .nn import MlpParams, OptimizerState, optimizer_step
from .region import Region
from .verifier import MILP_TOL, VerificationReport, verify_pair
from .verifier.milp import build_dec_milp, build_pos_milp
from .verifier.split import split_and_bound

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["episode", "max_loss_pos", "max_loss_dec", "region_scale", "dataset_size", "wall_time_s"]


class CounterexampleSet:
    """Points that violated a Lyapunov condition, with their loss at insertion.

    Points closer than ``radius`` (infinity norm) to a stored point are
    dropped; once ``capacity`` is reached the oldest entries go first.
    """

    def __init__(self, dim, capacity=5000, radius=1e-4):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.dim = dim
        self.capacity = capacity
        self.radius = radius
        self._pts = np.empty((0, dim))
        self._vals = np.empty(0)

    def __len__(self):
        return self._pts.shape[0]

    @property
    def points(self):
        return self._pts

    @property
    def values(self):
        return self._vals

    def add(self, x, value):
        """Store ``x`` if ``value > 0`` and it is not a near-duplicate. Returns True if stored."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,) or not np.all(np.isfinite(x)):
            raise ValueError("bad counterexample point")
        if not value > 0:
            return False
        if len(self) and np.min(np.max(np.abs(self._pts - x), axis=1)) < self.radius:
            return False
        self._pts = np.vstack([self._pts, x])[-self.capacity :]
        self._vals = np.append(self._vals, float(value))[-self.capacity :]
        return True


@dataclass
class TrainConfig:
    eps_conv: float = 1e-3
    inner_cap: int = 500
    train_epochs: int = 300
    n_random: int = 256
    batch_size: int = 256
    lr: float = 1e-3
    start_mode: str = "milp"  # milp | random
    verify: bool = True
    harvest: bool = True
    tighten: bool = False
    tol: float = MILP_TOL
    # a cheap counterexample search runs every episode; the full proof only
    # when that search comes back empty
    search_node_limit: int = 2000
    search_timeout_s: float = 30.0
    proof_node_limit: int = 1_000_000
    proof_timeout_s: float = 1800.0
    dataset_capacity: int = 5000
    dataset_radius: float = 1e-4
    # loss estimate from random samples when verification is off
    n_probe: int = 2000

    def __post_init__(self):
        if self.start_mode not in ("milp", "random"):
            raise ValueError(f"unknown start_mode {self.start_mode!r}")
        if self.eps_conv <= 0 or self.inner_cap < 1 or self.train_epochs < 0:
            raise ValueError("eps_conv must be positive, inner_cap >= 1, train_epochs >= 0")


@dataclass
class HistoryRow:
    episode: int
    max_loss_pos: float
    max_loss_dec: float
    region_scale: float
    dataset_size: int
    wall_time_s: float


@dataclass
class TrainResult:
    V: MlpParams
    pi: MlpParams
    certified: bool
    history: List[HistoryRow] = field(default_factory=list)
    region: Optional[Region] = None
    report: Optional[VerificationReport] = None


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(HISTORY_COLUMNS)
        for row in history:
            d = asdict(row)
            wr.writerow([d[c] for c in HISTORY_COLUMNS])


def sample_start(region: Region, rng, mode="random", V=None, pi=None, model=None, hyper=LyapunovHyper(), **bnb_kwargs):
    """Start state for an episode.

    ``milp_pos`` / ``milp_dec`` return the maximizer of the matching violation
    MILP when its optimum is positive; otherwise (no violation, or the search
    ran out of budget) a uniform draw from the region is returned.
    """
    if mode == "random":
        return region.sample(rng)
    if mode not in ("milp_pos", "milp_dec"):
        raise ValueError(f"unknown mode {mode!r}")

    def build(a, b):
        if mode == "milp_pos":
            return build_pos_milp(V, a, b, hyper.eps1)
        return build_dec_milp(V, pi, model, a, b, hyper.eps2, hyper.strict)

    sol = split_and_bound(build, region.lower, region.upper, **bnb_kwargs)
    if sol.x is not None and sol.value > bnb_kwargs.get("tol", MILP_TOL):
        return sol.x.copy()
    if sol.status == "timeout":
        log.warning("verifier timed out while picking a start point; sampling at random")
    return region.sample(rng)


def train_on_dataset(
    V: MlpParams,
    pi: MlpParams,
    model: PlatoonModel,
    D: CounterexampleSet,
    hyper: LyapunovHyper,
    epochs: int = 300,
    rng=None,
    region: Optional[Region] = None,
    n_random: int = 256,
    batch_size: int = 256,
    opt_V: Optional[OptimizerState] = None,
    opt_pi: Optional[OptimizerState] = None,
):
    """Mini-batch Adam on the mean Lyapunov loss over ``D`` plus random points.

    Returns the mean loss of each epoch. An empty ``D`` is a no-op.
    """
    if len(D) == 0 or epochs == 0:
        return []
    rng = np.random.default_rng(0) if rng is None else rng
    opt_V = OptimizerState.for_net(V) if opt_V is None else opt_V
    opt_pi = OptimizerState.for_net(pi) if opt_pi is None else opt_pi
    pts = D.points
    if region is not None and n_random > 0:
        pts = np.vstack([pts, region.sample(rng, n_random)])
    curve = []
    for _ in range(epochs):
        order = rng.permutation(pts.shape[0])
        total = 0.0
        for s in range(0, len(order), batch_size):
            batch = pts[order[s : s + batch_size]]
            mean, _, g_v, g_pi = lyapunov_loss_grad(V, pi, model, batch, hyper)
            total += mean * batch.shape[0]
            optimizer_step(V, g_v, opt_V)
            optimizer_step(pi, g_pi, opt_pi)
        curve.append(total / pts.shape[0])
    return curve


def run_episode(V, pi, model, x, hyper, w, cfg: TrainConfig, D, opt_V, opt_pi):
    """Inner loop: follow the closed loop from ``x`` with one update per step.

    Returns the number of steps taken.
    """
    n = model.n
    steps = 0
    while steps < cfg.inner_cap and np.linalg.norm(x) >= cfg.eps_conv:
        if not np.all(np.isfinite(x)) or np.abs(x).max() > 1e6:
            log.warning("closed loop diverged; ending episode early")
            break
        _, per_point, g_v, g_pi = lyapunov_loss_grad(V, pi, model, x[None, :], hyper)
        if per_point[0] > 0:
            D.add(x, per_point[0])
        _, _, g_ctrl = control_loss(pi, model, x, w, with_grad=True)
        optimizer_step(V, g_v, opt_V)
        optimizer_step(pi, g_pi + g_ctrl, opt_pi)
        x = step_platoon_error(model, x, controller_batch(pi, x, n))
        steps += 1
    return steps


def _verify(V, pi, model, region, hyper, cfg, D, proof):
    def harvest(x, value):
        if cfg.harvest and value > cfg.tol:
            D.add(x, float(lyapunov_loss(V, pi, model, x, hyper)))

    return verify_pair(
        V,
        pi,
        model,
        region.lower,
        region.upper,
        hyper,
        tol=cfg.tol,
        timeout=cfg.proof_timeout_s if proof else cfg.search_timeout_s,
        node_limit=cfg.proof_node_limit if proof else cfg.search_node_limit,
        tighten=cfg.tighten,
        on_incumbent=harvest,
    )


def guided_train(
    V: MlpParams,
    pi: MlpParams,
    model: PlatoonModel,
    region: Region,
    hyper: LyapunovHyper = LyapunovHyper(),
    w: ShapingWeights = ShapingWeights(),
    budget: int = 200,
    rng=None,
    cfg: TrainConfig = TrainConfig(),
    on_episode=None,
) -> TrainResult:
    """Alternate closed-loop training episodes with MILP verification.

    The networks are updated in place. ``budget`` caps the number of episodes.
    When verification is on the run stops as soon as both violation optima
    are at most ``cfg.tol`` on the target region; certification on a smaller
    region grows it first. ``on_episode(row)`` sees each history row.
    """
    if V.n_in != 2 * model.n or pi.n_in != 2 or pi.n_out != 1:
        raise ValueError("networks are not dimensioned for this platoon")
    if region.dim != 2 * model.n:
        raise ValueError("region dimension does not match the platoon")
    rng = np.random.default_rng(0) if rng is None else rng
    t0 = time.perf_counter()
    result = TrainResult(V, pi, False, [], region)
    if budget <= 0:
        return result
    opt_V = OptimizerState.for_net(V, lr=cfg.lr)
    opt_pi = OptimizerState.for_net(pi, lr=cfg.lr)
    D = CounterexampleSet(2 * model.n, cfg.dataset_capacity, cfg.dataset_radius)
    start = None
    best = (np.inf, V.copy(), pi.copy())

    for episode in range(1, budget + 1):
        if start is None or cfg.start_mode == "random":
            x = region.sample(rng)
        else:
            x = np.clip(start, region.lower, region.upper)
        run_episode(V, pi, model, x, hyper, w, cfg, D, opt_V, opt_pi)

        report = None
        if cfg.verify:
            report = _verify(V, pi, model, region, hyper, cfg, D, proof=False)
            if report.status == "timeout":
                report = _verify(V, pi, model, region, hyper, cfg, D, proof=True)
            pos_val, dec_val = report.pos_opt, report.dec_opt
            start = report.counterexample
        else:
            probe = region.sample(rng, cfg.n_probe)
            pos_val = float(loss_pos(V, probe, hyper.eps1).max())
            dec_val = float(loss_dec(V, pi, model, probe, hyper.eps2, hyper.strict).max())

        row = HistoryRow(episode, pos_val, dec_val, region.scale, len(D), time.perf_counter() - t0)
        result.history.append(row)
        if on_episode is not None:
            on_episode(row)
        log.info("episode %d: pos %.3g dec %.3g scale %.3g |D| %d", episode, pos_val, dec_val, region.scale, len(D))

        worst = max(pos_val, dec_val)
        if worst < best[0]:
            best = (worst, V.copy(), pi.copy())

        if report is not None and report.certified:
            if region.at_target:
                result.certified = True
                result.report = report
                result.region = region
                return result
            region = region.grow()
            result.region = region
            start = None
            continue
        train_on_dataset(V, pi, model, D, hyper, cfg.train_epochs, rng, region, cfg.n_random, cfg.batch_size, opt_V, opt_pi)

    # budget exhausted: hand back the best pair seen
    _, best_V, best_pi = best
    for dst, src in ((V, best_V), (pi, best_pi)):
        for i in range(len(dst.weights)):
            dst.weights[i][...] = src.weights[i]
            dst.biases[i][...] = src.biases[i]
        dst.version += 1
    result.region = region
    return result
