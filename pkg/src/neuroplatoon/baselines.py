"""Reference controllers: saturated linear feedback, leader speed tracking and
a predecessor-following distributed MPC.

All controllers output ``u`` in the double-integrator coordinates; the
simulation converts it to the vehicle command per vehicle.

In the DMPC every follower solves the same kind of box-constrained QP over
its next ``Hp`` inputs. Because all vehicles share the sampled double
integrator and the weights, the Hessian is common to the whole platoon and
the QPs are solved together by one batched ADMM iteration.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ._accel import kernel
from .dynamics import DEFAULT_DT, ErrorState

log = logging.getLogger(__name__)

K_LEAD = 2.0


@dataclass(frozen=True)
class LinearGains:
    kp: float = 1.0
    kv: float = 2.0
    u_max: float = 3.0

    def __post_init__(self):
        if self.kp <= 0 or self.kv <= 0 or self.u_max <= 0:
            raise ValueError("kp, kv and u_max must be positive")


@dataclass(frozen=True)
class DmpcConfig:
    horizon: int = 20
    q_p: float = 1.0
    q_v: float = 2.0
    r: float = 0.1
    f: float = 0.1
    u_max: float = 3.0
    terminal: bool = False
    dt: float = DEFAULT_DT
    tol: float = 1e-8
    max_iter: int = 5000

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.q_p <= 0 or self.q_v <= 0 or self.r < 0 or self.f < 0:
            raise ValueError("need q_p, q_v > 0 and r, f >= 0")
        if self.u_max <= 0 or self.dt <= 0:
            raise ValueError("u_max and dt must be positive")
        if self.terminal:
            raise ValueError("terminal constraints are not supported; use the soft costs")


@dataclass
class AssumedTrajectory:
    """Planned states at steps ``step+1 .. step+Hp`` from inputs applied at ``step .. step+Hp-1``."""

    step: int
    p: np.ndarray
    v: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        if not (self.p.shape == self.v.shape == self.u.shape) or self.p.ndim != 1:
            raise ValueError("p, v and u must be vectors of equal length")

    @property
    def horizon(self):
        return self.p.shape[0]

    @classmethod
    def constant_velocity(cls, step, p0, v0, horizon, dt=DEFAULT_DT):
        k = np.arange(1, horizon + 1)
        return cls(step, p0 + k * dt * v0, np.full(horizon, float(v0)), np.zeros(horizon))


def linear_feedback(e: ErrorState, g: LinearGains = LinearGains()):
    return float(np.clip(g.kp * e[0] + g.kv * e[1], -g.u_max, g.u_max))


def linear_feedback_batch(ep, ev, g: LinearGains = LinearGains()):
    return np.clip(g.kp * np.asarray(ep) + g.kv * np.asarray(ev), -g.u_max, g.u_max)


def leader_track(v_now, v_ref, u_max=3.0, k_lead=K_LEAD):
    return np.clip(k_lead * (np.asarray(v_ref) - np.asarray(v_now)), -u_max, u_max)


def update_assumed(prev: AssumedTrajectory, dt=DEFAULT_DT) -> AssumedTrajectory:
    """Shift the plan one step and extend it by holding the last input."""
    p_end = prev.p[-1] + dt * prev.v[-1]
    v_end = prev.v[-1] + dt * prev.u[-1]
    return AssumedTrajectory(
        prev.step + 1,
        np.append(prev.p[1:], p_end),
        np.append(prev.v[1:], v_end),
        np.append(prev.u[1:], prev.u[-1]),
    )


def rollout_plan(step, p0, v0, u, dt=DEFAULT_DT) -> AssumedTrajectory:
    """States reached from ``(p0, v0)`` under the input sequence ``u``."""
    u = np.asarray(u, dtype=float)
    v = v0 + dt * np.cumsum(u)
    v_prev = np.concatenate([[v0], v[:-1]])
    p = p0 + dt * np.cumsum(v_prev)
    return AssumedTrajectory(step, p, v, u.copy())


@lru_cache(maxsize=16)
def _prediction(horizon, dt):
    """Matrices with ``p = p0 + dt k v0 + Gp u`` and ``v = v0 + Gv u`` for k = 1..Hp."""
    k = np.arange(1, horizon + 1)[:, None]
    j = np.arange(horizon)[None, :]
    gv = np.where(j < k, dt, 0.0)
    gp = np.where(j <= k - 2, dt * dt * (k - 1 - j), 0.0)
    return gp, gv


@lru_cache(maxsize=16)
def _qp_factors(cfg: DmpcConfig):
    gp, gv = _prediction(cfg.horizon, cfg.dt)
    hess = 2.0 * ((cfg.q_p + cfg.f) * gp.T @ gp + (cfg.q_v + cfg.f) * gv.T @ gv + cfg.r * np.eye(cfg.horizon))
    eig = np.linalg.eigvalsh(hess)
    rho = float(np.sqrt(eig[0] * eig[-1]))
    m_inv = np.linalg.inv(hess + rho * np.eye(cfg.horizon))
    return hess, m_inv, rho


def qp_linear_terms(cfg: DmpcConfig, p0, v0, pred_p, pred_v, own_p, own_v, gap):
    """Gradient at ``u = 0`` of the DMPC cost for a batch of vehicles.

    All state arguments are ``(B,)`` (current) or ``(B, Hp)`` (plans).
    """
    gp, gv = _prediction(cfg.horizon, cfg.dt)
    k = np.arange(1, cfg.horizon + 1)
    p_free = p0[:, None] + cfg.dt * k * v0[:, None]
    v_free = np.broadcast_to(v0[:, None], p_free.shape)
    target_p = pred_p - np.asarray(gap, dtype=float).reshape(-1, 1)
    res_p = (cfg.q_p + cfg.f) * p_free - cfg.q_p * target_p - cfg.f * own_p
    res_v = (cfg.q_v + cfg.f) * v_free - cfg.q_v * pred_v - cfg.f * own_v
    return 2.0 * (res_p @ gp + res_v @ gv)


@kernel
def _row_max_abs(a):
    out = np.empty(a.shape[0])
    for i in range(a.shape[0]):
        out[i] = np.abs(a[i]).max()
    return out


@kernel
def admm_box_qp(m_inv, g, u_max, rho, tol, max_iter, z0):
    """Solve ``min 0.5 u'Hu + g'u, |u| <= u_max`` row by row for a batch.

    ``m_inv`` is ``(H + rho I)^-1``. Returns the box-feasible iterate, the
    number of iterations and, per row, whether both residuals met ``tol``.
    """
    z = np.minimum(np.maximum(z0.copy(), -u_max), u_max)
    y = np.zeros_like(z)
    u = z.copy()
    it = 0
    r_prim = np.full(z.shape[0], np.inf)
    r_dual = np.full(z.shape[0], np.inf)
    while it < max_iter:
        u = (rho * (z - y) - g) @ m_inv
        z_old = z
        z = np.minimum(np.maximum(u + y, -u_max), u_max)
        y = y + u - z
        it += 1
        r_prim = _row_max_abs(u - z)
        r_dual = rho * _row_max_abs(z - z_old)
        if r_prim.max() <= tol and r_dual.max() <= tol:
            break
    ok = (r_prim <= tol) & (r_dual <= tol)
    return z, it, ok


def solve_dmpc_qp(cfg: DmpcConfig, g, warm=None):
    """Batched box QP for the DMPC; returns ``(u, iterations, converged)``."""
    _, m_inv, rho = _qp_factors(cfg)
    g = np.ascontiguousarray(np.atleast_2d(g), dtype=float)
    z0 = np.zeros_like(g) if warm is None else np.ascontiguousarray(np.atleast_2d(warm), dtype=float)
    return admm_box_qp(m_inv, g, float(cfg.u_max), rho, float(cfg.tol), int(cfg.max_iter), z0)


def dmpc_cost(cfg: DmpcConfig, u, p0, v0, pred: AssumedTrajectory, own: AssumedTrajectory, gap):
    """Direct evaluation of the DMPC objective for one vehicle (test oracle)."""
    plan = rollout_plan(0, p0, v0, u, cfg.dt)
    return float(
        np.sum(cfg.q_p * (plan.p - pred.p + gap) ** 2 + cfg.q_v * (plan.v - pred.v) ** 2)
        + cfg.f * np.sum((plan.p - own.p) ** 2 + (plan.v - own.v) ** 2)
        + cfg.r * np.sum(np.asarray(u) ** 2)
    )


def dmpc_step_batch(step, p0, v0, pred_p, pred_v, own: list, cfg: DmpcConfig, gaps):
    """One DMPC update for several followers at once.

    ``pred_p``/``pred_v`` are the predecessors' shifted plans ``(B, Hp)``;
    ``own`` the followers' shifted plans. Returns first inputs and new plans.
    """
    p0 = np.asarray(p0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    own_p = np.array([t.p for t in own])
    own_v = np.array([t.v for t in own])
    warm = np.array([t.u for t in own])
    g = qp_linear_terms(cfg, p0, v0, pred_p, pred_v, own_p, own_v, gaps)
    u, _, ok = solve_dmpc_qp(cfg, g, warm)
    plans = []
    u0 = np.empty(p0.shape[0])
    for i in range(p0.shape[0]):
        if ok[i]:
            plans.append(rollout_plan(step, p0[i], v0[i], u[i], cfg.dt))
            u0[i] = u[i, 0]
        else:
            log.warning("DMPC QP did not converge for vehicle slot %d; reusing the shifted plan", i)
            plans.append(own[i])
            u0[i] = own[i].u[0]
    return u0, plans


def dmpc_step(state, pred: AssumedTrajectory, own: AssumedTrajectory, cfg: DmpcConfig, gap):
    """Single-vehicle DMPC update. ``state`` is ``(p, v)``; plans already shifted."""
    u0, plans = dmpc_step_batch(
        own.step, [state[0]], [state[1]], pred.p[None, :], pred.v[None, :], [own], cfg, [gap]
    )
    return float(u0[0]), plans[0]
