"""Vehicle and platoon error dynamics.

Each vehicle follows a first-order velocity lag driven by a desired-velocity
command ``a``::

    p(k+1) = p(k) + dt * v(k)
    v(k+1) = (1 - dt/tau) * v(k) + (dt/tau) * a(k)

Substituting ``u = (a - v) / tau`` turns every vehicle into the same discrete
double integrator, so a single controller acting on ``u`` serves a platoon with
arbitrary per-vehicle ``tau``.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_DT = 0.1
TAU_RANGE = (0.2, 0.8)


class VehicleState(NamedTuple):
    p: float
    v: float


class ErrorState(NamedTuple):
    ep: float
    ev: float


@dataclass(frozen=True)
class VehicleParams:
    """Lag constant and step; ``tau`` may be an array to step many vehicles at once."""

    tau: float
    dt: float = DEFAULT_DT

    def __post_init__(self):
        if not (np.all(np.isfinite(self.tau)) and np.isfinite(self.dt)):
            raise ValueError("tau and dt must be finite")
        if np.any(np.asarray(self.tau) <= 0) or self.dt <= 0:
            raise ValueError(f"tau and dt must be positive, got tau={self.tau}, dt={self.dt}")
        if np.any(self.dt >= np.asarray(self.tau)):
            raise ValueError(f"dt ({self.dt}) must be smaller than tau ({self.tau})")


@dataclass(frozen=True)
class NoiseConfig:
    dynamics_sigma: float = 0.02
    sensing_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.dynamics_sigma < 0 or self.sensing_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")


@dataclass
class PlatoonModel:
    """Stacked error dynamics ``x(k+1) = a_bar x(k) + b_bar u(k)``."""

    n: int
    dt: float
    a_bar: np.ndarray
    b_bar: np.ndarray
    desired_gaps: np.ndarray = field(default=None)

    @property
    def state_dim(self):
        return 2 * self.n


def _check_finite(*values):
    for val in values:
        if not np.all(np.isfinite(val)):
            raise ValueError(f"non-finite input: {val!r}")


def step_vehicle(s: VehicleState, a: float, params: VehicleParams) -> VehicleState:
    _check_finite(s.p, s.v, a)
    r = params.dt / params.tau
    return VehicleState(s.p + params.dt * s.v, (1.0 - r) * s.v + r * a)


def accel_to_desired_velocity(u, v, tau):
    """Desired-velocity command that realizes acceleration input ``u``."""
    if np.any(np.asarray(tau) <= 0):
        raise ValueError("tau must be positive")
    return tau * u + v


def desired_velocity_to_accel(a, v, tau):
    if np.any(np.asarray(tau) <= 0):
        raise ValueError("tau must be positive")
    return (a - v) / tau


def step_double_integrator(s: VehicleState, u: float, dt: float) -> VehicleState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    _check_finite(s.p, s.v, u)
    return VehicleState(s.p + dt * s.v, s.v + dt * u)


def error_from_states(pred: VehicleState, foll: VehicleState, gap: float) -> ErrorState:
    return ErrorState(pred.p - foll.p - gap, pred.v - foll.v)


def build_platoon_model(n: int, dt: float = DEFAULT_DT, gaps: Sequence[float] = None) -> PlatoonModel:
    """Block matrices of the platoon error system.

    ``a_bar`` holds ``n`` copies of ``A = [[1, dt], [0, 1]]`` on its diagonal.
    ``b_bar`` has ``-B`` on the diagonal blocks and ``+B`` one block below,
    with ``B = (0, dt)``. The first error block is measured against a virtual
    reference vehicle moving at constant speed.
    """
    if n < 1:
        raise ValueError(f"platoon size must be >= 1, got {n}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if gaps is None:
        gaps = np.full(n, 5.0)
    gaps = np.asarray(gaps, dtype=float)
    if gaps.shape != (n,):
        raise ValueError(f"expected {n} gaps, got shape {gaps.shape}")
    if np.any(gaps <= 0):
        raise ValueError("desired gaps must be positive")

    a = np.array([[1.0, dt], [0.0, 1.0]])
    b = np.array([0.0, dt])
    a_bar = np.kron(np.eye(n), a)
    b_bar = np.zeros((2 * n, n))
    for i in range(n):
        b_bar[2 * i : 2 * i + 2, i] = -b
        if i > 0:
            b_bar[2 * i : 2 * i + 2, i - 1] = b
    return PlatoonModel(n=n, dt=dt, a_bar=a_bar, b_bar=b_bar, desired_gaps=gaps)


def step_platoon_error(model: PlatoonModel, x, u):
    """Advance the stacked error state one step.

    Works on a single state (shape ``(2n,)``) or a batch (shape ``(B, 2n)``
    with ``u`` of shape ``(B, n)``). Uses the block structure directly rather
    than the dense matrices, which matters for ``n = 100``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != 2 * model.n or u.shape[-1] != model.n or x.shape[:-1] != u.shape[:-1]:
        raise ValueError(f"dimension mismatch: x {x.shape}, u {u.shape} for n={model.n}")
    dt = model.dt
    ep = x[..., 0::2]
    ev = x[..., 1::2]
    u_pred = np.zeros_like(u)
    u_pred[..., 1:] = u[..., :-1]
    out = np.empty_like(x)
    out[..., 0::2] = ep + dt * ev
    out[..., 1::2] = ev + dt * (u_pred - u)
    return out


def sample_taus(n: int, rng: np.random.Generator, low=TAU_RANGE[0], high=TAU_RANGE[1]):
    return rng.uniform(low, high, size=n)


def inject_noise(x, cfg: NoiseConfig, rng: np.random.Generator, kind="dynamics"):
    """Add i.i.d. zero-mean Gaussian noise with the configured sigma.

    ``kind`` picks ``"dynamics"`` or ``"sensing"``. A zero sigma returns the
    input unchanged and does not consume random numbers.
    """
    if kind == "dynamics":
        sigma = cfg.dynamics_sigma
    elif kind == "sensing":
        sigma = cfg.sensing_sigma
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    x = np.asarray(x, dtype=float)
    if sigma == 0:
        return x.copy()
    return x + rng.normal(0.0, sigma, size=x.shape)
