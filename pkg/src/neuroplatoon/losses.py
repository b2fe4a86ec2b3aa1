"""Lyapunov violation losses and the shaping loss on controller rollouts.

Everything here works on batches of stacked error states ``x`` of shape
``(B, 2n)`` (a single ``(2n,)`` vector is accepted too) and returns gradients
for both networks by reverse mode through :func:`neuroplatoon.nn.backward`.
"""

from dataclasses import dataclass

import numpy as np

from .dynamics import PlatoonModel, step_platoon_error
from .nn import Gradients, MlpParams, backward, forward


@dataclass(frozen=True)
class LyapunovHyper:
    eps1: float = 0.05
    eps2: float = 0.01
    lambda1: float = 1.0
    lambda2: float = 1.0
    # decrease factor 1 - eps2 instead of 1 + eps2
    strict: bool = False

    def __post_init__(self):
        if min(self.eps1, self.eps2, self.lambda1, self.lambda2) <= 0:
            raise ValueError("eps1, eps2, lambda1, lambda2 must be positive")
        if self.eps2 >= 1:
            raise ValueError("eps2 must be below 1")

    @property
    def decrease_factor(self):
        return 1.0 - self.eps2 if self.strict else 1.0 + self.eps2


@dataclass(frozen=True)
class ShapingWeights:
    threshold: float = 0.25
    safety: float = 10.0
    action: float = 0.01
    slew: float = 0.1
    stability: float = 1.0
    horizon: int = 10

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if min(self.safety, self.action, self.slew, self.stability) < 0:
            raise ValueError("shaping weights must be non-negative")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise ValueError(f"expected state dimension {dim}, got {x.shape[-1]}")
    return x


def controller_batch(pi: MlpParams, x, n):
    """Apply ``pi`` to every 2-vector block of ``x`` (shape ``(..., 2n)``)."""
    x = np.asarray(x, dtype=float)
    u = forward(pi, x.reshape(-1, 2))[0][:, 0]
    return u.reshape(x.shape[:-1] + (n,))


def loss_pos(V: MlpParams, x, eps1):
    x = _as_batch(x, V.n_in)
    return eps1 * np.abs(x).sum(axis=-1) - forward(V, x)[0][..., 0]


def loss_dec(V: MlpParams, pi: MlpParams, model: PlatoonModel, x, eps2, strict=False):
    x = _as_batch(x, 2 * model.n)
    if V.n_in != 2 * model.n:
        raise ValueError("V input size does not match the platoon")
    factor = (1.0 - eps2) if strict else (1.0 + eps2)
    xn = step_platoon_error(model, x, controller_batch(pi, x, model.n))
    return forward(V, xn)[0][..., 0] - factor * forward(V, x)[0][..., 0]


def lyapunov_loss(V, pi, model, x, hyper: LyapunovHyper):
    pos = loss_pos(V, x, hyper.eps1)
    dec = loss_dec(V, pi, model, x, hyper.eps2, hyper.strict)
    return hyper.lambda1 * np.maximum(pos, 0.0) + hyper.lambda2 * np.maximum(dec, 0.0)


def error_vjp(model: PlatoonModel, g_next):
    """Pull a gradient on ``x(k+1)`` back to ``x(k)`` and ``u(k)``."""
    dt = model.dt
    g_ep = g_next[..., 0::2]
    g_ev = g_next[..., 1::2]
    gx = np.empty_like(g_next)
    gx[..., 0::2] = g_ep
    gx[..., 1::2] = dt * g_ep + g_ev
    gu = -dt * g_ev
    gu[..., :-1] += dt * g_ev[..., 1:]
    return gx, gu


def lyapunov_loss_grad(V, pi, model, x, hyper: LyapunovHyper):
    """Mean Lyapunov loss over the batch with gradients for ``V`` and ``pi``.

    Returns ``(mean_loss, per_point_loss, grad_V, grad_pi)``.
    """
    x = np.atleast_2d(_as_batch(x, 2 * model.n))
    batch = x.shape[0]
    n = model.n
    c = hyper.decrease_factor
    v_now, tr_now = forward(V, x)
    u, tr_pi = forward(pi, x.reshape(-1, 2))
    xn = step_platoon_error(model, x, u[:, 0].reshape(batch, n))
    v_next, tr_next = forward(V, xn)
    pos = hyper.eps1 * np.abs(x).sum(axis=1) - v_now[:, 0]
    dec = v_next[:, 0] - c * v_now[:, 0]
    on_pos = (pos > 0).astype(float)
    on_dec = (dec > 0).astype(float)
    per_point = hyper.lambda1 * on_pos * pos + hyper.lambda2 * on_dec * dec

    g_now = (-hyper.lambda1 * on_pos - c * hyper.lambda2 * on_dec) / batch
    g_next = hyper.lambda2 * on_dec / batch
    gv1, _ = backward(V, tr_now, g_now[:, None])
    gv2, dxn = backward(V, tr_next, g_next[:, None])
    _, du = error_vjp(model, dxn)
    gpi, _ = backward(pi, tr_pi, du.reshape(-1, 1))
    return float(per_point.mean()), per_point, gv1 + gv2, gpi


def control_loss(pi: MlpParams, model: PlatoonModel, x0, w: ShapingWeights, gaps=None, with_grad=False):
    """Shaping loss over an ``w.horizon``-step closed-loop rollout from ``x0``.

    Returns ``(total, terms)`` where ``terms`` splits the total into
    ``safe``, ``comf`` and ``stab``; with ``with_grad`` a third element holds
    the gradient for ``pi``. ``x0`` may be one state or a batch, in which case
    the loss is summed over the batch.
    """
    x0 = _as_batch(x0, 2 * model.n)
    gaps = np.asarray(model.desired_gaps if gaps is None else gaps, dtype=float)
    n = model.n
    xs = [np.atleast_2d(x0)]
    us, traces = [], []
    for _ in range(w.horizon):
        u, tr = forward(pi, xs[-1].reshape(-1, 2))
        u = u[:, 0].reshape(-1, n)
        us.append(u)
        traces.append(tr)
        xs.append(step_platoon_error(model, xs[-1], u))

    safe = comf = stab = 0.0
    gx = [np.zeros_like(x) for x in xs]
    gu = [np.zeros_like(u) for u in us]
    prev_u = np.zeros_like(us[0])
    for k in range(w.horizon):
        x_now, x_next, u = xs[k], xs[k + 1], us[k]
        short = np.maximum(w.threshold - (x_next[:, 0::2] + gaps), 0.0)
        safe += w.safety * float(np.sum(short**2))
        gx[k + 1][:, 0::2] -= 2.0 * w.safety * short

        du = u - prev_u
        comf += w.action * float(np.sum(u**2)) + w.slew * float(np.sum(du**2))
        gu[k] += 2.0 * w.action * u + 2.0 * w.slew * du
        if k > 0:
            gu[k - 1] -= 2.0 * w.slew * du
        prev_u = u

        r_now = np.hypot(x_now[:, 0::2], x_now[:, 1::2])
        r_next = np.hypot(x_next[:, 0::2], x_next[:, 1::2])
        grow = (r_next - r_now) > 0
        stab += w.stability * float(np.sum(np.where(grow, r_next - r_now, 0.0)))
        for r, xk, sign, g in ((r_next, x_next, 1.0, gx[k + 1]), (r_now, x_now, -1.0, gx[k])):
            # subgradient 0 where the norm vanishes
            scale = np.where(grow & (r > 0), sign * w.stability / np.where(r > 0, r, 1.0), 0.0)
            g[:, 0::2] += scale * xk[:, 0::2]
            g[:, 1::2] += scale * xk[:, 1::2]

    terms = {"safe": safe, "comf": comf, "stab": stab}
    total = safe + comf + stab
    if not with_grad:
        return total, terms
    grad = Gradients.zeros_like(pi)
    for k in range(w.horizon - 1, -1, -1):
        gxk, guk = error_vjp(model, gx[k + 1])
        gx[k] += gxk
        g_ctrl = gu[k] + guk
        gp, dx = backward(pi, traces[k], g_ctrl.reshape(-1, 1))
        grad = grad + gp
        gx[k] += dx.reshape(gx[k].shape)
    return total, terms, grad
