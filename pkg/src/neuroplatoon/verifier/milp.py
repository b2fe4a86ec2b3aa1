"""Big-M MILP encodings of the Lyapunov violation problems.

Every variable the encoder creates also gets a recipe describing how to compute
it from the input point, so :meth:`MilpInstance.assignment` can build the
feasible completion of any ``x`` in the box. That serves both as a primal
heuristic inside branch and bound and as the encoder's consistency oracle.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..dynamics import PlatoonModel
from ..losses import loss_dec, loss_pos
from ..nn import MlpParams, leaky_relu
from .bounds import affine_interval
from .lp import EQ, LE, LinearProgram, LpEngine


@dataclass
class MilpInstance:
    lp: LinearProgram
    binaries: np.ndarray
    roles: Dict[int, Tuple]
    input_vars: np.ndarray
    recipes: List[Tuple]
    kind: str = ""
    loss: Optional[Callable] = None

    @property
    def n_binaries(self):
        return int(self.binaries.shape[0])

    def assignment(self, x):
        """Feasible completion of the input point ``x`` (all variables)."""
        vals = np.zeros(self.lp.n_vars)
        for var, rec in enumerate(self.recipes):
            op = rec[0]
            if op == "input":
                vals[var] = x[rec[1]]
            elif op == "affine":
                vals[var] = rec[2] @ vals[rec[1]] + rec[3]
            elif op == "leaky":
                v = vals[rec[1]]
                vals[var] = v if v >= 0 else rec[2] * v
            elif op == "step":
                vals[var] = 1.0 if vals[rec[1]] >= 0 else 0.0
            elif op == "abs":
                vals[var] = abs(vals[rec[1]])
            else:  # pragma: no cover
                raise ValueError(op)
        return vals

    def objective(self, vals):
        return float(self.lp.c @ vals)

    def is_feasible(self, vals, tol=1e-9):
        lp = self.lp
        if np.any(vals < lp.lb - tol) or np.any(vals > lp.ub + tol):
            return False
        r = lp.A @ vals - lp.b
        le = lp.senses == LE
        return bool(np.all(r[le] <= tol * (1 + np.abs(lp.b[le]))) and np.all(np.abs(r[~le]) <= tol * (1 + np.abs(lp.b[~le]))))


class MilpBuilder:
    def __init__(self):
        self.lb: List[float] = []
        self.ub: List[float] = []
        self.recipes: List[Tuple] = []
        self.rows: List[Tuple[np.ndarray, np.ndarray, int, float]] = []
        self.binaries: List[int] = []
        self.roles: Dict[int, Tuple] = {}
        self.obj: Dict[int, float] = {}

    def add_var(self, lo, hi, recipe, binary=False, role=None):
        if lo > hi:
            raise ValueError(f"empty variable range [{lo}, {hi}]")
        idx = len(self.lb)
        self.lb.append(float(lo))
        self.ub.append(float(hi))
        self.recipes.append(recipe)
        if binary:
            self.binaries.append(idx)
            self.roles[idx] = role
        return idx

    def add_row(self, idx, coef, sense, rhs):
        self.rows.append((np.asarray(idx, dtype=np.int64), np.asarray(coef, dtype=float), sense, float(rhs)))

    def add_objective(self, var, coef):
        self.obj[var] = self.obj.get(var, 0.0) + coef

    def tighten(self, vars, lo, hi, mask=None):
        """Shrink ``[lo, hi]`` for ``vars`` by optimizing over the current LP relaxation.

        Returns the tightened bounds and records them on the variables. Entries
        where ``mask`` is false keep their interval bounds.
        """
        lo = np.array(lo, dtype=float)
        hi = np.array(hi, dtype=float)
        if not self.rows:
            return lo, hi
        lp = self.build([]).lp
        eng = None
        state = None
        for k, var in enumerate(vars):
            if mask is not None and not mask[k]:
                continue
            for sign in (1.0, -1.0):
                c = np.zeros(lp.n_vars)
                c[var] = sign
                if state is None:
                    lp.c = c
                    eng = LpEngine(lp)
                    res, state = eng.solve()
                else:
                    res, st = eng.reoptimize(state, c)
                    state = st if st is not None else state
                if res.status != "optimal":
                    continue
                v = sign * res.value
                pad = 1e-9 * (1.0 + abs(v))
                if sign > 0:
                    hi[k] = min(hi[k], v + pad)
                else:
                    lo[k] = max(lo[k], v - pad)
            lo[k] = min(lo[k], hi[k])
            self.lb[var] = max(self.lb[var], lo[k])
            self.ub[var] = min(self.ub[var], hi[k])
        return lo, hi

    def build(self, input_vars, kind="", loss=None) -> MilpInstance:
        n = len(self.lb)
        m = len(self.rows)
        A = np.zeros((m, n))
        b = np.zeros(m)
        senses = np.zeros(m, dtype=np.int64)
        for i, (idx, coef, sense, rhs) in enumerate(self.rows):
            np.add.at(A[i], idx, coef)
            b[i] = rhs
            senses[i] = sense
        c = np.zeros(n)
        for var, coef in self.obj.items():
            c[var] = coef
        lp = LinearProgram(c, A, b, senses, np.array(self.lb), np.array(self.ub))
        return MilpInstance(
            lp=lp,
            binaries=np.array(self.binaries, dtype=np.int64),
            roles=dict(self.roles),
            input_vars=np.asarray(input_vars, dtype=np.int64),
            recipes=list(self.recipes),
            kind=kind,
            loss=loss,
        )


def encode_leaky_relu(mb: MilpBuilder, x, l, u, alpha, role=None):
    """Add ``y = leaky_relu(x)`` for ``x`` in ``[l, u]``; return ``(y, z)``.

    Stable neurons need no binary: ``y`` is ``x`` itself when ``l >= 0`` (or the
    slope is 1) and an equality ``y = alpha x`` when ``u <= 0``. Otherwise a
    binary ``z`` (1 on the positive branch) and six big-M rows make the
    encoding exact on ``[l, u]``.
    """
    if l > u:
        raise ValueError(f"invalid bounds [{l}, {u}]")
    if l >= 0 or alpha == 1.0:
        return x, None
    if u <= 0:
        y = mb.add_var(alpha * l, alpha * u, ("leaky", x, alpha))
        mb.add_row([y, x], [1.0, -alpha], EQ, 0.0)
        return y, None
    y = mb.add_var(alpha * l, u, ("leaky", x, alpha))
    z = mb.add_var(0.0, 1.0, ("step", x), binary=True, role=role)
    k = 1.0 - alpha
    mb.add_row([x, y], [1.0, -1.0], LE, 0.0)  # y >= x
    mb.add_row([x, y], [alpha, -1.0], LE, 0.0)  # y >= alpha x
    mb.add_row([y, x, z], [1.0, -1.0, -k * l], LE, -k * l)  # y <= x - k l (1 - z)
    mb.add_row([y, x, z], [1.0, -alpha, -k * u], LE, 0.0)  # y <= alpha x + k u z
    mb.add_row([x, z], [1.0, -u], LE, 0.0)  # x <= u z
    mb.add_row([x, z], [-1.0, -l], LE, -l)  # x >= l (1 - z)
    return y, z


def encode_abs(mb: MilpBuilder, x, lo, hi, role=None):
    """Add ``t = |x|`` for ``x`` in ``[lo, hi]``; return ``(t, s)``."""
    if lo >= 0:
        return x, None
    if hi <= 0:
        t = mb.add_var(-hi, -lo, ("abs", x))
        mb.add_row([t, x], [1.0, 1.0], EQ, 0.0)
        return t, None
    t = mb.add_var(0.0, max(-lo, hi), ("abs", x))
    s = mb.add_var(0.0, 1.0, ("step", x), binary=True, role=role)
    mb.add_row([x, t], [1.0, -1.0], LE, 0.0)  # t >= x
    mb.add_row([x, t], [-1.0, -1.0], LE, 0.0)  # t >= -x
    mb.add_row([t, x, s], [1.0, -1.0, -2.0 * lo], LE, -2.0 * lo)  # t <= x - 2 lo (1 - s)
    mb.add_row([t, x, s], [1.0, 1.0, -2.0 * hi], LE, 0.0)  # t <= -x + 2 hi s
    return t, s


def encode_affine(mb: MilpBuilder, in_vars, w_row, bias, lo, hi):
    """New variable equal to ``w_row @ in_vars + bias`` with bounds ``[lo, hi]``."""
    in_vars = np.asarray(in_vars, dtype=np.int64)
    w_row = np.asarray(w_row, dtype=float)
    z = mb.add_var(lo, hi, ("affine", in_vars, w_row, float(bias)))
    mb.add_row(np.concatenate([[z], in_vars]), np.concatenate([[1.0], -w_row]), EQ, bias)
    return z


def encode_network(mb: MilpBuilder, net: MlpParams, in_vars, lo, hi, tag, tighten=False):
    """Encode ``net`` on inputs ``in_vars`` ranging over ``[lo, hi]``.

    Big-M values come from interval propagation. With ``tighten`` every
    pre-activation that straddles zero (and every output) is further bounded by
    optimizing it over the LP relaxation encoded so far. Returns the output
    variable indices and their bounds.
    """
    h = list(in_vars)
    hlo = np.asarray(lo, dtype=float)
    hhi = np.asarray(hi, dtype=float)
    if hlo.shape != (net.n_in,) or np.any(hlo > hhi):
        raise ValueError("input box does not match the network")
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        zl, zu = affine_interval(w, b, hlo, hhi)
        pre = [encode_affine(mb, h, w[j], b[j], zl[j], zu[j]) for j in range(w.shape[0])]
        if tighten:
            mask = np.ones(len(pre), bool) if i == last else (zl < 0) & (zu > 0)
            zl, zu = mb.tighten(pre, zl, zu, mask)
        if i == last:
            return pre, (zl, zu)
        alpha = net.slopes[i]
        h = [encode_leaky_relu(mb, pre[j], zl[j], zu[j], alpha, role=(tag, i, j))[0] for j in range(w.shape[0])]
        hlo, hhi = leaky_relu(zl, alpha), leaky_relu(zu, alpha)


def _input_vars(mb: MilpBuilder, lo, hi):
    return [mb.add_var(lo[k], hi[k], ("input", k)) for k in range(len(lo))]


def build_pos_milp(V: MlpParams, lo, hi, eps1: float, tighten=False) -> MilpInstance:
    """max over the box of ``eps1 * ||x||_1 - V(x)``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    mb = MilpBuilder()
    xs = _input_vars(mb, lo, hi)
    for k, xv in enumerate(xs):
        t, _ = encode_abs(mb, xv, lo[k], hi[k], role=("abs", k))
        mb.add_objective(t, eps1)
    out, _ = encode_network(mb, V, xs, lo, hi, "V", tighten)
    mb.add_objective(out[0], -1.0)

    def loss(x):
        return loss_pos(V, x, eps1)

    return mb.build(xs, kind="pos", loss=loss)


def build_dec_milp(
    V: MlpParams, pi: MlpParams, model: PlatoonModel, lo, hi, eps2: float, strict=False, tighten=False
) -> MilpInstance:
    """max over the box of ``V(A x + B pi(x)) - c V(x)``.

    ``c = 1 + eps2`` by default; ``strict=True`` uses ``1 - eps2``.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = model.n
    if lo.shape != (2 * n,):
        raise ValueError("box dimension does not match the platoon")
    factor = (1.0 - eps2) if strict else (1.0 + eps2)
    mb = MilpBuilder()
    xs = _input_vars(mb, lo, hi)

    us, ulo, uhi = [], np.zeros(n), np.zeros(n)
    for i in range(n):
        blk = slice(2 * i, 2 * i + 2)
        out, (ol, ou) = encode_network(mb, pi, xs[blk], lo[blk], hi[blk], ("pi", i), tighten)
        us.append(out[0])
        ulo[i], uhi[i] = ol[0], ou[0]

    # x+ = A_bar x + B_bar u; its box follows from the x box and the controller range
    ab = np.hstack([model.a_bar, model.b_bar])
    nlo, nhi = affine_interval(ab, np.zeros(2 * n), np.concatenate([lo, ulo]), np.concatenate([hi, uhi]))
    xnext = []
    for r in range(2 * n):
        nz = np.nonzero(ab[r])[0]
        src = [(xs + us)[k] for k in nz]
        xnext.append(encode_affine(mb, src, ab[r, nz], 0.0, nlo[r], nhi[r]))
    if tighten:
        nlo, nhi = mb.tighten(xnext, nlo, nhi)

    v_now, _ = encode_network(mb, V, xs, lo, hi, "V", tighten)
    v_next, _ = encode_network(mb, V, xnext, nlo, nhi, "V+", tighten)
    mb.add_objective(v_next[0], 1.0)
    mb.add_objective(v_now[0], -factor)

    def loss(x):
        return loss_dec(V, pi, model, x, eps2, strict)

    return mb.build(xs, kind="dec", loss=loss)
