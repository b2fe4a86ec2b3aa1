"""MILP verification of the Lyapunov conditions for a (V, pi) pair."""

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..dynamics import PlatoonModel
from ..losses import LyapunovHyper
from ..nn import MlpParams
from .bnb import MilpSolution, branch_and_bound, exhaustive_oracle
from .bounds import ActivationBounds, propagate_bounds
from .lp import LinearProgram, LpResult, solve_lp
from .milp import MilpInstance, build_dec_milp, build_pos_milp
from .split import split_and_bound

MILP_TOL = 1e-6
DEFAULT_NODE_LIMIT = 1_000_000
DEFAULT_TIMEOUT_S = 1800.0


@dataclass
class VerificationReport:
    status: str  # certified | violated | timeout
    pos_opt: float
    dec_opt: float
    counterexample: Optional[np.ndarray]
    nodes: int
    wall_time_s: float
    pos: Optional[MilpSolution] = None
    dec: Optional[MilpSolution] = None

    @property
    def certified(self):
        return self.status == "certified"

    def to_dict(self):
        return {
            "status": self.status,
            "pos_opt": float(self.pos_opt),
            "dec_opt": float(self.dec_opt),
            "counterexample": None if self.counterexample is None else [float(v) for v in self.counterexample],
            "nodes": int(self.nodes),
            "wall_time_s": float(self.wall_time_s),
        }


def verify_pair(
    V: MlpParams,
    pi: MlpParams,
    model: PlatoonModel,
    lo,
    hi,
    hyper: LyapunovHyper = LyapunovHyper(),
    tol: float = MILP_TOL,
    timeout: Optional[float] = DEFAULT_TIMEOUT_S,
    node_limit: int = DEFAULT_NODE_LIMIT,
    tighten: bool = False,
    split: bool = True,
    on_incumbent: Optional[Callable[[np.ndarray, float], None]] = None,
) -> VerificationReport:
    """Solve both violation MILPs over the box ``[lo, hi]``.

    ``timeout`` and ``node_limit`` apply to each MILP separately. With
    ``split`` (the default) the box is partitioned by
    :func:`~neuroplatoon.verifier.split.split_and_bound`; otherwise a single
    activation branch and bound runs over the whole box. The report is
    ``certified`` only when both searches finished and neither optimum exceeds
    ``tol``; ``violated`` when some feasible point beats ``tol``; otherwise
    ``timeout``. The counterexample is the worst violator found.
    """
    t0 = time.perf_counter()
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    builders = (
        lambda a, b: build_pos_milp(V, a, b, hyper.eps1, tighten=tighten),
        lambda a, b: build_dec_milp(V, pi, model, a, b, hyper.eps2, hyper.strict, tighten=tighten),
    )
    sols = []
    for build in builders:
        if split:
            sol = split_and_bound(build, lo, hi, tol=tol, timeout=timeout, node_limit=node_limit, on_incumbent=on_incumbent)
        else:
            sol = branch_and_bound(build(lo, hi), tol=tol, timeout=timeout, node_limit=node_limit, on_incumbent=on_incumbent)
        sols.append(sol)
    pos, dec = sols
    worst = max(sols, key=lambda s: s.value)
    if worst.value > tol:
        status = "violated"
    elif all(s.status == "optimal" for s in sols):
        status = "certified"
    else:
        status = "timeout"
    cex = worst.x if status == "violated" else None
    return VerificationReport(
        status=status,
        pos_opt=pos.value,
        dec_opt=dec.value,
        counterexample=cex,
        nodes=pos.nodes + dec.nodes,
        wall_time_s=time.perf_counter() - t0,
        pos=pos,
        dec=dec,
    )


__all__ = [
    "ActivationBounds",
    "LinearProgram",
    "LpResult",
    "MilpInstance",
    "MilpSolution",
    "VerificationReport",
    "branch_and_bound",
    "build_dec_milp",
    "build_pos_milp",
    "exhaustive_oracle",
    "propagate_bounds",
    "solve_lp",
    "split_and_bound",
    "verify_pair",
]
