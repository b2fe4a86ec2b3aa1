"""Best-bound branch and bound over the binary variables of a MILP."""

import heapq
import itertools
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .lp import LpEngine
from .milp import MilpInstance

log = logging.getLogger(__name__)

INT_TOL = 1e-6
MAX_ORACLE_BINARIES = 20


@dataclass
class MilpSolution:
    status: str  # optimal | timeout | infeasible | cutoff
    value: float
    x: Optional[np.ndarray]
    nodes: int
    bound: float
    root_bound: float = np.nan
    incumbents: List[np.ndarray] = field(default_factory=list)
    wall_time_s: float = 0.0


class _TableauCache:
    """Keeps the most recent node tableaus so children skip refactoring."""

    def __init__(self, size):
        self.size = size
        self.data = OrderedDict()

    def put(self, key, tab):
        if self.size <= 0:
            return
        self.data[key] = tab
        self.data.move_to_end(key)
        while len(self.data) > self.size:
            self.data.popitem(last=False)

    def get(self, key):
        return self.data.pop(key, None)


def _most_fractional(x, binaries):
    if len(binaries) == 0:
        return None
    frac = np.abs(x[binaries] - np.round(x[binaries]))
    k = int(np.argmax(frac))  # lowest index wins ties
    if frac[k] <= INT_TOL:
        return None
    # most fractional = closest to 0.5
    dist = np.abs(x[binaries] - 0.5)
    dist[frac <= INT_TOL] = np.inf
    return int(binaries[int(np.argmin(dist))])


def branch_and_bound(
    m: MilpInstance,
    tol: float = 1e-6,
    timeout: Optional[float] = None,
    node_limit: int = 1_000_000,
    on_incumbent: Optional[Callable[[np.ndarray, float], None]] = None,
    stop_above: Optional[float] = None,
    cache_size: int = 128,
    cutoff: float = -np.inf,
) -> MilpSolution:
    """Maximize the MILP to within ``tol`` of the global optimum.

    Nodes are explored best-bound first and branch on the most fractional
    binary. Each node LP is warm-started from its parent. Incumbents come from
    rounding the binaries of a node's LP solution and re-solving, and from the
    instance's exact completion of the LP's input point when available.
    ``on_incumbent(x, value)`` sees every improving incumbent. ``stop_above``
    ends the search early once an incumbent exceeds it (status ``timeout``).
    ``cutoff`` is a value already achieved elsewhere: nodes that cannot beat it
    by more than ``tol`` are pruned, and if nothing does the status is
    ``cutoff`` with no point.
    """
    t0 = time.perf_counter()
    eng = LpEngine(m.lp)
    bins = m.binaries
    lb0, ub0 = m.lp.lb.copy(), m.lp.ub.copy()
    best_val, best_x = cutoff, None
    incumbents = []
    tried = set()  # rounded binary vectors already re-solved

    def offer(vals, value):
        nonlocal best_val, best_x
        if value > best_val + 1e-12:
            best_val = value
            best_x = vals[m.input_vars].copy()
            incumbents.append(best_x)
            if on_incumbent is not None:
                on_incumbent(best_x, value)

    def heuristics(res, state, lb, ub):
        if m.recipes:
            vals = m.assignment(res.x[m.input_vars])
            if m.is_feasible(vals, 1e-7):
                offer(vals, m.objective(vals))
        if len(bins):
            zr = np.round(res.x[bins])
            key = zr.astype(np.int8).tobytes()
            if key in tried:
                return
            tried.add(key)
            rl, ru = lb.copy(), ub.copy()
            rl[bins] = zr
            ru[bins] = zr
            r2, _ = eng.resolve(state, rl, ru, tableau=state[2])
            if r2.status == "optimal":
                offer(r2.x, r2.value)

    root, state = eng.solve(lb0, ub0)
    if root.status != "optimal":
        return MilpSolution("infeasible", -np.inf, None, 1, -np.inf, wall_time_s=time.perf_counter() - t0)
    root_bound = root.value
    if root_bound <= cutoff + tol:
        return MilpSolution("cutoff", -np.inf, None, 1, root_bound, root_bound, wall_time_s=time.perf_counter() - t0)
    heuristics(root, state, lb0, ub0)

    cache = _TableauCache(cache_size)
    counter = itertools.count()
    heap = []
    nodes = 1

    def push(res, st, lb, ub):
        key = next(counter)
        if _most_fractional(res.x, bins) is None:
            offer(res.x, res.value)
            return
        cache.put(key, st[2])
        heapq.heappush(heap, (-res.value, key, res, (st[0], st[1]), lb, ub))

    push(root, state, lb0, ub0)
    status = "optimal"
    while heap:
        neg_bound, key, res, st, lb, ub = heap[0]
        if -neg_bound <= best_val + tol:
            heap.clear()
            break
        if stop_above is not None and best_val > stop_above:
            status = "timeout"
            break
        if nodes >= node_limit or (timeout is not None and time.perf_counter() - t0 > timeout):
            status = "timeout"
            break
        heapq.heappop(heap)
        j = _most_fractional(res.x, bins)
        tab = cache.get(key)
        for val in (1.0, 0.0):
            clb, cub = lb.copy(), ub.copy()
            clb[j] = cub[j] = val
            cres, cst = eng.resolve(st, clb, cub, tableau=tab)
            nodes += 1
            if cres.status != "optimal":
                continue
            if cres.value <= best_val + tol:
                continue
            heuristics(cres, cst, clb, cub)
            if cres.value > best_val + tol:
                push(cres, cst, clb, cub)

    bound = max(best_val, -heap[0][0]) if heap else best_val
    if best_x is None:
        best_val = -np.inf
        if status == "optimal":
            status = "cutoff" if cutoff > -np.inf else "infeasible"
    return MilpSolution(
        status=status,
        value=best_val,
        x=best_x,
        nodes=nodes,
        bound=bound,
        root_bound=root_bound,
        incumbents=incumbents,
        wall_time_s=time.perf_counter() - t0,
    )


def exhaustive_oracle(m: MilpInstance) -> MilpSolution:
    """Enumerate every binary assignment and solve each LP from scratch."""
    k = m.n_binaries
    if k > MAX_ORACLE_BINARIES:
        raise ValueError(f"{k} binaries exceeds the oracle limit of {MAX_ORACLE_BINARIES}")
    t0 = time.perf_counter()
    eng = LpEngine(m.lp)
    best, best_x = -np.inf, None
    count = 0
    for bits in itertools.product((0.0, 1.0), repeat=k):
        lb, ub = m.lp.lb.copy(), m.lp.ub.copy()
        lb[m.binaries] = bits
        ub[m.binaries] = bits
        res, _ = eng.solve(lb, ub)
        count += 1
        if res.status == "optimal" and res.value > best:
            best, best_x = res.value, res.x[m.input_vars].copy()
    status = "optimal" if best_x is not None else "infeasible"
    return MilpSolution(status, best, best_x, count, best, wall_time_s=time.perf_counter() - t0)
