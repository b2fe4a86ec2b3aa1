"""Compare the numba kernels against the pure-numpy fallback.

Each workload runs in a fresh interpreter, once with numba and once with
``NEUROPLATOON_DISABLE_NUMBA=1``, so the flag is honoured at import time.
Both runs must agree on their results; timings exclude a warm-up call
(which also absorbs numba compilation).

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

WORKLOADS = ("lp_root", "bnb_small", "dmpc_qp", "dmpc_trial")


def _dec_instance(seed=0):
    from neuroplatoon.dynamics import build_platoon_model
    from neuroplatoon.nn import init_mlp, saturate_output
    from neuroplatoon.verifier import build_dec_milp

    rng = np.random.default_rng(seed)
    V = init_mlp([2, 8, 8, 1], rng, zero_bias=True)
    pi = saturate_output(init_mlp([2, 8, 8, 1], rng, anchor_origin=True), 3.0)
    model = build_platoon_model(1, 0.1, [0.75])
    return build_dec_milp(V, pi, model, np.full(2, -0.5), np.full(2, 0.5), 0.01)


def _run(name):
    """Return ``(callable, digest)`` where ``digest`` summarises the result."""
    if name == "lp_root":
        from neuroplatoon.verifier.lp import LpEngine

        m = _dec_instance()

        def fn():
            res, _ = LpEngine(m.lp).solve()
            return res.value

        return fn
    if name == "bnb_small":
        from neuroplatoon.verifier import branch_and_bound

        m = _dec_instance(1)

        def fn():
            sol = branch_and_bound(m, node_limit=300)
            return sol.value

        return fn
    if name == "dmpc_qp":
        from neuroplatoon.baselines import DmpcConfig, solve_dmpc_qp

        cfg = DmpcConfig()
        g = np.random.default_rng(2).normal(0.0, 20.0, size=(99, cfg.horizon))

        def fn():
            u, it, ok = solve_dmpc_qp(cfg, g)
            return float(np.sum(u)) + it

        return fn
    if name == "dmpc_trial":
        from neuroplatoon.harness import ControllerSpec, LeadProfile, Scenario, run_trial

        sc = Scenario(ControllerSpec("dmpc"), n=20, profile=LeadProfile((0.0, 5.0, 10.0), (20.0, 25.0, 25.0)))

        def fn():
            return float(run_trial(sc, 0).positions[-1].sum())

        return fn
    raise ValueError(name)


def worker(name, repeat):
    fn = _run(name)
    t0 = time.perf_counter()
    value = fn()
    first = time.perf_counter() - t0
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    print(json.dumps({"value": value, "first_s": first, "best_s": min(times), "median_s": float(np.median(times))}))


def spawn(name, repeat, numba_on):
    env = dict(os.environ)
    env["NEUROPLATOON_DISABLE_NUMBA"] = "0" if numba_on else "1"
    out = subprocess.run(
        [sys.executable, __file__, "--worker", name, "--repeat", str(repeat)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--worker", default=None)
    ap.add_argument("--only", nargs="*", default=list(WORKLOADS))
    args = ap.parse_args()
    if args.worker:
        worker(args.worker, args.repeat)
        return
    print(f"{'workload':<12}{'numpy s':>12}{'numba s':>12}{'speedup':>10}{'compile s':>12}  agree")
    for name in args.only:
        py = spawn(name, args.repeat, False)
        nb = spawn(name, args.repeat, True)
        agree = abs(py["value"] - nb["value"]) <= 1e-9 * (1 + abs(py["value"]))
        print(
            f"{name:<12}{py['best_s']:>12.4f}{nb['best_s']:>12.4f}{py['best_s'] / nb['best_s']:>10.1f}"
            f"{nb['first_s'] - nb['best_s']:>12.2f}  {'yes' if agree else 'NO'}"
        )


if __name__ == "__main__":
    main()
