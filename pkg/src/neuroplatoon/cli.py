"""Command-line entry point: ``neuroplatoon {train,verify,simulate,compare,levelsets}``.

Exit codes: 0 success (an uncertified training run is still a success),
1 bad config or input files, 2 runtime failure, 3 verifier timeout.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List

import numpy as np

from . import __version__
from .configs import (
    ConfigError,
    controller_from,
    hyper_from,
    load_checkpoint,
    scenario_from,
    shaping_from,
    train_options,
    train_region,
    validate,
)
from .dynamics import build_platoon_model
from .harness import (
    MetricsSummary,
    TrialAborted,
    rmse_per_vehicle,
    run_experiment,
    run_trial,
    write_metrics_csv,
    write_summary_json,
    write_trajectory_csv,
)
from .nn import forward, init_mlp, save, saturate_output
from .training import guided_train, write_history
from .verifier import verify_pair

log = logging.getLogger("neuroplatoon")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_TIMEOUT = 0, 1, 2, 3


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    version: str
    wall_time_s: float = 0.0
    outputs: List[str] = field(default_factory=list)
    result: dict = field(default_factory=dict)

    def write(self, out_dir):
        """Write ``manifest.json`` atomically (temp file, then rename)."""
        out_dir = Path(out_dir)
        fd, tmp = tempfile.mkstemp(prefix=".manifest-", suffix=".json", dir=out_dir)
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(self), fh, indent=2)
        os.replace(tmp, out_dir / "manifest.json")


def config_hash(doc):
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="neuroplatoon", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("train", "verify", "simulate", "compare", "levelsets"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON config file")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--parallel", type=int, default=1, help="worker processes for trials")
        s.add_argument("--timeout-s", type=float, default=None, help="verifier time limit per MILP")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _seed(args, doc):
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    return seed


def cmd_train(doc, args, base, man: RunManifest, out: Path):
    n = doc["n"]
    dt = doc.get("dt", 0.1)
    gap = doc.get("gap", 0.75)
    u_max = doc.get("u_max", 3.0)
    leak = doc.get("leak", 0.1)
    region = train_region(doc)
    hyper = hyper_from(doc)
    shaping = shaping_from(doc)
    opts = train_options(doc)
    if args.timeout_s is not None:
        opts = replace(opts, proof_timeout_s=args.timeout_s, search_timeout_s=min(opts.search_timeout_s, args.timeout_s))
    rng = np.random.default_rng(man.seed)
    model = build_platoon_model(n, dt, [gap] * n)
    V = init_mlp([2 * n, *doc.get("v_hidden", [8, 8]), 1], rng, leak, zero_bias=True)
    pi = saturate_output(init_mlp([2, *doc.get("pi_hidden", [8, 8]), 1], rng, leak, anchor_origin=True), u_max)
    res = guided_train(V, pi, model, region, hyper, shaping, doc.get("budget", 200), rng, opts)

    save(V, out / "V.json")
    save(pi, out / "pi.json")
    write_history(res.history, out / "history.csv")
    man.outputs += ["V.json", "pi.json", "history.csv"]
    if res.report is not None:
        (out / "report.json").write_text(json.dumps(res.report.to_dict(), indent=2))
        man.outputs.append("report.json")
    man.result = {"certified": res.certified, "episodes": len(res.history), "region_scale": res.region.scale}
    return EXIT_OK


def cmd_verify(doc, args, base, man: RunManifest, out: Path):
    V = load_checkpoint(doc["v_checkpoint"], base)
    pi = load_checkpoint(doc["pi_checkpoint"], base)
    if V.n_out != 1 or V.n_in % 2:
        raise ConfigError("V must map 2N inputs to one output")
    n = V.n_in // 2
    if doc.get("n", n) != n:
        raise ConfigError(f"V is dimensioned for N={n}, config says N={doc['n']}")
    if pi.n_in != 2 or pi.n_out != 1:
        raise ConfigError("pi must map 2 inputs to one output")
    box = train_region({"n": n, "region": doc["region"]})
    gap = doc.get("gap", 0.75)
    model = build_platoon_model(n, doc.get("dt", 0.1), [gap] * n)
    timeout = args.timeout_s if args.timeout_s is not None else doc.get("timeout_s", 1800.0)
    report = verify_pair(
        V, pi, model, box.lower, box.upper, hyper_from(doc), tol=doc.get("tol", 1e-6), timeout=timeout,
        node_limit=doc.get("node_limit", 1_000_000), tighten=doc.get("tighten", False), split=doc.get("split", True),
    )
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    man.outputs.append("report.json")
    man.result = {"status": report.status}
    return EXIT_TIMEOUT if report.status == "timeout" else EXIT_OK


def _single_summary(rec, wall):
    pos, vel = rmse_per_vehicle(rec)
    zeros = np.zeros_like(pos)
    events = [(0, c.step, c.pair) for c in rec.collisions]
    return MetricsSummary(pos, zeros, vel, zeros.copy(), len(events), [len(events)], events, 1, 0, wall)


def cmd_simulate(doc, args, base, man: RunManifest, out: Path):
    sc = scenario_from(doc.get("scenario"), controller_from(doc["controller"], base))
    t0 = time.perf_counter()
    rec = run_trial(sc, man.seed)
    summary = _single_summary(rec, time.perf_counter() - t0)
    write_trajectory_csv(rec, out / "trajectory.csv")
    write_metrics_csv(summary, out / "metrics.csv")
    write_summary_json(summary, out / "summary.json", {"controller": doc["controller"]["kind"]})
    man.outputs += ["trajectory.csv", "metrics.csv", "summary.json"]
    man.result = {"collisions": summary.collisions}
    return EXIT_OK


def cmd_compare(doc, args, base, man: RunManifest, out: Path):
    names = [c.get("name", c["kind"]) for c in doc["controllers"]]
    if len(set(names)) != len(names):
        raise ConfigError("controller names must be unique (set 'name' when repeating a kind)")
    # build every scenario first so config problems surface before any simulation
    scenarios = [scenario_from(doc.get("scenario"), controller_from(c, base)) for c in doc["controllers"]]
    trials = doc.get("trials", 10)
    joint = {}
    for name, sc in zip(names, scenarios):
        summary = run_experiment(sc, trials, man.seed, args.parallel)
        fname = f"metrics_{name}.csv"
        write_metrics_csv(summary, out / fname)
        man.outputs.append(fname)
        joint[name] = summary.to_dict()
        log.info("%s: collisions %d, tail RMSE %.4g", name, summary.collisions, summary.tail_pos_rmse())
    (out / "summary.json").write_text(json.dumps({"trials": trials, "base_seed": man.seed, "controllers": joint}, indent=2))
    man.outputs.append("summary.json")
    man.result = {name: {"collisions": s["collisions"]} for name, s in joint.items()}
    return EXIT_OK


def levelset_grid(spec, ep=(-5.0, 5.0), ev=(-5.0, 5.0), resolution=101):
    """Controller output on a uniform ``(ep, ev)`` grid, as rows ``(ep, ev, u)``."""
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    gx, gy = np.meshgrid(np.linspace(*ep, nx), np.linspace(*ev, ny), indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if spec.kind == "nn":
        u = forward(spec.net, pts)[0][:, 0]
    elif spec.kind == "linear":
        g = spec.gains
        u = np.clip(g.kp * pts[:, 0] + g.kv * pts[:, 1], -g.u_max, g.u_max)
    else:
        raise ConfigError("level sets need a feedback controller (nn or linear)")
    return np.column_stack([pts, u])


def cmd_levelsets(doc, args, base, man: RunManifest, out: Path):
    spec = controller_from(doc["controller"], base)
    for key in ("ep", "ev"):
        if key in doc and doc[key][0] >= doc[key][1]:
            raise ConfigError(f"{key} range must be increasing")
    rows = levelset_grid(spec, tuple(doc.get("ep", (-5, 5))), tuple(doc.get("ev", (-5, 5))), doc.get("resolution", 101))
    with open(out / "levelsets.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["ep", "ev", "u"])
        for ep, ev, u in rows:
            wr.writerow([repr(float(ep)), repr(float(ev)), repr(float(u))])
    man.outputs.append("levelsets.csv")
    man.result = {"points": int(rows.shape[0]), "u_min": float(rows[:, 2].min()), "u_max": float(rows[:, 2].max())}
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "levelsets": cmd_levelsets,
}


def _read_config(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        doc = _read_config(args.config)
        validate(args.command, doc)
        if args.parallel < 1:
            raise ConfigError("--parallel must be at least 1")
        if args.timeout_s is not None and args.timeout_s <= 0:
            raise ConfigError("--timeout-s must be positive")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        man = RunManifest(args.command, config_hash(doc), _seed(args, doc), __version__)
        code = COMMANDS[args.command](doc, args, Path(args.config).resolve().parent, man, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrialAborted as exc:
        print(f"error: simulation aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    man.wall_time_s = time.perf_counter() - t0
    man.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
