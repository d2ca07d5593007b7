"""Command-line driver: ``hdsched {solve,simulate,check,sweep}``.

Exit codes: 0 success, 2 config error, 3 solver non-convergence,
4 divergence detected.
"""

import argparse
import json
import logging
import os
import sys
import time
import warnings

import numpy as np

from . import __version__
from . import config as cfgmod
from .mdp import PolicyTable, verify_switching
from .plant import classify
from .policies import OptimalScheduler, make_scheduler
from .simulator import run
from .stability import report

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("hdsched")


class SolverFailure(RuntimeError):
    pass


class _Outputs:
    """Tracks written files and timings for the run manifest."""

    def __init__(self, out_dir, config, config_path, command):
        self.dir = out_dir
        self.config = config
        self.config_path = config_path
        self.command = command
        self.files = []
        self.timings = {}
        os.makedirs(out_dir, exist_ok=True)

    @property
    def stamp(self):
        return f"config_hash={self.config.config_hash()} seed={self.config.seed}"

    def write(self, name, text):
        path = os.path.join(self.dir, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.files.append(name)
        return path

    def write_csv(self, name, title, header, rows):
        lines = [f"# hdsched {title} {self.stamp}", ",".join(header)]
        lines += [",".join(_fmt(v) for v in row) for row in rows]
        return self.write(name, "\n".join(lines) + "\n")

    def write_json(self, name, obj):
        return self.write(name, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def manifest(self):
        files = self.files + ["manifest.json"]
        doc = {
            "command": self.command,
            "config_path": self.config_path,
            "resolved_config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "seed": self.config.seed,
            "out_dir": os.path.abspath(self.dir),
            "files": files,
            "version": __version__,
            "timings_s": self.timings,
        }
        self.write_json("manifest.json", doc)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    return str(o)


def _load(args):
    if bool(args.config) == bool(args.preset):
        raise cfgmod.ConfigError("--config/--preset", "give exactly one of them")
    config = cfgmod.load(args.config) if args.config else cfgmod.load_preset(args.preset)
    if args.seed is not None:
        d = config.to_dict()
        d["sim"]["seed"] = args.seed
        config = cfgmod.parse_config(d)
    return config


def _solve(config):
    est = OptimalScheduler(bound=config.bound, tol=config.tol, max_iter=config.max_iter)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est.fit(config.plant, config.channel)
    est.policy_table_.meta.update(config_hash=config.config_hash(), seed=config.seed)
    if not est.converged_:
        raise SolverFailure(f"RVI did not converge after {est.n_iter_} iterations (span residual {est.residual_:.3e})")
    return est


def _stability_text(config):
    rep = report(config.plant, config.channel)
    head = [f"class: {classify(config.plant)}"]
    return rep, "\n".join(head + rep.lines()) + "\n"


def cmd_check(config, out):
    rep, text = _stability_text(config)
    sys.stdout.write(text)
    out.write("stability.txt", text)
    return EXIT_OK


def cmd_solve(config, out):
    t0 = time.perf_counter()
    est = _solve(config)
    out.timings["solve"] = time.perf_counter() - t0
    table = est.policy_table_
    out.write("policy_table.csv", table.to_csv())
    rep = {
        "gain": est.gain_,
        "iterations": est.n_iter_,
        "residual": est.residual_,
        "converged": est.converged_,
        "n_states": len(table.space),
        "config_hash": config.config_hash(),
        "seed": config.seed,
    }
    if table.space.v == 1:
        ok, bad = verify_switching(table)
        rep["switching_type"] = ok
        rep["switching_violations"] = len(bad)
        grid = table.render_grid() if not table.space.fading else "\n\n".join(
            f"h_s={hs} h_c={hc}\n" + table.render_grid(hs, hc)
            for hs in range(table.space.channel_dims[0])
            for hc in range(table.space.channel_dims[1]))
        out.write("policy_grid.txt", f"# {out.stamp}\n{grid}\n")
    out.write_json("solve_report.json", rep)
    print(f"gain={est.gain_:.6f} iterations={est.n_iter_} residual={est.residual_:.3e} states={len(table.space)}")
    return EXIT_OK


def _schedulers(config, table_path=None):
    out = []
    for kind in config.policies:
        if kind == "optimal":
            if table_path:
                est = OptimalScheduler.from_table(PolicyTable.from_csv(table_path))
            else:
                est = _solve(config)
        else:
            est = make_scheduler(kind).fit(config.plant, config.channel)
        out.append((kind, est))
    return out


def cmd_simulate(config, out, table_path=None):
    rep, text = _stability_text(config)
    for key, verdict in rep.verdicts.items():
        if verdict != "Stabilizable":
            log.warning("%s policy: %s", key, verdict)
    out.write("stability.txt", text)
    summary = {"config_hash": config.config_hash(), "seed": config.seed, "results": {}}
    diverged = False
    for kind, est in _schedulers(config, table_path):
        t0 = time.perf_counter()
        res = run(config, est)
        out.timings[f"simulate_{kind}"] = time.perf_counter() - t0
        se = res.running_avg.std(axis=0, ddof=1) / np.sqrt(res.running_avg.shape[0]) \
            if res.running_avg.shape[0] > 1 else np.full(len(res.slots), np.nan)
        out.write_csv(f"trace_{kind}.csv", f"simulate policy={kind}", ["slot", "mean_running_avg", "stderr"],
                      zip(res.slots.tolist(), res.mean_trace.tolist(), se.tolist()))
        s = res.summary()
        s.pop("config", None)
        if kind == "optimal":
            s["gain"] = est.gain_
        summary["results"][kind] = s
        diverged |= bool(res.diverged)
        print(f"{kind:12s} J={res.mean_cost:.5g} +- {res.stderr:.2g}" + ("  DIVERGED" if res.diverged else ""))
    out.write_json("summary.json", summary)
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_sweep(config, out, table_path=None):
    sweep = config.sweep or {}
    if not (sweep.get("grid") or sweep.get("cases")):
        raise cfgmod.ConfigError("sweep", "no sweep grid in config")
    points = cfgmod.expand_sweep(config)
    keys = sorted({k for ov, _ in points for k in ov})
    rows = []
    diverged = False
    t0 = time.perf_counter()
    for overrides, sub in points:
        for kind, est in _schedulers(sub):
            res = run(sub, est)
            gain = est.gain_ if kind == "optimal" else None
            rows.append([overrides.get(k) for k in keys] + [kind, res.mean_cost, res.stderr, res.diverged, gain])
            diverged |= bool(res.diverged)
            log.info("%s %s J=%.5g", overrides, kind, res.mean_cost)
    out.timings["sweep"] = time.perf_counter() - t0
    out.write_csv("sweep.csv", "sweep", keys + ["policy", "mean_cost", "stderr", "diverged", "mdp_gain"], rows)
    print(f"{len(rows)} rows written to {os.path.join(out.dir, 'sweep.csv')}")
    return EXIT_DIVERGED if diverged else EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="hdsched", description="Half-duplex uplink/downlink scheduling experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("solve", "solve the truncated MDP and write the policy table"),
        ("simulate", "run the Monte-Carlo experiment for each configured policy"),
        ("check", "report closed-form stabilizability verdicts"),
        ("sweep", "run the configured parameter grid"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file (or a run manifest)")
        p.add_argument("--preset", help="bundled preset name, e.g. fig4")
        p.add_argument("--out-dir", default="hdsched_out", help="output directory")
        p.add_argument("--seed", type=int, help="override sim.seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "simulate":
            p.add_argument("--policy-table", help="reuse a solved policy CSV for the optimal policy")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = _load(args)
        out = _Outputs(args.out_dir, config, args.config or f"preset:{args.preset}", args.command)
        if args.command == "check":
            code = cmd_check(config, out)
        elif args.command == "solve":
            code = cmd_solve(config, out)
        elif args.command == "simulate":
            code = cmd_simulate(config, out, args.policy_table)
        else:
            code = cmd_sweep(config, out)
        out.manifest()
        return code
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
