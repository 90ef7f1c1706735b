"""Command-line surface: validate, run, batch, example.

Exit codes: 0 success, 1 validation error, 2 runtime divergence,
3 invariant violation under --strict.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import itertools
import json
import os
import sys

import numpy as np

from .diagnostics import SimulationTrace
from .errors import ConfigError, ToolkitError
from .scenario import (ScenarioRun, benchmark_config, config_from_dict,
                       load_config, run_scenario, serialize_config,
                       summary_dict)

TRACE_COLUMNS_DOC = ("t, x_1..x_n, xm_1..xm_n, e_1..e_n, u_1..u_M, "
                     "eps_1..eps_n, m, V, dV, proj_fired")


def trace_header(n: int, M: int) -> list[str]:
    cols = ["t"]
    cols += [f"x_{i+1}" for i in range(n)]
    cols += [f"xm_{i+1}" for i in range(n)]
    cols += [f"e_{i+1}" for i in range(n)]
    cols += [f"u_{j+1}" for j in range(M)]
    cols += [f"eps_{i+1}" for i in range(n)]
    cols += ["m", "V", "dV", "proj_fired"]
    return cols


def write_trace_csv(trace: SimulationTrace, path: str) -> None:
    """One row per recorded step, fixed column order, shortest round-trip
    float formatting (bit-exact across identical runs)."""
    n = trace.x.shape[1]
    M = trace.u.shape[1]
    V = trace.V if trace.V is not None else np.full(trace.steps, np.nan)
    dV = trace.dV if trace.dV is not None else np.full(trace.steps, np.nan)
    fired = (trace.proj_fired if trace.proj_fired is not None
             else np.zeros(trace.steps, dtype=bool))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(trace_header(n, M)) + "\n")
        for k in range(trace.steps):
            vals = [trace.t[k], *trace.x[k], *trace.x_m[k], *trace.e[k],
                    *trace.u[k], *trace.eps[k], trace.m[k], V[k], dV[k]]
            fh.write(",".join(repr(float(v)) for v in vals))
            fh.write("," + ("1" if fired[k] else "0") + "\n")


def write_gnuplot_dat(trace: SimulationTrace, path: str) -> None:
    """Whitespace-separated (t, e_1..e_n) layout for external plotting."""
    n = trace.x.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# t " + " ".join(f"e_{i+1}" for i in range(n)) + "\n")
        for k in range(trace.steps):
            fh.write(" ".join(repr(float(v)) for v in (trace.t[k], *trace.e[k])))
            fh.write("\n")


def _emit_outputs(run: ScenarioRun, out_dir: str | None) -> None:
    cfg = run.config
    directory = out_dir or cfg.output.get("dir")
    if directory is None:
        return
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, cfg.name)
    if cfg.output.get("trace", True):
        write_trace_csv(run.trace, base + ".trace.csv")
    if cfg.output.get("summary", True):
        with open(base + ".summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary_dict(run), fh, indent=2, sort_keys=True)
            fh.write("\n")
    if cfg.output.get("gnuplot", False):
        write_gnuplot_dat(run.trace, base + ".dat")


def cmd_validate(args) -> int:
    try:
        load_config(args.config)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"invalid: {err}", file=sys.stderr)
        return 1
    print("ok")
    return 0


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"invalid: {err}", file=sys.stderr)
        return 1
    try:
        run = run_scenario(cfg)
    except ToolkitError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    _emit_outputs(run, args.out)
    summary = summary_dict(run)
    print(json.dumps(summary, indent=2, sort_keys=True))
    if run.trace.diverged:
        print(f"diverged at step {run.trace.diverged_at}", file=sys.stderr)
        return 2
    if args.strict and run.exit_status == 3:
        print("invariant violation under --strict", file=sys.stderr)
        return 3
    return 0


def _batch_one(payload):
    idx, data, out_dir = payload
    try:
        cfg = config_from_dict(data)
        run = run_scenario(cfg)
        _emit_outputs(run, out_dir)
        row = summary_dict(run)
        row["status"] = "diverged" if run.trace.diverged else "ok"
        return idx, row
    except ConfigError as exc:
        return idx, {"name": data.get("name", f"run-{idx}"),
                     "status": "invalid", "errors": exc.errors}
    except ToolkitError as exc:
        return idx, {"name": data.get("name", f"run-{idx}"),
                     "status": "failed", "errors": [str(exc)]}


def _set_dotted(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def expand_batch_spec(spec: dict) -> list[dict]:
    """Either an explicit config list or a base config plus a sweep grid."""
    if "configs" in spec:
        out = []
        for item in spec["configs"]:
            if isinstance(item, str):
                with open(item, "r", encoding="utf-8") as fh:
                    out.append(json.load(fh))
            else:
                out.append(item)
        return out
    if "base" in spec:
        base = spec["base"]
        if isinstance(base, str):
            with open(base, "r", encoding="utf-8") as fh:
                base = json.load(fh)
        sweep = spec.get("sweep", {})
        keys = sorted(sweep.keys())
        grids = [sweep[k] for k in keys]
        runs = []
        for combo in itertools.product(*grids) if keys else [()]:
            data = json.loads(json.dumps(base))
            tags = []
            for key, value in zip(keys, combo):
                _set_dotted(data, key, value)
                tags.append(f"{key.split('.')[-1]}={value}")
            if tags:
                data["name"] = data.get("name", "run") + "[" + ",".join(tags) + "]"
            runs.append(data)
        return runs
    raise ConfigError(["batch spec needs 'configs' or 'base'"])


def cmd_batch(args) -> int:
    try:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"invalid batch spec: {exc}", file=sys.stderr)
        return 1
    try:
        members = expand_batch_spec(spec)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"invalid batch spec: {err}", file=sys.stderr)
        return 1
    payloads = [(i, data, args.out) for i, data in enumerate(members)]
    rows: list[dict] = [None] * len(payloads)
    if args.jobs > 1 and len(payloads) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for idx, row in pool.map(_batch_one, payloads):
                rows[idx] = row
    else:
        for payload in payloads:
            idx, row = _batch_one(payload)
            rows[idx] = row
    print(json.dumps(rows, indent=2, sort_keys=True))
    return 0


def cmd_example(args) -> int:
    if not args.paper:
        print("nothing to emit; pass --paper for the bundled scenario",
              file=sys.stderr)
        return 1
    text = serialize_config(benchmark_config(two_tone=args.two_tone))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrac",
        description="Adaptive state-tracking scenarios: validate, run, and "
                    "batch-execute; traces land as CSV "
                    f"({TRACE_COLUMNS_DOC}).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a scenario config")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run one scenario")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--strict", action="store_true",
                   help="nonzero exit on invariant violations")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("batch", help="run a batch spec (configs or sweep)")
    p.add_argument("spec")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("example", help="emit the bundled benchmark scenario")
    p.add_argument("--paper", action="store_true",
                   help="emit the bundled second-order benchmark scenario")
    p.add_argument("--two-tone", action="store_true",
                   help="use the two-sinusoid reference input variant")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_example)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
