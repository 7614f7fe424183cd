"""Command-line entry point: ``run``, ``sweep`` and ``compare``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .closedloop import SimulationTrace, estimate_decay
from .config import ConfigError, load_config
from .pipeline import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, OUTPUT_ENV, dumps, run_pipeline


def _base_out(cfg) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output.dir)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    res = run_pipeline(cfg, args.out)
    print(f"{res.status}: {res.message}" if res.message else res.status)
    print(f"reports written to {res.out_dir}")
    return res.exit_code


def _parse_vary(spec: str) -> tuple[str, list[str]]:
    if "=" not in spec:
        raise ConfigError(f"--vary expects key=v1,v2,..., got {spec!r}")
    key, values = spec.split("=", 1)
    vals = [v for v in values.split(",") if v]
    if not vals:
        raise ConfigError(f"--vary {key}: no values given")
    return key.strip(), vals


def _run_one(item):
    cfg, out = item
    res = run_pipeline(cfg, out)
    return {"status": res.status, "exit_code": res.exit_code, "message": res.message,
            "out_dir": str(out), "decay": res.reports.get("decay")}


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    key, values = _parse_vary(args.vary)
    root = Path(args.out) if args.out else _base_out(base)
    jobs = []
    for v in values:
        cfg = base.replace_value(key, v)
        jobs.append((cfg, root / f"{key}={v}"))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    summary = {"vary": key, "values": values, "runs": results}
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.json").write_text(dumps(summary))
    for v, r in zip(values, results):
        fit = (r["decay"] or {}).get("closed_loop_linear", {}).get("gamma_fit")
        print(f"{key}={v}: {r['status']} gamma_fit={fit}")
    codes = [r["exit_code"] for r in results]
    return max(codes) if codes else EXIT_OK


def _load_decay(path: Path) -> dict:
    """Decay reports from a run directory, a ``decay.json`` file or a trace CSV."""
    if path.is_dir():
        path = path / "decay.json"
    if path.suffix == ".csv":
        return {"trace": estimate_decay(SimulationTrace.from_csv(path)).to_dict()}
    with open(path) as fh:
        data = json.load(fh)
    return {k: v for k, v in data.items() if isinstance(v, dict) and "gamma_fit" in v}


def compare_runs(a, b) -> dict:
    """Per-metric deltas ``b - a`` of matching decay reports."""
    da, db = _load_decay(Path(a)), _load_decay(Path(b))
    if set(da) != set(db):
        raise ValueError(f"incompatible runs: reports {sorted(da)} vs {sorted(db)}")
    out = {}
    for name in sorted(da):
        out[name] = {m: db[name][m] - da[name][m] for m in ("gamma_fit", "M_fit", "r2")}
    return out


def cmd_compare(args) -> int:
    try:
        diff = compare_runs(args.a, args.b)
    except (OSError, ValueError, KeyError) as exc:
        print(f"compare: {exc}", file=sys.stderr)
        return EXIT_STAGE
    sys.stdout.write(dumps(diff))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boussinesq-stab",
                                description="Finite-dimensional feedback stabilization of a "
                                            "discretized Boussinesq equilibrium.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the full pipeline for one scenario")
    r.add_argument("config")
    r.add_argument("--out", help=f"output directory (overrides config and ${OUTPUT_ENV})")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep", help="run a scenario for several values of one key")
    s.add_argument("config")
    s.add_argument("--vary", required=True, help="key=v1,v2,... e.g. gamma1=2,4,8")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    c = sub.add_parser("compare", help="difference of decay reports of two runs")
    c.add_argument("a")
    c.add_argument("b")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
