"""Command line entry point.

    rtfq plan|warmup|adapt|eval|gradcheck --config FILE [--out DIR] [--resume CKPT] [--strict]
    rtfq datagen --config FILE --out DIR

Exit codes: 0 success, 1 usage/config error, 2 numeric failure,
3 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .datagen import DatasetFormatError, save_dataset
from .gradcheck import REL_TOL, run_suite
from .numerics import NumericalError

log = logging.getLogger("rtfq")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def cmd_plan(cfg: RunConfig, out: Path) -> int:
    plan = pl.make_plan(cfg)
    rows = pl.plan_table(plan)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "plan.csv", rows)
    (out / "plan.json").write_text(json.dumps({
        "axis": plan.axis,
        "budgets": [float(b) for b in plan.budgets],
        "configs": rows,
    }, indent=2))
    print(f"{'width':>6} {'res':>4} {'bits':>4} {'MACs':>12} {'BitOPs':>15} {'vs FP32':>8} {'interval':>8}")
    for r in rows:
        print(f"{r['width']:>6.2f} {r['resolution']:>4} {r['bits']:>4} {r['macs']:>12} {r['bitops']:>15} "
              f"{r['fp32_ratio']:>8} {r['budget_interval']:>8}")
    print(f"{len(rows)} configs, {plan.n} budget intervals on {plan.axis}")
    return EXIT_OK


def cmd_warmup(cfg: RunConfig, out: Path, resume=None) -> int:
    state = pl.run_training(cfg, "warmup", out, resume=resume)
    print(f"warmup: {state.step}/{state.total_steps} steps, checkpoint {out / 'warmup.ckpt'}")
    return EXIT_OK


def cmd_adapt(cfg: RunConfig, out: Path, resume=None, init_from=None) -> int:
    state = pl.run_training(cfg, "adapt", out, init_from=init_from, resume=resume)
    print(f"adapt: {state.step}/{state.total_steps} steps, checkpoint {out / 'adapt.ckpt'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, checkpoint=None) -> int:
    ckpt = Path(checkpoint) if checkpoint else out / "adapt.ckpt"
    if not ckpt.exists():
        raise pl.PipelineError(f"eval needs an adapt checkpoint; {ckpt} does not exist")
    state = pl.load_state(ckpt, cfg)
    if state.phase != "adapt":
        raise pl.PipelineError(f"{ckpt} is a {state.phase} checkpoint, eval needs an adapt checkpoint")
    data = pl.load_data(cfg)
    plan, select_acc, report_acc = pl.evaluate_budgets(cfg, state, data)
    table = pl.budget_table(plan, report_acc)
    per_config = [{**row, "accuracy": report_acc[c.config]} for row, c in zip(pl.plan_table(plan), plan.costs)]
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "budgets.csv", table)
    _write_csv(out / "accuracy.csv", per_config)
    (out / "eval.json").write_text(json.dumps({"selection_data": cfg.selection_data, "budgets": table,
                                               "configs": per_config}, indent=2))
    for row in table:
        if row["satisfiable"]:
            print(f"b{row['interval']} <= {row['budget']:.4g} {row['axis']}: w={row['width']:.2f} "
                  f"r={row['resolution']} q={row['bits']} acc={row['accuracy']:.4f}")
        else:
            print(f"b{row['interval']}: unsatisfiable")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path | None = None) -> int:
    reports, seconds = run_suite(cfg.space().bitwidths, 1000, cfg.seed, cfg.paper_literal_unsigned)
    ok = True
    for r in reports:
        status = "PASS" if r.ok else "FAIL"
        ok &= r.ok
        print(f"[{status}] {r.bits}-bit: {r.checked} points, max rel err v={r.max_rel_err_v:.2e} "
              f"s={r.max_rel_err_s:.2e} (tol {REL_TOL:g})"
              + ("" if not r.invariant_failures else f", invariants: {', '.join(r.invariant_failures)}"))
    print(f"gradcheck finished in {seconds:.2f}s")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_datagen(cfg: RunConfig, out: Path) -> int:
    data = pl.load_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(data.source, out / "source.rtfqds")
    save_dataset(data.target, out / "target.rtfqds")
    save_dataset(data.target.with_labels(data.target_labels), out / "target_eval.rtfqds")
    print(f"wrote {len(data.source)} source and {len(data.target)} target images to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtfq", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=["plan", "warmup", "adapt", "eval", "gradcheck", "datagen"])
    p.add_argument("--config", required=True, help="flat key = value run configuration")
    p.add_argument("--out", default="runs/default", help="output directory (default: runs/default)")
    p.add_argument("--resume", help="checkpoint to resume training from (eval: checkpoint to evaluate)")
    p.add_argument("--init-from", help="adapt: warmup checkpoint (default: OUT/warmup.ckpt)")
    p.add_argument("--strict", action="store_true", help="deterministic single-threaded kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        if args.strict:
            cfg = replace(cfg, strict=True)
        if args.command == "plan":
            return cmd_plan(cfg, out)
        if args.command == "warmup":
            return cmd_warmup(cfg, out, args.resume)
        if args.command == "adapt":
            return cmd_adapt(cfg, out, args.resume, args.init_from)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.resume)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out)
        return cmd_datagen(cfg, out)
    except NumericalError as e:
        print(f"rtfq: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, pl.PipelineError, CheckpointError, DatasetFormatError, OSError, ValueError) as e:
        print(f"rtfq: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
