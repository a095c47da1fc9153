"""Command-line interface: ``miv-att estimate | simulate | generate``.

Exit codes: 0 success, 2 input or validation error, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baselines import substitution_estimates, tsls_estimate
from .config import AppConfig, ConfigError, load_config
from .csvio import CsvSchemaError, read_dataset, summary_to_csv, write_dataset
from .data import validate
from .estimator import EstimationError, cross_fit
from .fw import WeakInstrumentError
from .simulation import Scenario, generate_dgp4, generate_glim, run_replications

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION = 0, 2, 3

log = logging.getLogger("miv_att")


class InputError(Exception):
    pass


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and tuples; NaN and inf become null."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dump_json(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, allow_nan=False) + "\n"


def _resolve_workers(arg) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("MIV_ATT_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"MIV_ATT_WORKERS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _with_seed(cfg: AppConfig, seed) -> AppConfig:
    if seed is None:
        return cfg
    return replace(cfg, seed=seed, run=replace(cfg.run, seed=seed))


def _row(name, estimate, ci):
    return {"estimator": name, "estimate": estimate, "ci_lower": ci[0], "ci_upper": ci[1]}


def _failed_row(name, exc):
    return {"estimator": name, "estimate": None, "ci_lower": None, "ci_upper": None, "error": str(exc)}


def baseline_table(data, cfg: AppConfig) -> list:
    """Comparison rows (estimator, estimate, CI); a failing baseline gets an ``error`` entry."""
    table = []
    subs = [b for b in ("Wald", "EIF") if b in cfg.baselines]
    if subs:
        try:
            reports = substitution_estimates(data, cfg.run, subs)
            table += [_row(b, reports[b].psi_hat, reports[b].ci) for b in subs]
        except (ValueError, EstimationError) as exc:
            table += [_failed_row(b, exc) for b in subs]
    if "2SLS" in cfg.baselines:
        try:
            t = tsls_estimate(data, cfg.run.alpha)
            table.append(_row("2SLS", t.estimate, t.ci))
        except (ValueError, np.linalg.LinAlgError) as exc:
            table.append(_failed_row("2SLS", exc))
    return table


def cmd_estimate(args, cfg: AppConfig, workers: int) -> int:
    if not args.data:
        raise InputError("--data is required for estimate")
    data = read_dataset(args.data)
    issues = validate(data)
    if issues:
        raise InputError("invalid dataset: " + "; ".join(issues))
    try:
        report = cross_fit(data, cfg.run, workers=workers)
    except (WeakInstrumentError, EstimationError) as exc:
        # keep the baseline table available even when the main estimator aborts
        out = {"estimator": "EIF-FW", "error": str(exc), "n": data.n, "alpha": cfg.run.alpha}
        out["baselines"] = [_failed_row("EIF-FW", exc)] + baseline_table(data, cfg)
        out["external_comparators"] = []
        out["seed"] = cfg.run.seed
        _write(args.out, dump_json(out))
        raise
    table = [_row("EIF-FW", report.psi_hat, report.ci)] + baseline_table(data, cfg)
    out = report.to_dict()
    out["baselines"] = table
    out["external_comparators"] = []
    out["seed"] = cfg.run.seed
    _write(args.out, dump_json(out))
    return EXIT_OK


def cmd_simulate(args, cfg: AppConfig, workers: int) -> int:
    sim = cfg.simulate
    rows, blocks = [], []
    for n in sim.sizes:
        scenario = Scenario(n, sim.replicates, sim.estimators, cfg.run, sim.dgp, sim.glim)

        def progress(i, total, n=n):
            log.info("N=%d: replicate %d/%d", n, i, total)

        summary = run_replications(scenario, cfg.seed, workers, progress)
        for e in sim.estimators:
            rows.append(summary.rows[e])
        blocks.append(
            {
                "N": n,
                "truth": summary.truth,
                "rows": [vars(summary.rows[e]) for e in sim.estimators],
                "failures": summary.failures,
            }
        )
    _write(args.out, summary_to_csv(rows))
    if args.out:
        Path(args.out).with_suffix(".json").write_text(dump_json({"seed": cfg.seed, "scenarios": blocks}), encoding="utf-8")
    return EXIT_OK


def cmd_generate(args, cfg: AppConfig, workers: int) -> int:
    gen = cfg.generate
    if gen.dgp == "glim":
        from .simulation import GlimParams

        sim = generate_glim(gen.glim or GlimParams(), gen.n, cfg.seed)
    else:
        sim = generate_dgp4(gen.n, cfg.seed)
    if args.out:
        write_dataset(sim.data, args.out)
    else:
        from .csvio import dataset_to_csv

        sys.stdout.write(dataset_to_csv(sim.data))
    return EXIT_OK


def _write(path, text):
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "generate": cmd_generate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="miv-att", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help="output path (default: standard output)")
    common.add_argument("--seed", type=int, help="root seed; overrides the config")
    common.add_argument("--workers", type=int, help="worker processes (default: $MIV_ATT_WORKERS or CPU count)")
    common.add_argument("--verbose", "-v", action="store_true", help="progress messages on standard error")
    sub = parser.add_subparsers(dest="command", required=True)
    est = sub.add_parser("estimate", parents=[common], help="estimate the ATT from a CSV dataset")
    est.add_argument("--data", help="input CSV with columns y, a, z and covariates")
    sub.add_parser("simulate", parents=[common], help="run the simulation study")
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset as CSV")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = _with_seed(load_config(args.config), args.seed)
        workers = _resolve_workers(args.workers)
        return COMMANDS[args.command](args, cfg, workers)
    except (WeakInstrumentError, EstimationError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (ConfigError, CsvSchemaError, InputError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
