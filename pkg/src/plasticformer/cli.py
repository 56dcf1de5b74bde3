"""Command-line entry point: train / eval / report / gradcheck / ablate.

Exit codes: 0 success, 1 run failure, 2 config error, 3 oracle failure.
The output root defaults to ./runs and can be overridden by the
PLASTICFORMER_OUT environment variable or --out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import (ABLATIONS, ConfigError, RunConfig, apply_set_overrides,
                     build_run_config, load_config_files)
from .diagnostics import (aggregate, discover_records, export_plot_data,
                          format_table, record_fingerprint, load_record)
from .meta_train import TrainingAborted, evaluate, train
from .model import StaticParams
from .tasks import episode_seed, generate
from . import oracle

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_ORACLE_FAILURE = 3


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("PLASTICFORMER_OUT", "runs"))


def _parse_seeds(raw: str) -> list[int]:
    try:
        return [int(s) for s in raw.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds value {raw!r}") from exc


def _train_one(payload: tuple) -> str:
    """Worker for seed fan-out; must stay module-level for process pools."""
    task, rule, seed, file_tree, sets, out_root, downsample = payload
    run_cfg = build_run_config(task, rule, seed, file_tree, sets)
    rdir = train(run_cfg, out_root, downsample=downsample)
    return str(rdir)


def _run_training(args, task: str, rule: str, sets: tuple[str, ...]) -> int:
    file_tree = load_config_files(args.config or [])
    seeds = _parse_seeds(args.seeds)
    out_root = _out_root(args)
    payloads = [(task, rule, seed, file_tree, sets, out_root,
                 args.downsample) for seed in seeds]
    # seed runs are independent; results are identical to sequential order
    if args.jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            dirs = list(pool.map(_train_one, payloads))
    else:
        dirs = [_train_one(p) for p in payloads]
    for d in dirs:
        rec = load_record(Path(d) / "record.json")
        print(f"{d}: loss={rec['summary']['loss']:.4f} "
              f"{rec['summary']['metric_name']}={rec['summary']['metric']:.4f} "
              f"fingerprint={record_fingerprint(rec)[:12]}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args, args.task, args.rule, tuple(args.set or ()))


def cmd_ablate(args) -> int:
    preset = ABLATIONS.get(args.name)
    if preset is None:
        raise ConfigError(
            f"unknown ablation {args.name!r}; choices: {sorted(ABLATIONS)}")
    sets = preset["sets"] + tuple(args.set or ())
    return _run_training(args, preset["task"], preset["rule"], sets)


def cmd_eval(args) -> int:
    params = StaticParams.load(args.checkpoint)
    run_cfg = build_run_config(args.task, params.config.rule, args.seed,
                               load_config_files(args.config or []),
                               tuple(args.set or ()))
    if run_cfg.model.input_dim != params.config.input_dim or \
            run_cfg.model.output_dim != params.config.output_dim:
        raise ConfigError(
            "checkpoint input/output widths do not match the task encoding")
    episodes = [generate(args.task, run_cfg.tasks,
                         episode_seed(args.seed, "val", i))
                for i in range(args.episodes)]
    result = evaluate(params, episodes, args.seed)
    print(json.dumps(asdict(result), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    records = []
    for root in args.runs:
        found = discover_records(root)
        if not found:
            print(f"warning: no records under {root}", file=sys.stderr)
        records.extend(found)
    if not records:
        print("no run records found", file=sys.stderr)
        return EXIT_RUN_FAILURE
    out_dir = Path(args.out) if args.out else Path(args.runs[0]) / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    report = aggregate(records)
    table = format_table(report)
    (out_dir / "tables.txt").write_text(table)
    _write_report_csv(report, out_dir / "tables.csv")
    export_plot_data(records, "summary_bars", out_dir / "summary_bars.csv")
    export_plot_data(records, "mech_traces", out_dir / "mech_traces.csv")
    print(table)
    print(f"report written to {out_dir}")
    return EXIT_OK


def _write_report_csv(report, path: Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "rule", "metric_name", "n_seeds", "seeds",
                         "loss_mean", "loss_std", "metric_mean", "metric_std",
                         "mean_eta_mean", "mean_eta_std",
                         "plastic_norm_mean", "plastic_norm_std",
                         "reliable_vs_none", "few_seeds", "config_hash"])
        for r in sorted(report.rows, key=lambda r: (r.task, r.rule)):
            writer.writerow([
                r.task, r.rule, r.metric_name, r.n_seeds,
                " ".join(str(s) for s in r.seeds),
                repr(r.stats["loss"]["mean"]), repr(r.stats["loss"]["std"]),
                repr(r.stats["metric"]["mean"]),
                repr(r.stats["metric"]["std"]),
                repr(r.stats["mean_eta"]["mean"]),
                repr(r.stats["mean_eta"]["std"]),
                repr(r.stats["mean_plastic_norm"]["mean"]),
                repr(r.stats["mean_plastic_norm"]["std"]),
                "" if r.reliable_vs_none is None else str(r.reliable_vs_none),
                str(r.few_seeds), r.config_hash,
            ])


def cmd_gradcheck(args) -> int:
    reports = oracle.run_gradcheck_suite(seed=args.seed,
                                         fuzz_samples=args.fuzz_samples)
    out_root = _out_root(args)
    oracle.write_reports(reports, Path(out_root) / "oracle")
    hard_failures = 0
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        info = " (informational)" if r.informational else ""
        print(f"[{status}] {r.name}: max_dev={r.max_deviation:.3e} "
              f"tol={r.tolerance:.1e}{info}")
        if not r.passed and not r.informational:
            hard_failures += 1
    return EXIT_ORACLE_FAILURE if hard_failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plasticformer",
        description="Plastic-transformer training, evaluation and diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_rule=True):
        if with_rule:
            p.add_argument("--task", required=True,
                           choices=["copying", "cue_reward", "regression",
                                    "classification"])
            p.add_argument("--rule", required=True,
                           choices=["none", "hebbian", "gradient"])
        p.add_argument("--seeds", default="3000,3001,3002",
                       help="comma-separated seed list")
        p.add_argument("--config", action="append", default=[],
                       help="YAML config layer (repeatable)")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="dotted-path config override (repeatable)")
        p.add_argument("--out", default=None, help="output root directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel seed workers")
        p.add_argument("--downsample", type=int, default=1,
                       help="keep every k-th trace step")

    p_train = sub.add_parser("train", help="train one task/rule over seeds")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_ablate = sub.add_parser("ablate", help="run a named ablation preset")
    p_ablate.add_argument("--name", required=True,
                          choices=sorted(ABLATIONS))
    add_common(p_ablate, with_rule=False)
    p_ablate.set_defaults(func=cmd_ablate)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--task", required=True,
                        choices=["copying", "cue_reward", "regression",
                                 "classification"])
    p_eval.add_argument("--seed", type=int, default=3000)
    p_eval.add_argument("--episodes", type=int, default=20)
    p_eval.add_argument("--config", action="append", default=[])
    p_eval.add_argument("--set", action="append", default=[])
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="aggregate completed runs")
    p_report.add_argument("runs", nargs="+", help="run root directories")
    p_report.add_argument("--out", default=None)
    p_report.set_defaults(func=cmd_report)

    p_gc = sub.add_parser("gradcheck", help="run the oracle suite")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--fuzz-samples", type=int, default=100_000)
    p_gc.add_argument("--out", default=None)
    p_gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except TrainingAborted as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    except oracle.OracleError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_ORACLE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
