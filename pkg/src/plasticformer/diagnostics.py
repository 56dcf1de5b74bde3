"""Structured run logging and cross-seed aggregation.

Layout: ``<root>/<task>/<rule>/<seed>/record.json`` plus ``trace.csv`` with
per-step mechanistic signals. Aggregation reproduces the paper-style
mean +/- std tables and the reliability rule (a difference counts when the
mean gap exceeds the pooled standard deviation and the per-seed ordering
is consistent).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

VOLATILE_KEYS = ("wall_clock_sec",)


class DiagnosticsError(RuntimeError):
    pass


def config_hash(cfg_dict: dict) -> str:
    """Digest of a config tree, invariant to field ordering and to the
    (seed, rule) pair so that same-setup runs group together."""
    trimmed = {k: v for k, v in cfg_dict.items()
               if k not in ("seed", "rule", "overrides")}
    return hashlib.sha256(
        json.dumps(trimmed, sort_keys=True).encode()).hexdigest()[:16]


class GateBoundViolation(DiagnosticsError):
    """A trace point failed the modulation-gate bound re-check at write time."""


class TraceLogger:
    """Collects per-step trace points for one run and flushes them to CSV.

    Rows already flushed are never rewritten, so an I/O failure cannot
    corrupt earlier data. Down-sampling keeps every k-th step.
    """

    def __init__(self, path, plastic_layers, eta0: float, max_norm: float,
                 downsample: int = 1, flush_every: int = 2000):
        self.path = Path(path)
        self.layers = list(plastic_layers)
        self.eta0 = eta0
        self.max_norm = max_norm
        self.downsample = max(1, downsample)
        self.flush_every = flush_every
        self._rows: list[list] = []
        self._wrote_header = False

    def log_step(self, episode_index: int, epoch: int, trace) -> None:
        if trace.eta < -1e-12 or trace.eta > self.eta0 + 1e-12:
            raise GateBoundViolation(
                f"eta={trace.eta} outside [0, {self.eta0}] at t={trace.t}")
        if trace.delta_norm is not None and \
                trace.eta * trace.delta_norm > self.eta0 * self.max_norm + 1e-9:
            raise GateBoundViolation(
                f"eta*|delta|={trace.eta * trace.delta_norm} exceeds "
                f"eta0*max_norm={self.eta0 * self.max_norm} at t={trace.t}")
        if trace.t % self.downsample != 0:
            return
        row = [episode_index, epoch, trace.t, trace.rule,
               repr(trace.eta),
               "" if trace.delta_norm is None else repr(trace.delta_norm)]
        row += [repr(trace.w_norms.get(l, 0.0)) for l in self.layers]
        self._rows.append(row)
        if len(self._rows) >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        if not self._rows and self._wrote_header:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        mode = "a" if self._wrote_header else "w"
        with open(self.path, mode, newline="") as fh:
            writer = csv.writer(fh)
            if not self._wrote_header:
                writer.writerow(["episode", "epoch", "t", "rule", "eta",
                                 "delta_norm"]
                                + [f"w_norm_{l}" for l in self.layers])
                self._wrote_header = True
            writer.writerows(self._rows)
        self._rows.clear()


def run_dir(root, task: str, rule: str, seed: int) -> Path:
    return Path(root) / task / rule / str(seed)


def write_record(record: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_record(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def record_fingerprint(record: dict) -> str:
    """Digest of a record with volatile (wall-clock) fields removed."""
    trimmed = {k: v for k, v in record.items() if k not in VOLATILE_KEYS}
    return hashlib.sha256(
        json.dumps(trimmed, sort_keys=True).encode()).hexdigest()


def discover_records(root) -> list[dict]:
    records = []
    for path in sorted(Path(root).glob("*/*/*/record.json")):
        records.append(load_record(path))
    return records


AGG_METRICS = ("loss", "metric", "mean_eta", "mean_plastic_norm")


@dataclass
class AggregateRow:
    task: str
    rule: str
    config_hash: str
    n_seeds: int
    seeds: list[int]
    metric_name: str
    stats: dict  # per AGG_METRICS: {"mean": float, "std": float}
    few_seeds: bool               # std over < 2 seeds is not meaningful
    reliable_vs_none: bool | None  # None when no baseline group exists


@dataclass
class AggregateReport:
    rows: list[AggregateRow] = field(default_factory=list)

    def row(self, task: str, rule: str) -> AggregateRow:
        for r in self.rows:
            if r.task == task and r.rule == rule:
                return r
        raise KeyError((task, rule))


def pooled_std(s1: float, s2: float) -> float:
    return float(np.sqrt((s1 ** 2 + s2 ** 2) / 2.0))


def _summary_values(records: list[dict]) -> dict:
    out = {m: [] for m in AGG_METRICS}
    for rec in records:
        for m in AGG_METRICS:
            out[m].append(float(rec["summary"][m]))
    return out


def aggregate(records: list[dict]) -> AggregateReport:
    """Per (task, rule) mean/std over seeds plus the reliability flag
    against the rule=none group of the same task."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for rec in records:
        groups.setdefault((rec["task"], rec["rule"]), []).append(rec)

    for (task, rule), recs in groups.items():
        hashes = {r["config_hash"] for r in recs}
        if len(hashes) > 1:
            raise DiagnosticsError(
                f"mixed configs for ({task}, {rule}): {sorted(hashes)}")
        seeds = [r["seed"] for r in recs]
        if len(set(seeds)) != len(seeds):
            raise DiagnosticsError(
                f"duplicate seeds for ({task}, {rule}): {seeds}")

    report = AggregateReport()
    for (task, rule), recs in sorted(groups.items()):
        recs = sorted(recs, key=lambda r: r["seed"])
        vals = _summary_values(recs)
        stats = {}
        for m in AGG_METRICS:
            arr = np.array(vals[m])
            stats[m] = {
                "mean": float(arr.mean()),
                "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
            }
        baseline = groups.get((task, "none"))
        reliable = None
        if rule != "none" and baseline and len(recs) > 1 and len(baseline) > 1:
            reliable = _reliable_improvement(recs, sorted(
                baseline, key=lambda r: r["seed"]))
        report.rows.append(AggregateRow(
            task=task, rule=rule,
            config_hash=recs[0]["config_hash"],
            n_seeds=len(recs),
            seeds=[r["seed"] for r in recs],
            metric_name=recs[0]["summary"]["metric_name"],
            stats=stats,
            few_seeds=len(recs) < 2,
            reliable_vs_none=reliable,
        ))
    return report


def _reliable_improvement(rule_recs: list[dict], none_recs: list[dict]) -> bool:
    """Mean gap beyond the pooled std, with per-seed ordering consistent.
    Uses the task metric; direction depends on whether it is an accuracy
    (higher better) or an error (lower better)."""
    name = rule_recs[0]["summary"]["metric_name"]
    higher_better = "accuracy" in name
    a = np.array([r["summary"]["metric"] for r in rule_recs])
    b = np.array([r["summary"]["metric"] for r in none_recs])
    gap = a.mean() - b.mean()
    if not higher_better:
        gap = -gap
    sa = a.std(ddof=1)
    sb = b.std(ddof=1)
    if gap <= pooled_std(sa, sb):
        return False
    if len(a) == len(b):
        per_seed = a - b if higher_better else b - a
        if not np.all(per_seed > 0):
            return False
    return True


def format_table(report: AggregateReport) -> str:
    """Paper-style text table, one block per task, rows by rule."""
    lines = []
    by_task: dict[str, list[AggregateRow]] = {}
    for row in report.rows:
        by_task.setdefault(row.task, []).append(row)
    rule_order = {"gradient": 0, "hebbian": 1, "none": 2}
    for task in sorted(by_task):
        rows = sorted(by_task[task], key=lambda r: rule_order.get(r.rule, 9))
        name = rows[0].metric_name
        lines.append(f"[{task}]  (n_seeds per row; metric = {name})")
        lines.append(f"{'RULE':<10} {'LOSS':>20} {name.upper():>24} "
                     f"{'RELIABLE':>9}")
        for r in rows:
            loss = r.stats['loss']
            met = r.stats['metric']
            rel = "-" if r.reliable_vs_none is None else \
                ("yes" if r.reliable_vs_none else "no")
            flag = " (few seeds)" if r.few_seeds else ""
            lines.append(
                f"{r.rule:<10} {loss['mean']:>11.4f} ± {loss['std']:<7.4f}"
                f"{met['mean']:>15.4f} ± {met['std']:<7.4f}{rel:>8}{flag}")
        lines.append("")
    return "\n".join(lines)


EMPTY_MARKER = "# empty: no records\n"


def export_plot_data(records: list[dict], kind: str, out_path) -> Path:
    """CSV with columns (series, x, mean, std), enough to regenerate the
    summary-bar and mechanistic-trace figures with any plotting tool."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if not records:
        out_path.write_text(EMPTY_MARKER)
        return out_path
    if kind == "summary_bars":
        rows = _summary_rows(records)
    elif kind == "mech_traces":
        rows = _mech_rows(records)
    else:
        raise DiagnosticsError(f"unknown export kind {kind!r}")
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series", "x", "mean", "std"])
        writer.writerows(rows)
    return out_path


def _summary_rows(records: list[dict]) -> list[list]:
    report = aggregate(records)
    rows = []
    for r in report.rows:
        for metric_key in ("loss", r.metric_name):
            stat_key = "loss" if metric_key == "loss" else "metric"
            rows.append([f"{r.task}/{r.rule}", metric_key,
                         repr(r.stats[stat_key]["mean"]),
                         repr(r.stats[stat_key]["std"])])
    return rows


def _mech_rows(records: list[dict]) -> list[list]:
    """Per (rule, epoch) mean/std across seeds of the training-episode mean
    eta and mean plastic norm."""
    grouped: dict[tuple[str, str, int, str], list[float]] = {}
    for rec in records:
        per_epoch: dict[int, dict[str, list[float]]] = {}
        for entry in rec["train_history"]:
            ep = per_epoch.setdefault(int(entry["epoch"]),
                                      {"eta": [], "norm": []})
            ep["eta"].append(float(entry["mean_eta"]))
            ep["norm"].append(float(entry["mean_plastic_norm"]))
        for epoch, vals in per_epoch.items():
            for series, key in (("eta", "eta"), ("plastic_norm", "norm")):
                grouped.setdefault(
                    (rec["task"], f"{rec['rule']}/{series}", epoch,
                     series), []).append(float(np.mean(vals[key])))
    rows = []
    for (task, series, epoch, _), vals in sorted(grouped.items()):
        arr = np.array(vals)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        rows.append([f"{task}/{series}", epoch, repr(float(arr.mean())),
                     repr(std)])
    return rows
