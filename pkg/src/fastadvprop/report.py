"""Run-directory summaries: one row per run as CSV, aligned text, and figures.

Everything here is a pure function of the files in the run directories.
"""
from __future__ import annotations

import csv
import io
import json
from fractions import Fraction
from pathlib import Path

import yaml

from .ledger import CostLedger, LedgerError, cost_factor, epoch_examples
from .data import DataError, normalized_score
from .trainers import TrainConfig, leakage_diagnostic, schedule_for

MISSING = "NA"

COLUMNS = ("run", "mode", "p_adv", "K", "random_init", "rebalance", "sync", "shuffle_bn", "epochs",
           "epochs_done", "budget_measured", "budget_theoretical", "budget_match", "clean_acc", "corruption_acc",
           "corruption_score", "leakage")

CONFIG_FILE = "config.yaml"
METRICS_FILE = "metrics.jsonl"
LEDGER_FILE = "ledger.jsonl"
EVAL_FILE = "eval.json"
CHECKPOINT_FILE = "checkpoint.bin"


def read_jsonl(path: Path) -> list[dict]:
    """Parse line-delimited records, stopping at a torn final line."""
    out = []
    if not path.exists():
        return out
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                break
    return out


def _fmt(v) -> str:
    if v is None:
        return MISSING
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def summarize_run(run_dir: str | Path, reference_errors: dict | None = None) -> dict:
    """Collect one report row; fields that cannot be derived are ``None``."""
    run_dir = Path(run_dir)
    row: dict = {c: None for c in COLUMNS}
    row["run"] = run_dir.name
    cfg_path = run_dir / CONFIG_FILE
    if not cfg_path.exists():
        return row
    cfg = yaml.safe_load(cfg_path.read_text()) or {}
    attack = cfg.get("attack", {}) or {}
    mode = cfg.get("mode")
    k = int(attack.get("steps", 1))
    row.update(mode=mode, p_adv=str(cfg.get("p_adv")) if mode == "fast" else MISSING, K=k,
               random_init=attack.get("random_init"), rebalance=cfg.get("rebalance"),
               sync=cfg.get("sync_update_speed"), shuffle_bn=cfg.get("shuffle_bn"))
    if mode != "fast":
        row["rebalance"] = row["sync"] = row["shuffle_bn"] = None
    if mode == "vanilla":
        row["K"] = row["random_init"] = None

    try:
        row["epochs"] = scheduled_epochs(cfg)
    except (TypeError, ValueError):
        pass
    metrics = read_jsonl(run_dir / METRICS_FILE)
    row["epochs_done"] = len(metrics) if metrics else None

    if (run_dir / LEDGER_FILE).exists():
        ledger = CostLedger.load(run_dir / LEDGER_FILE)
        per_epoch = ledger.per_epoch()
        if per_epoch and mode is not None:
            n = epoch_examples(next(iter(per_epoch.values())))
            row["budget_measured"] = ledger.total()
            try:
                factor = cost_factor(mode, k, Fraction(str(cfg.get("p_adv", 0))))
                theo = factor * n * len(per_epoch)
                row["budget_theoretical"] = str(theo) if theo.denominator != 1 else int(theo)
                row["budget_match"] = Fraction(ledger.total()) == theo
            except (LedgerError, ValueError, ZeroDivisionError):
                pass

    ev_path = run_dir / EVAL_FILE
    if ev_path.exists():
        ev = json.loads(ev_path.read_text())
        row["clean_acc"] = ev.get("clean_acc")
        corr = ev.get("corruption") or {}
        row["corruption_acc"] = corr.get("mean_accuracy")
        per_type = corr.get("per_type")
        if per_type and reference_errors:
            try:
                row["corruption_score"] = normalized_score(per_type, reference_errors)
            except (DataError, KeyError):
                pass

    if metrics and mode in ("fast", "advprop"):
        try:
            row["leakage"] = leakage_diagnostic(metrics).flagged
        except ValueError:
            pass
    return row


def scheduled_epochs(cfg: dict) -> int:
    """Calibrated epoch count implied by a resolved run config."""
    keep = ("mode", "p_adv", "base_epochs", "decay_epochs", "equal_budget", "attack")
    return schedule_for(TrainConfig(**{k: cfg[k] for k in keep if k in cfg})).effective_epochs


def reference_from(run_dirs) -> dict | None:
    """Per-type corruption errors of the first completed vanilla run, if any."""
    for d in run_dirs:
        d = Path(d)
        try:
            cfg = yaml.safe_load((d / CONFIG_FILE).read_text()) or {}
            ev = json.loads((d / EVAL_FILE).read_text())
        except (OSError, json.JSONDecodeError, yaml.YAMLError):
            continue
        per_type = (ev.get("corruption") or {}).get("per_type")
        if cfg.get("mode") == "vanilla" and per_type:
            return per_type
    return None


def build_rows(run_dirs, reference_errors: dict | None = None) -> list[dict]:
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ValueError("report needs at least one run directory")
    ref = reference_errors if reference_errors is not None else reference_from(run_dirs)
    return [summarize_run(d, ref) for d in run_dirs]


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in COLUMNS])
    return buf.getvalue()


def to_text(rows: list[dict]) -> str:
    cells = [list(COLUMNS)] + [[_fmt(r[c]) for c in COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_figures(run_dirs, rows: list[dict], out_dir: str | Path) -> list[Path]:
    """Write PNG figures next to the tables; returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []

    fig, ax = plt.subplots(figsize=(6, 3.5))
    plotted = False
    for d in map(Path, run_dirs):
        m = read_jsonl(d / METRICS_FILE)
        pts = [(r["epoch"], r["train_adv_acc"] - r["train_clean_acc"]) for r in m
               if r.get("train_adv_acc") is not None and r.get("train_clean_acc") is not None]
        if pts:
            ax.plot(*zip(*pts), marker="o", ms=3, label=d.name)
            plotted = True
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("adv - clean train acc")
    if plotted:
        ax.legend(fontsize=7)
    fig.tight_layout()
    written.append(out_dir / "leakage_gap.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [r["run"] for r in rows]
    measured = [r["budget_measured"] or 0 for r in rows]
    ax.bar(range(len(rows)), measured, color="tab:blue")
    ax.set_xticks(range(len(rows)), names, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("pass-units")
    fig.tight_layout()
    written.append(out_dir / "budget.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4.5, 4))
    for r in rows:
        if r["clean_acc"] is not None and r["corruption_acc"] is not None:
            ax.scatter(r["clean_acc"], r["corruption_acc"])
            ax.annotate(r["run"], (r["clean_acc"], r["corruption_acc"]), fontsize=7)
    ax.set_xlabel("clean accuracy")
    ax.set_ylabel("corruption accuracy")
    fig.tight_layout()
    written.append(out_dir / "accuracy.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)
    return written


def write_report(run_dirs, out_dir: str | Path, reference_errors: dict | None = None,
                 figures: bool = True) -> dict:
    rows = build_rows(run_dirs, reference_errors)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = to_text(rows)
    (out_dir / "summary.csv").write_text(to_csv(rows))
    (out_dir / "summary.txt").write_text(text)
    figs = render_figures(run_dirs, rows, out_dir) if figures else []
    return {"rows": rows, "text": text, "figures": figs}
