"""Command line: ``fastadvprop {train,eval,report,cost-audit}``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
The only environment variable read is ``FASTADVPROP_HOME``, the base
directory for run directories, reports, and relative data paths.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import yaml

from . import report as rpt
from .attacks import AttackConfig
from .autograd import NonFiniteError
from .data import (CorruptionSpec, DataError, Dataset, corruption_suite_eval, default_suite, load_dataset, load_idx,
                   synth_blobs)
from .ledger import BudgetModel, CostLedger, LedgerError, audit, cost_factor, epoch_examples
from .nn import CheckpointError, build_reference_cnn, load_checkpoint, predict, save_checkpoint
from .trainers import ConfigError, TrainConfig, Trainer

log = logging.getLogger("fastadvprop")

BASE_DIR_ENV = "FASTADVPROP_HOME"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# Abort a run when more than this share of an epoch's steps hit non-finite values.
MAX_SKIPPED_FRACTION = 0.1

DATA_DEFAULTS = dict(source="synth", n=10000, test_n=2000, classes=10, shape=[1, 16, 16], separation=0.3,
                     nuisance=0.12, pixel_noise=0.03, seed=0, prototype_seed=7)
MODEL_DEFAULTS = dict(widths=[8, 16], dual_bn=True, seed=None)
EVAL_DEFAULTS = dict(corruptions=True, corruption_seed=0, severities=[1, 2, 3])

TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "attack"}
ATTACK_FIELDS = {f.name: f for f in dataclasses.fields(AttackConfig)}


def base_dir() -> Path:
    return Path(os.environ.get(BASE_DIR_ENV, ".")).expanduser()


class UsageError(Exception):
    pass


# -- configuration ---------------------------------------------------------------

def _parse_bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _coerce(name: str, value, default):
    """Coerce a flag string to the type of the field's default."""
    if value is None or not isinstance(value, str):
        return value
    if name == "p_adv":
        try:
            return str(Fraction(value))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"p_adv: not a number or fraction: {value!r}")
    if name == "decay_epochs":
        return [int(v) for v in value.replace(",", " ").split()]
    try:
        if isinstance(default, bool) or name == "targeted":
            return _parse_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float) or name == "step_size":
            return None if value.lower() == "none" else float(value)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r}")
    return value


def _field_default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory() if f.default_factory is not dataclasses.MISSING else None


def load_config(path: str | Path | None, overrides: dict | None = None) -> dict:
    """Read a YAML run config and apply flag overrides; returns a plain dict."""
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
    known = set(TRAIN_FIELDS) | {"attack", "data", "model", "eval", "run_id"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    cfg = {k: v for k, v in raw.items() if k in TRAIN_FIELDS}
    cfg["attack"] = dict(raw.get("attack") or {})
    bad = set(cfg["attack"]) - set(ATTACK_FIELDS)
    if bad:
        raise ConfigError(f"unknown attack field(s): {', '.join(sorted(bad))}")
    for section, defaults in (("data", DATA_DEFAULTS), ("model", MODEL_DEFAULTS), ("eval", EVAL_DEFAULTS)):
        given = dict(raw.get(section) or {})
        cfg[section] = {**defaults, **given}
    cfg["run_id"] = raw.get("run_id")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in TRAIN_FIELDS:
            cfg[key] = _coerce(key, value, _field_default(TRAIN_FIELDS[key]))
        elif key in ATTACK_FIELDS:
            cfg["attack"][key] = _coerce(key, value, _field_default(ATTACK_FIELDS[key]))
        elif key == "run_id":
            cfg["run_id"] = value
        elif "." in key and key.split(".", 1)[0] in ("data", "model", "eval", "attack"):
            section, sub = key.split(".", 1)
            cfg[section][sub] = yaml.safe_load(value) if isinstance(value, str) else value
        else:
            raise ConfigError(f"unknown override {key!r}")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    kw = {k: v for k, v in cfg.items() if k in TRAIN_FIELDS}
    try:
        attack = AttackConfig(**cfg.get("attack", {}))
        tc = TrainConfig(**kw, attack=attack)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    return tc.validate()


def resolved_config(cfg: dict, tc: TrainConfig) -> dict:
    out = tc.to_dict()
    out.update(data=cfg["data"], model=cfg["model"], eval=cfg["eval"], run_id=cfg.get("run_id"))
    return out


def _path(p) -> Path:
    p = Path(p).expanduser()
    return p if p.is_absolute() else base_dir() / p


def load_data(data: dict) -> tuple[Dataset, Dataset]:
    src = data.get("source", "synth")
    if src == "synth":
        common = dict(classes=int(data["classes"]), shape=tuple(data["shape"]), separation=float(data["separation"]),
                      nuisance=float(data["nuisance"]), pixel_noise=float(data["pixel_noise"]),
                      prototype_seed=data.get("prototype_seed"))
        if common["prototype_seed"] is None:
            common["prototype_seed"] = int(data["seed"])
        train = synth_blobs(int(data["n"]), seed=int(data["seed"]), split="train", **common)
        test = synth_blobs(int(data["test_n"]), seed=int(data["seed"]) + 1, split="test", **common)
        return train, test
    if src == "idx":
        classes = data.get("classes")
        return (load_idx(_path(data["train_images"]), _path(data["train_labels"]), classes, "train"),
                load_idx(_path(data["test_images"]), _path(data["test_labels"]), classes, "test"))
    if src == "file":
        return load_dataset(_path(data["train"])), load_dataset(_path(data["test"]))
    raise ConfigError(f"data.source: unknown source {src!r} (synth, idx, file)")


def corruption_specs(ev: dict) -> list[CorruptionSpec]:
    return default_suite(int(ev.get("corruption_seed", 0)), tuple(ev.get("severities", (1, 2, 3))))


# -- train -----------------------------------------------------------------------

def _truncate_jsonl(path: Path, keep) -> None:
    if path.exists():
        rows = [r for r in rpt.read_jsonl(path) if keep(r)]
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def cmd_train(config: str | Path | None, overrides: dict | None = None, run_dir: str | Path | None = None,
              resume: bool = False) -> Path:
    cfg = load_config(config, overrides)
    tc = train_config(cfg)
    run_id = cfg.get("run_id") or f"{tc.mode}-seed{tc.seed}"
    run_dir = Path(run_dir) if run_dir is not None else base_dir() / "runs" / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    train, test = load_data(cfg["data"])

    ck = run_dir / rpt.CHECKPOINT_FILE
    metrics_path, ledger_path = run_dir / rpt.METRICS_FILE, run_dir / rpt.LEDGER_FILE
    model = cfg["model"]
    seed = tc.seed if model.get("seed") is None else int(model["seed"])
    net = build_reference_cnn(in_shape=train.shape, classes=train.classes, widths=tuple(model["widths"]),
                              seed=seed, dual_bn=bool(model["dual_bn"]))
    trainer = Trainer(tc, net, run_id)
    if resume and ck.exists():
        net, extra, meta = load_checkpoint(ck)
        if meta.get("config") != json.loads(json.dumps(resolved_config(cfg, tc))):
            raise ConfigError("resume: config differs from the checkpointed run")
        trainer = Trainer(tc, net, run_id)
        trainer.opt.load_state(extra)
        trainer.epoch, trainer.global_step = int(meta["epoch"]), int(meta["global_step"])
        done = trainer.epoch
        _truncate_jsonl(metrics_path, lambda r: r["epoch"] < done)
        _truncate_jsonl(ledger_path, lambda r: r["epoch"] < done)
        log.info("resuming %s at epoch %d", run_id, done)
    else:
        for p in (metrics_path, ledger_path, run_dir / rpt.EVAL_FILE, ck):
            p.unlink(missing_ok=True)
    (run_dir / rpt.CONFIG_FILE).write_text(yaml.safe_dump(resolved_config(cfg, tc), sort_keys=False))

    steps_per_epoch = len(train) // tc.total_batch
    if steps_per_epoch == 0:
        raise ConfigError(f"batch of {tc.total_batch} exceeds the {len(train)}-example training set")
    while trainer.epoch < trainer.schedule.effective_epochs:
        mark = len(trainer.ledger.records)
        rec = trainer.train_epoch(train, test)
        trainer.ledger.append_to(ledger_path, mark)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(rec.flat()) + "\n")
        if rec.skipped_steps > MAX_SKIPPED_FRACTION * steps_per_epoch:
            raise NonFiniteError(f"epoch {rec.epoch}: {rec.skipped_steps}/{steps_per_epoch} steps non-finite")
        save_checkpoint(ck, trainer.net, extra=trainer.opt.state(),
                        meta={"epoch": trainer.epoch, "global_step": trainer.global_step,
                              "config": resolved_config(cfg, tc)})

    ev = evaluate(trainer.net, test, cfg["eval"])
    ev["epochs"] = trainer.epoch
    (run_dir / rpt.EVAL_FILE).write_text(json.dumps(ev, indent=2))
    return run_dir


# -- eval ------------------------------------------------------------------------

def evaluate(net, test: Dataset, ev: dict, reference: dict | None = None) -> dict:
    out = {"clean_acc": float((predict(net, test.images) == test.labels).mean()), "n": len(test)}
    if ev.get("corruptions"):
        res = corruption_suite_eval(net, test, corruption_specs(ev), reference)
        out["corruption"] = res
    return out


def cmd_eval(checkpoint, config=None, dataset=None, corruptions: bool | None = None,
             reference=None) -> dict:
    net, _, meta = load_checkpoint(checkpoint)
    cfg = meta.get("config") or {}
    if config is not None:
        cfg = load_config(config)
    ev = dict(EVAL_DEFAULTS, **(cfg.get("eval") or {}))
    if corruptions is not None:
        ev["corruptions"] = corruptions
    if dataset is not None:
        test = load_dataset(dataset)
    elif cfg.get("data"):
        test = load_data(dict(DATA_DEFAULTS, **cfg["data"]))[1]
    else:
        raise ConfigError("eval needs --dataset or a config with a data section")
    ref = None
    if reference is not None:
        ref_doc = json.loads(Path(reference).read_text())
        ref = (ref_doc.get("corruption") or {}).get("per_type", ref_doc)
    return evaluate(net, test, ev, ref)


# -- cost audit ------------------------------------------------------------------

def cmd_cost_audit(run_dir, against=None) -> dict:
    run_dir = Path(run_dir)
    cfg = yaml.safe_load((run_dir / rpt.CONFIG_FILE).read_text())
    ledger = CostLedger.load(run_dir / rpt.LEDGER_FILE)
    per_epoch = ledger.per_epoch()
    if not per_epoch:
        raise LedgerError(f"{run_dir}: empty ledger")
    n = epoch_examples(next(iter(per_epoch.values())))
    k = int((cfg.get("attack") or {}).get("steps", 1))
    model = BudgetModel(cfg["mode"], n, k, cfg.get("p_adv", 0) if cfg["mode"] == "fast" else 0)
    rep = audit(ledger, model)
    out = {"run": run_dir.name, "mode": model.mode, "N": n, "K": k, "p_adv": str(model.p_adv),
           "epochs": len(per_epoch), "total": ledger.total(), **rep.as_dict()}
    if against is not None:
        other = CostLedger.load(Path(against) / rpt.LEDGER_FILE)
        tol = cost_factor(model.mode, k, model.p_adv) * n
        diff = abs(ledger.total() - other.total())
        out["against"] = {"run": Path(against).name, "total": other.total(), "difference": diff,
                          "tolerance": str(tol), "equal_budget": diff <= tol}
    return out


# -- argument parsing --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_field_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config fields (override the config file)")
    for name in list(TRAIN_FIELDS) + list(ATTACK_FIELDS) + ["run_id"]:
        g.add_argument(f"--{name}", dest=f"field:{name}", metavar="VALUE", default=None)
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a data/model/eval entry, e.g. --set data.n=2000")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fastadvprop", description="Vanilla, AdvProp and Fast AdvProp training at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one run into a run directory")
    p.add_argument("config", nargs="?", help="YAML run config")
    p.add_argument("--run-dir", help=f"default: ${BASE_DIR_ENV}/runs/<run_id>")
    p.add_argument("--resume", action="store_true", help="continue from the run's last epoch checkpoint")
    _add_field_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint (Main branch, running statistics)")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="YAML config whose data/eval sections to use")
    p.add_argument("--dataset", help="dataset container file")
    p.add_argument("--corruptions", choices=["true", "false"], default=None)
    p.add_argument("--reference", help="eval JSON of the reference model for the normalized score")
    p.add_argument("--out", help="also write the JSON result here")

    p = sub.add_parser("report", help="summary table and figures over run directories")
    p.add_argument("runs", nargs="*")
    p.add_argument("--out", help=f"output directory (default: ${BASE_DIR_ENV}/report)")
    p.add_argument("--reference", help="eval JSON of the reference model (default: first vanilla run)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("cost-audit", help="audit a run's ledger against the closed-form cost")
    p.add_argument("run")
    p.add_argument("--against", help="second run directory for an equal-budget comparison")
    return parser


def _overrides(args) -> dict:
    out = {k.split(":", 1)[1]: v for k, v in vars(args).items() if k.startswith("field:") and v is not None}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        if k.split(".", 1)[0] not in ("data", "model", "eval") or "." not in k:
            raise ConfigError(f"--set key must start with data., model. or eval.: {k!r}")
        out[k] = v
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            run_dir = cmd_train(args.config, _overrides(args), args.run_dir, args.resume)
            print(json.dumps({"run_dir": str(run_dir), **json.loads((run_dir / rpt.EVAL_FILE).read_text())},
                             indent=2, default=str))
        elif args.command == "eval":
            corr = None if args.corruptions is None else args.corruptions == "true"
            res = cmd_eval(args.checkpoint, args.config, args.dataset, corr, args.reference)
            text = json.dumps(res, indent=2)
            if args.out:
                Path(args.out).write_text(text)
            print(text)
        elif args.command == "report":
            if not args.runs:
                raise UsageError("report: give at least one run directory")
            ref = None
            if args.reference:
                doc = json.loads(Path(args.reference).read_text())
                ref = (doc.get("corruption") or {}).get("per_type", doc)
            out = Path(args.out) if args.out else base_dir() / "report"
            res = rpt.write_report(args.runs, out, ref, figures=not args.no_figures)
            sys.stdout.write(res["text"])
            print(f"wrote {out / 'summary.csv'}, {out / 'summary.txt'}"
                  + "".join(f", {f}" for f in res["figures"]))
        elif args.command == "cost-audit":
            print(json.dumps(cmd_cost_audit(args.run, args.against), indent=2, default=str))
    except (ConfigError, UsageError) as exc:
        print(f"fastadvprop {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, CheckpointError, DataError, LedgerError, OSError, KeyError) as exc:
        print(f"fastadvprop {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
