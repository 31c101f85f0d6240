"""Pass-unit accounting and audits against the closed-form training costs.

One pass-unit is one forward+backward traversal for one example, regardless
of whether the backward targets parameters, the input, or both.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

PASS_KINDS = ("clean", "attack", "attack+noise", "adversarial", "eval")
MODES = ("vanilla", "advprop", "fast")


class LedgerError(Exception):
    pass


@dataclass(frozen=True)
class PassRecord:
    epoch: int
    step: int
    kind: str
    n: int


@dataclass
class CostLedger:
    records: list[PassRecord] = field(default_factory=list)
    epoch: int = 0
    step: int = 0

    def record_pass(self, kind: str, n: int) -> "CostLedger":
        if kind not in PASS_KINDS:
            raise LedgerError(f"unknown pass kind {kind!r}")
        if n < 1:
            raise LedgerError(f"pass count must be positive, got {n}")
        self.records.append(PassRecord(self.epoch, self.step, kind, int(n)))
        return self

    def next_step(self) -> None:
        self.step += 1

    def next_epoch(self) -> None:
        self.epoch += 1
        self.step = 0

    def total(self, kind: str | None = None, include_eval: bool = False) -> int:
        return sum(r.n for r in self.records
                   if (kind is None or r.kind == kind) and (include_eval or kind == "eval" or r.kind != "eval"))

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for r in self.records:
            out[r.kind] += r.n
        return dict(out)

    def per_epoch(self) -> dict[int, dict[str, int]]:
        out: dict[int, dict[str, int]] = defaultdict(lambda: defaultdict(int))
        for r in self.records:
            out[r.epoch][r.kind] += r.n
        return {e: dict(v) for e, v in sorted(out.items())}

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")

    def append_to(self, path: str | Path, start: int = 0) -> int:
        """Append records[start:] as JSON lines; returns the new high-water mark."""
        with open(path, "a") as fh:
            for r in self.records[start:]:
                fh.write(json.dumps(asdict(r)) + "\n")
        return len(self.records)

    @classmethod
    def load(cls, path: str | Path) -> "CostLedger":
        ledger = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    ledger.records.append(PassRecord(**json.loads(line)))
                except (json.JSONDecodeError, TypeError):
                    break  # torn final line from an interrupted run
        if ledger.records:
            ledger.epoch = ledger.records[-1].epoch
        return ledger


@dataclass(frozen=True)
class BudgetModel:
    mode: str
    n: int
    k: int = 1
    p_adv: Fraction | float | str = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise LedgerError(f"unknown mode {self.mode!r}")
        if self.n < 1:
            raise LedgerError("N must be at least 1")
        if self.k < 1:
            raise LedgerError("K must be at least 1")
        object.__setattr__(self, "p_adv", as_fraction(self.p_adv))
        if not 0 <= self.p_adv <= 1:
            raise LedgerError("p_adv must lie in [0, 1]")


def as_fraction(p) -> Fraction:
    """Exact rational from a Fraction, an int, a "a/b" string, or a decimal float."""
    if isinstance(p, Fraction):
        return p
    if isinstance(p, float):
        return Fraction(repr(p))
    return Fraction(p)


def cost_factor(mode: str, k: int = 1, p_adv=0) -> Fraction:
    """Per-epoch cost relative to vanilla training."""
    if mode == "vanilla":
        return Fraction(1)
    if mode == "advprop":
        return Fraction(k + 2)
    if mode == "fast":
        return as_fraction(p_adv) * k + 1
    raise LedgerError(f"unknown mode {mode!r}")


def theoretical_cost(model: BudgetModel) -> Fraction:
    """Pass-units per epoch: N, (K+2)N, or (p_adv K + 1)N."""
    return cost_factor(model.mode, model.k, model.p_adv) * model.n


def epoch_examples(counts: dict[str, int]) -> int:
    """Distinct training examples drawn in an epoch: clean plus attack-seed passes."""
    return counts.get("clean", 0) + counts.get("attack+noise", 0)


def measured_cost(counts: dict[str, int]) -> int:
    return sum(n for kind, n in counts.items() if kind != "eval")


@dataclass
class AuditReport:
    measured: dict[int, int]
    theoretical: Fraction
    match: bool
    discrepancy: dict[int, Fraction]

    def as_dict(self) -> dict:
        return {
            "measured": self.measured,
            "theoretical": str(self.theoretical),
            "match": self.match,
            "discrepancy": {e: str(d) for e, d in self.discrepancy.items()},
        }


def audit(ledger: CostLedger, model: BudgetModel) -> AuditReport:
    """Compare every epoch's measured pass-units with the closed form.

    The ledger's own per-epoch example count must equal ``model.n``;
    otherwise the model does not describe this run and the audit is refused.
    """
    epochs = ledger.per_epoch()
    if not epochs:
        raise LedgerError("empty ledger")
    theo = theoretical_cost(model)
    measured, disc = {}, {}
    for e, counts in epochs.items():
        seen = epoch_examples(counts)
        if seen != model.n:
            raise LedgerError(f"epoch {e}: ledger drew {seen} examples but the budget model says N={model.n}")
        measured[e] = measured_cost(counts)
        disc[e] = measured[e] - theo
    return AuditReport(measured, theo, all(d == 0 for d in disc.values()), disc)
