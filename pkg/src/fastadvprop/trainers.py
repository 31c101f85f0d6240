"""Vanilla, AdvProp and Fast AdvProp training steps and the epoch loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from typing import Callable

import numpy as np

from .attacks import AttackConfig, attack_with_grad_reuse, fgsm_step, perturb, pgd_attack, sample_init_noise
from .autograd import Graph, NonFiniteError, Tensor, sgd_momentum_update
from .data import Dataset, batch_iter
from .ledger import CostLedger, as_fraction, cost_factor
from .nn import (Network, ParamRole, Route, StatsMode, backward_params, network_forward, param_roles,
                 predict)

log = logging.getLogger(__name__)

MODES = ("vanilla", "advprop", "fast")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "fast"
    p_adv: Fraction | float | str = Fraction(1, 5)
    beta: float = 0.5
    base_epochs: int = 105
    decay_epochs: tuple[int, ...] = (30, 60, 90, 100)
    lr: float = 0.1
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    aux_weight_decay: bool = True
    batch_size: int = 64           # clean examples per shard
    shards: int = 1
    attack: AttackConfig = field(default_factory=AttackConfig)
    shuffle_bn: bool = False
    rebalance: bool = True
    sync_update_speed: bool = True
    rescale_before_combine: bool = False  # per-role factors commute with the sum; only rounding differs
    equal_budget: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.attack.targeted is None:
            self.attack = replace(self.attack, targeted=self.mode == "advprop")
        self.p_adv = as_fraction(self.p_adv)
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    @property
    def p_clean(self) -> Fraction:
        return 1 - self.p_adv

    @property
    def effective_beta(self) -> float:
        # Without re-balancing every pass carries unit weight.
        return self.beta if self.rebalance else 1.0

    @property
    def shard_batch(self) -> int:
        """Examples per shard in one step (clean + adversarial seeds)."""
        if self.mode != "fast":
            return self.batch_size
        return int(Fraction(self.batch_size) / self.p_clean)

    @property
    def total_batch(self) -> int:
        return self.shard_batch * self.shards

    @property
    def adv_per_shard(self) -> int:
        return int(self.p_adv * self.shard_batch) if self.mode == "fast" else 0

    def validate(self) -> "TrainConfig":
        errs = []
        if self.mode not in MODES:
            errs.append(f"mode: must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.p_adv <= 1:
            errs.append(f"p_adv: must lie in [0, 1], got {self.p_adv}")
        if self.beta < 0:
            errs.append("beta: must be >= 0")
        if self.base_epochs < 1:
            errs.append("base_epochs: must be positive")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            errs.append("decay_epochs: must be strictly increasing")
        if self.batch_size < 2:
            errs.append("batch_size: need at least 2 clean examples per shard for batch statistics")
        if self.shards < 1:
            errs.append("shards: must be positive")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            errs.append("lr/momentum/weight_decay: must be non-negative")
        if self.mode == "fast" and not errs:
            if self.attack.steps != 1:
                errs.append("attack.steps: fast mode reuses gradients and requires a single step")
            if self.attack.targeted:
                errs.append("attack.targeted: fast mode requires an untargeted attack")
            if self.p_adv >= 1:
                errs.append("p_adv: fast mode needs a clean share (p_adv < 1)")
            else:
                shard = Fraction(self.batch_size) / self.p_clean
                if shard.denominator != 1 or (self.p_adv * shard).denominator != 1:
                    errs.append(f"p_adv: batch_size/(1-p_adv) = {shard} does not split into integral sub-batches")
                elif 0 < self.p_adv * shard < 2:
                    errs.append("p_adv: fewer than 2 adversarial examples per shard; batch statistics degenerate")
            if self.sync_update_speed and self.p_adv in (0, 1):
                errs.append("sync_update_speed: undefined for p_adv in {0, 1}")
            if self.shuffle_bn and self.shards < 2:
                errs.append("shuffle_bn: needs at least 2 shards")
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["p_adv"] = str(self.p_adv)
        d["decay_epochs"] = list(self.decay_epochs)
        d["attack"] = {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(self.attack).items()}
        return d


# -- schedule ----------------------------------------------------------------

def round_half_down(q: Fraction) -> int:
    fl = math.floor(q)
    return fl if q - fl <= Fraction(1, 2) else fl + 1


@dataclass(frozen=True)
class Schedule:
    effective_epochs: int
    effective_decay_epochs: tuple[int, ...]
    lrs: tuple[float, ...]

    def lr(self, epoch: int) -> float:
        return self.lrs[epoch]


def scale_schedule(base_epochs: int, decay_epochs, factor: Fraction, lr: float = 0.1,
                   lr_decay: float = 0.1) -> Schedule:
    factor = as_fraction(factor)
    epochs = round_half_down(Fraction(base_epochs) / factor)
    if epochs < 1:
        raise ConfigError(f"calibrated schedule has no epochs ({base_epochs} / {factor})")
    decays = []
    for d in decay_epochs:
        e = round_half_down(Fraction(d) / factor)
        if e not in decays:
            decays.append(e)
    lrs = tuple(lr * lr_decay ** sum(1 for d in decays if epoch >= d) for epoch in range(epochs))
    return Schedule(epochs, tuple(decays), lrs)


def calibrate_schedule(base_epochs: int, decay_epochs, p_adv, k: int = 1, lr: float = 0.1,
                       lr_decay: float = 0.1) -> Schedule:
    """Shrink epochs and decay points by ``1 + p_adv * K``, rounding halves down."""
    p_adv = as_fraction(p_adv)
    if not 0 <= p_adv <= 1 or k < 1:
        raise ConfigError("need 0 <= p_adv <= 1 and K >= 1")
    return scale_schedule(base_epochs, decay_epochs, 1 + p_adv * k, lr, lr_decay)


def schedule_for(cfg: TrainConfig) -> Schedule:
    factor = cost_factor(cfg.mode, cfg.attack.steps, cfg.p_adv) if cfg.equal_budget else Fraction(1)
    return scale_schedule(cfg.base_epochs, cfg.decay_epochs, factor, cfg.lr, cfg.lr_decay)


# -- batch manipulation --------------------------------------------------------

def split_batch(x: np.ndarray, y: np.ndarray, p_adv, seed=None, shards: int = 1):
    """Partition each shard block into a clean part and an adversarial-seed part.

    Returns ``((x1, y1), (x2, y2))``; both parts keep the batch's original
    relative order, so ``p_adv = 0`` returns the batch unchanged.
    """
    p_adv = as_fraction(p_adv)
    n = len(x)
    if n % shards:
        raise ConfigError(f"batch of {n} does not divide into {shards} shards")
    m = n // shards
    k = p_adv * m
    if k.denominator != 1:
        raise ConfigError(f"p_adv={p_adv} does not split a shard of {m} integrally")
    k = int(k)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    adv = np.zeros(n, dtype=bool)
    for s in range(shards):
        if k:
            adv[s * m + rng.choice(m, size=k, replace=False)] = True
    return (x[~adv], y[~adv]), (x[adv], y[adv])


@dataclass
class ShuffleResult:
    x: np.ndarray
    y: np.ndarray
    perm: np.ndarray

    @property
    def inverse(self) -> np.ndarray:
        return np.argsort(self.perm, kind="stable")


def shuffle_across_shards(x: np.ndarray, y: np.ndarray, shards: int, seed=None) -> ShuffleResult:
    """Jointly permute (image, label) pairs over the whole multi-shard batch."""
    if shards < 2:
        raise ConfigError("shuffling across shards needs at least 2 shards")
    if len(x) % shards:
        raise ConfigError("shards must have equal size")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(len(x))
    return ShuffleResult(x[perm], y[perm], perm)


# -- gradient arithmetic -------------------------------------------------------

Grads = dict[str, np.ndarray]


@dataclass
class GradientBundle:
    clean: Grads | None = None
    noise: Grads | None = None
    adv: Grads | None = None


def combine_gradients(bundle: GradientBundle, beta: float) -> Grads:
    """``g_clean + beta * g_noise + beta * g_adv``; absent parts contribute zero."""
    out: Grads = {k: v.copy() for k, v in (bundle.clean or {}).items()}
    for part in (bundle.noise, bundle.adv):
        for k, v in (part or {}).items():
            term = v * v.dtype.type(beta)
            out[k] = out[k] + term if k in out else term
    return out


def update_speed_factors(p_adv) -> dict[ParamRole, float]:
    p_adv = as_fraction(p_adv)
    if p_adv in (0, 1):
        raise ConfigError("update-speed synchronization is undefined for p_adv in {0, 1}")
    return {ParamRole.SHARED: 1.0, ParamRole.MAIN_BN: float(1 / (1 - p_adv)), ParamRole.AUX_BN: float(1 / p_adv)}


def rescale_for_update_speed(grads: Grads, roles: dict[str, ParamRole], p_adv) -> Grads:
    """Scale MainBN by 1/(1-p_adv) and AuxBN by 1/p_adv; Shared is untouched."""
    factors = update_speed_factors(p_adv)
    out: Grads = {}
    for k, g in grads.items():
        f = factors[roles[k]]
        out[k] = g if f == 1.0 else g * g.dtype.type(f)
    return out


# -- optimizer -----------------------------------------------------------------

class SGD:
    """Momentum SGD over a network's named parameters; skips params without a gradient."""

    def __init__(self, net: Network, momentum: float = 0.9, weight_decay: float = 0.0,
                 aux_weight_decay: bool = True):
        self.net = net
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.aux_weight_decay = aux_weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p, _ in net.named_parameters()}

    def step(self, grads: Grads, lr: float) -> None:
        named = [(name, p, role) for name, p, role in self.net.named_parameters() if name in grads]
        wds = [0.0 if (role is ParamRole.AUX_BN and not self.aux_weight_decay) else self.weight_decay
               for _, _, role in named]
        sgd_momentum_update([p for _, p, _ in named], [grads[n] for n, _, _ in named],
                            [self.velocity[n] for n, _, _ in named], lr, self.momentum, wds)

    def state(self) -> dict[str, np.ndarray]:
        return {f"velocity/{k}": v for k, v in self.velocity.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.velocity.items():
            v[...] = state[f"velocity/{k}"]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.velocity.items()}

    def restore(self, snap) -> None:
        for k, v in self.velocity.items():
            v[...] = snap[k]


# -- passes and steps ----------------------------------------------------------

def _pass(net: Network, x: np.ndarray, y: np.ndarray, route: Route, shards: int) -> tuple[Grads, float, float]:
    """Training pass: batch statistics, running update, parameter gradients."""
    g = network_forward(net, Tensor(np.asarray(x, dtype=net.dtype)), route, StatsMode.BATCH,
                        update_running=True, labels=y, shards=shards)
    grads = backward_params(g, net)
    acc = float((g.logits.data.argmax(axis=1) == y).mean())
    return grads, float(g.loss.data), acc


def _atomic(net: Network, opt: SGD, body: Callable[[], dict]) -> dict:
    snap, vsnap = net.snapshot(), opt.snapshot()
    try:
        return body()
    except NonFiniteError as exc:
        net.restore(snap)
        opt.restore(vsnap)
        log.warning("step skipped: %s", exc)
        return {"skipped": True, "error": str(exc)}
    except Exception:
        net.restore(snap)
        opt.restore(vsnap)
        raise


def vanilla_step(net: Network, x, y, opt: SGD, lr: float, shards: int = 1,
                 ledger: CostLedger | None = None) -> dict:
    def body():
        grads, loss, acc = _pass(net, x, y, Route.MAIN, shards)
        if ledger is not None:
            ledger.record_pass("clean", len(x))
        opt.step(grads, lr)
        return {"clean_loss": loss, "clean_acc": acc, "n_clean": len(x), "skipped": False}
    return _atomic(net, opt, body)


def advprop_step(net: Network, x, y, opt: SGD, lr: float, attack: AttackConfig, rng=None, shards: int = 1,
                 ledger: CostLedger | None = None) -> dict:
    """Paired clean/adversarial step: attack all of ``x`` on Aux, then train both branches."""
    def body():
        x_adv = pgd_attack(net, x, y, attack, rng=rng, route=Route.AUX, shards=shards, ledger=ledger)
        g_clean, c_loss, c_acc = _pass(net, x, y, Route.MAIN, shards)
        if ledger is not None:
            ledger.record_pass("clean", len(x))
        g_adv, a_loss, a_acc = _pass(net, x_adv, y, Route.AUX, shards)
        if ledger is not None:
            ledger.record_pass("adversarial", len(x))
        opt.step(combine_gradients(GradientBundle(clean=g_clean, adv=g_adv), 1.0), lr)
        return {"clean_loss": c_loss, "clean_acc": c_acc, "adv_loss": a_loss, "adv_acc": a_acc,
                "n_clean": len(x), "n_adv": len(x), "skipped": False}
    return _atomic(net, opt, body)


def fast_advprop_gradients(net: Network, x, y, cfg: TrainConfig, rng: np.random.Generator,
                           ledger: CostLedger | None = None, fused: bool = True) -> tuple[Grads, dict]:
    """Everything in a Fast AdvProp step except the parameter update.

    ``fused=False`` runs the reference path: a separate input-gradient-only
    attack pass, then an independent noise training pass on the same
    ``x + delta``.  Both paths leave running statistics in the same state.
    """
    shards = cfg.shards
    (x1, y1), (x2, y2) = split_batch(x, y, cfg.p_adv, rng, shards)
    metrics: dict = {"n_clean": len(x1), "n_adv": len(x2), "skipped": False}
    bundle = GradientBundle()
    if len(x2):
        eps = cfg.attack.epsilon
        if fused:
            res = attack_with_grad_reuse(net, x2, y2, eps, rng, shards=shards, random_init=cfg.attack.random_init,
                                         clip_image=cfg.attack.clip_image, ledger=ledger)
            x_adv, bundle.noise = res.x_adv, res.grads
            metrics.update(noise_loss=res.loss, noise_acc=res.acc)
        else:
            x_adv, bundle.noise, nl, na = _unfused_noise_pass(net, x2, y2, cfg, rng)
            metrics.update(noise_loss=nl, noise_acc=na)
        y_adv = y2
        if cfg.shuffle_bn:
            sh = shuffle_across_shards(x_adv, y2, shards, rng)
            x_adv, y_adv = sh.x, sh.y
        bundle.adv, a_loss, a_acc = _pass(net, x_adv, y_adv, Route.AUX, shards)
        if ledger is not None:
            ledger.record_pass("adversarial", len(x_adv))
        metrics.update(adv_loss=a_loss, adv_acc=a_acc)
    if len(x1):
        bundle.clean, c_loss, c_acc = _pass(net, x1, y1, Route.MAIN, shards)
        if ledger is not None:
            ledger.record_pass("clean", len(x1))
        metrics.update(clean_loss=c_loss, clean_acc=c_acc)
    sync = cfg.sync_update_speed and 0 < cfg.p_adv < 1
    if sync and cfg.rescale_before_combine:
        roles = param_roles(net)
        bundle = GradientBundle(*(None if part is None else rescale_for_update_speed(part, roles, cfg.p_adv)
                                  for part in (bundle.clean, bundle.noise, bundle.adv)))
    grads = combine_gradients(bundle, cfg.effective_beta)
    if sync and not cfg.rescale_before_combine:
        grads = rescale_for_update_speed(grads, param_roles(net), cfg.p_adv)
    return grads, metrics


def _unfused_noise_pass(net: Network, x2, y2, cfg: TrainConfig, rng: np.random.Generator):
    dtype = net.dtype
    x2 = np.asarray(x2, dtype=dtype)
    eps = cfg.attack.epsilon
    delta = sample_init_noise(x2.shape, eps, rng, dtype) if cfg.attack.random_init else np.zeros_like(x2)
    if cfg.attack.clip_image:
        delta = np.clip(x2 + delta, 0, 1) - x2
    # Attack pass: input gradient only, statistics untouched.
    d = Tensor(delta, requires_grad=True)
    g = Graph()
    network_forward(net, g.add(Tensor(x2), d), Route.AUX, StatsMode.BATCH, update_running=False,
                    labels=y2, shards=cfg.shards, graph=g)
    g.backward(wrt=[d])
    new_delta = fgsm_step(d.grad, delta, eps)
    if cfg.attack.clip_image:
        new_delta = np.clip(x2 + new_delta, 0, 1) - x2
    # Noise training pass on the identical x + delta.
    d2 = Tensor(delta)
    g2 = Graph()
    network_forward(net, g2.add(Tensor(x2), d2), Route.AUX, StatsMode.BATCH, update_running=True,
                    labels=y2, shards=cfg.shards, graph=g2)
    grads = backward_params(g2, net)
    acc = float((g2.logits.data.argmax(axis=1) == y2).mean())
    return perturb(x2, new_delta, eps), grads, float(g2.loss.data), acc


def fast_advprop_step(net: Network, x, y, opt: SGD, lr: float, cfg: TrainConfig, rng: np.random.Generator,
                      ledger: CostLedger | None = None) -> dict:
    def body():
        grads, metrics = fast_advprop_gradients(net, x, y, cfg, rng, ledger)
        opt.step(grads, lr)
        return metrics
    return _atomic(net, opt, body)


# -- epoch loop ----------------------------------------------------------------

PASS_NAMES = ("clean", "noise", "adv")


@dataclass
class EpochRecord:
    run_id: str
    epoch: int
    step: int
    lr: float
    train: dict[str, float | None]
    val_acc: float | None
    ledger: dict[str, int]
    skipped_steps: int
    wall_time: float

    def flat(self) -> dict:
        d = asdict(self)
        d.update({f"train_{k}": v for k, v in d.pop("train").items()})
        return d


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


class Trainer:
    """Owns a network, optimizer state, and ledger for one run."""

    def __init__(self, cfg: TrainConfig, net: Network, run_id: str = "run"):
        self.cfg = cfg.validate()
        self.net = net
        self.run_id = run_id
        self.opt = SGD(net, cfg.momentum, cfg.weight_decay, cfg.aux_weight_decay)
        self.ledger = CostLedger()
        self.schedule = schedule_for(cfg)
        self.records: list[EpochRecord] = []
        self.epoch = 0
        self.global_step = 0

    def step_rng(self, epoch: int, step: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seed, epoch, step, 0x57E9]))

    def train_epoch(self, ds: Dataset, val: Dataset | None = None) -> EpochRecord:
        cfg, epoch = self.cfg, self.epoch
        lr = self.schedule.lr(epoch)
        self.ledger.epoch, self.ledger.step = epoch, 0
        acc = {f"{p}_{m}": [] for p in PASS_NAMES for m in ("loss", "acc")}
        skipped = 0
        t0 = time.perf_counter()
        for i, batch in enumerate(batch_iter(ds, cfg.total_batch, cfg.shards, cfg.seed, epoch)):
            rng = self.step_rng(epoch, i)
            if cfg.mode == "vanilla":
                m = vanilla_step(self.net, batch.x, batch.y, self.opt, lr, cfg.shards, self.ledger)
            elif cfg.mode == "advprop":
                m = advprop_step(self.net, batch.x, batch.y, self.opt, lr, cfg.attack, rng, cfg.shards, self.ledger)
            else:
                m = fast_advprop_step(self.net, batch.x, batch.y, self.opt, lr, cfg, rng, self.ledger)
            skipped += bool(m.get("skipped"))
            for k in acc:
                if m.get(k) is not None:
                    acc[k].append(m[k])
            self.ledger.next_step()
            self.global_step += 1
        val_acc = None
        if val is not None and len(val):
            try:
                val_acc = float((predict(self.net, val.images) == val.labels).mean())
            except NonFiniteError as exc:
                log.warning("epoch %d: validation skipped: %s", epoch, exc)
        rec = EpochRecord(self.run_id, epoch, self.global_step, lr, {k: _mean(v) for k, v in acc.items()},
                          val_acc, self.ledger.by_kind(), skipped, time.perf_counter() - t0)
        self.records.append(rec)
        self.epoch += 1
        log.info("%s epoch %d lr=%.4g clean_acc=%s adv_acc=%s val=%s", self.run_id, epoch, lr,
                 rec.train["clean_acc"], rec.train["adv_acc"], val_acc)
        return rec

    def fit(self, ds: Dataset, val: Dataset | None = None,
            on_epoch: Callable[["Trainer", EpochRecord], None] | None = None) -> list[EpochRecord]:
        while self.epoch < self.schedule.effective_epochs:
            rec = self.train_epoch(ds, val)
            if on_epoch is not None:
                on_epoch(self, rec)
        return self.records


# -- leakage -------------------------------------------------------------------

@dataclass
class LeakageReport:
    gaps: list[float]
    epochs: list[int]
    longest_positive_run: int
    window: int
    flagged: bool


def leakage_diagnostic(records: list[dict], window_fraction: float = 0.2) -> LeakageReport:
    """Gap (adversarial minus clean training accuracy) per epoch.

    The run is flagged when the longest stretch of consecutive epochs with a
    positive gap covers at least ``window_fraction`` of the logged epochs.
    """
    if not records:
        raise ValueError("no epoch records")
    gaps, epochs = [], []
    for r in records:
        adv, clean = r.get("train_adv_acc"), r.get("train_clean_acc")
        if adv is None or clean is None:
            raise ValueError(f"epoch {r.get('epoch')}: missing per-pass training accuracy")
        gaps.append(float(adv) - float(clean))
        epochs.append(int(r["epoch"]))
    window = max(1, math.ceil(window_fraction * len(gaps)))
    longest = run = 0
    for g in gaps:
        run = run + 1 if g > 0 else 0
        longest = max(longest, run)
    return LeakageReport(gaps, epochs, longest, window, longest >= window)
