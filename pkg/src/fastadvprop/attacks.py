"""l-inf FGSM / PGD attacks and the fused gradient-reuse attack pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Graph, NonFiniteError, Tensor
from .ledger import CostLedger
from .nn import Network, Route, StatsMode, backward_params, network_forward


@dataclass
class AttackConfig:
    epsilon: float = 1.0 / 255
    steps: int = 1
    random_init: bool = True
    targeted: bool | None = None  # None: the training mode picks (advprop targeted, fast untargeted)
    stats_mode: StatsMode = StatsMode.BATCH
    step_size: float | None = None
    clip_image: bool = False

    def __post_init__(self):
        self.stats_mode = StatsMode(self.stats_mode)
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        # One step is plain FGSM with a full-radius step.
        return self.epsilon if self.steps == 1 else 2.5 * self.epsilon / self.steps


def sample_init_noise(shape, epsilon: float, seed=None, dtype=np.float32) -> np.ndarray:
    """i.i.d. U(-eps, eps).  ``seed`` may be an int or a ``np.random.Generator``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.uniform(-epsilon, epsilon, size=tuple(shape)).astype(dtype)


def _sign(g: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite input gradient in attack step")
    return np.sign(g)


def fgsm_step(grad: np.ndarray, delta: np.ndarray, epsilon: float, step: float | None = None) -> np.ndarray:
    """``clip(delta + step * sign(grad), -eps, eps)``; step defaults to eps and sign(0) = 0."""
    if grad.shape != delta.shape:
        raise ValueError(f"gradient {grad.shape} and perturbation {delta.shape} differ")
    dt = delta.dtype.type
    step = epsilon if step is None else step
    return np.clip(delta + dt(step) * _sign(grad).astype(delta.dtype), dt(-epsilon), dt(epsilon))


def _maybe_clip_image(x: np.ndarray, delta: np.ndarray, clip_image: bool) -> np.ndarray:
    if not clip_image:
        return delta
    return np.clip(x + delta, 0, 1) - x


def perturb(x: np.ndarray, delta: np.ndarray, epsilon: float) -> np.ndarray:
    """``x + delta`` with rounding overshoot pulled back so ``|x_adv - x| <= eps`` holds exactly."""
    x_adv = x + delta
    over = np.abs(x_adv.astype(np.float64) - x) > epsilon
    while over.any():
        x_adv[over] = np.nextafter(x_adv[over], x[over])
        over = np.abs(x_adv.astype(np.float64) - x) > epsilon
    return x_adv


def _wrong_labels(y: np.ndarray, classes: int, rng: np.random.Generator) -> np.ndarray:
    return (y + rng.integers(1, classes, size=y.shape)) % classes


def pgd_attack(net: Network, x: np.ndarray, y: np.ndarray, config: AttackConfig, rng=None,
               route=Route.AUX, shards: int = 1, ledger: CostLedger | None = None) -> np.ndarray:
    """K-step sign-gradient attack inside the eps-box, evaluated on ``route``.

    Untargeted ascends the loss on ``y``; targeted descends it on a uniformly
    drawn wrong label per example.  No running statistics or parameters are
    written.  Each step costs ``len(x)`` pass-units.
    """
    if len(x) == 0:
        return x.copy()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    dtype = net.dtype
    x = np.asarray(x, dtype=dtype)
    eps = config.epsilon
    if config.random_init:
        delta = sample_init_noise(x.shape, eps, rng, dtype)
    else:
        delta = np.zeros_like(x)
    delta = _maybe_clip_image(x, delta, config.clip_image)
    target = _wrong_labels(y, net.classes, rng) if config.targeted else y
    sign = -1.0 if config.targeted else 1.0
    for _ in range(config.steps):
        d = Tensor(delta, requires_grad=True, name="delta")
        g = Graph()
        xin = g.add(Tensor(x, name="x"), d, name="x+delta")
        network_forward(net, xin, route, config.stats_mode, update_running=False, labels=target,
                        shards=shards, graph=g)
        g.backward(wrt=[d])
        delta = fgsm_step(sign * d.grad, delta, eps, config.alpha)
        delta = _maybe_clip_image(x, delta, config.clip_image)
        if ledger is not None:
            ledger.record_pass("attack", len(x))
    return perturb(x, delta, eps)


@dataclass
class ReuseResult:
    x_adv: np.ndarray
    grads: dict[str, np.ndarray]
    loss: float
    acc: float
    delta: np.ndarray


def attack_with_grad_reuse(net: Network, x: np.ndarray, y: np.ndarray, epsilon: float, seed=None,
                           shards: int = 1, random_init: bool = True, targeted: bool = False,
                           clip_image: bool = False, ledger: CostLedger | None = None) -> ReuseResult:
    """One forward/backward on ``x + delta`` (Aux, batch statistics) yielding both
    the input gradient for a one-step attack and the parameter gradient of the
    noise pass.  The pass updates Aux running statistics and costs ``len(x)``
    pass-units.
    """
    if targeted:
        raise ValueError("gradient reuse needs an untargeted attack (ascent on the true label)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = net.dtype
    x = np.asarray(x, dtype=dtype)
    if random_init:
        delta = sample_init_noise(x.shape, epsilon, rng, dtype)
    else:
        delta = np.zeros_like(x)
    delta = _maybe_clip_image(x, delta, clip_image)
    d = Tensor(delta, requires_grad=True, name="delta")
    g = Graph()
    xin = g.add(Tensor(x, name="x"), d, name="x+delta")
    network_forward(net, xin, Route.AUX, StatsMode.BATCH, update_running=True, labels=y, shards=shards, graph=g)
    param_grads = backward_params(g, net, extra=(d,))
    if ledger is not None:
        ledger.record_pass("attack+noise", len(x))
    new_delta = _maybe_clip_image(x, fgsm_step(d.grad, delta, epsilon), clip_image)
    acc = float((g.logits.data.argmax(axis=1) == y).mean())
    return ReuseResult(perturb(x, new_delta, epsilon), param_grads, float(g.loss.data), acc, new_delta)
