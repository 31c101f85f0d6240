"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Graph` is a tape: every primitive call evaluates eagerly, records a
node, and keeps whatever it needs for the backward sweep.  ``Graph.backward``
walks the tape once in reverse and only computes gradients along paths that
lead to the requested leaves, so asking for parameter and input gradients
together costs a single traversal and leaves the parameter gradients
bit-identical to a parameter-only request.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64


class GraphError(Exception):
    """Base class for graph construction and evaluation errors."""


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


class BackwardError(GraphError):
    pass


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def from_seed(cls, shape: Sequence[int], seed: int, scale: float = 1.0,
                  dtype=DEFAULT_DTYPE, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        # Drawn in float64 then cast so both precisions see the same underlying sample.
        rng = np.random.default_rng(seed)
        data = (rng.standard_normal(tuple(shape)) * scale).astype(dtype)
        return cls(data, requires_grad=requires_grad, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


# A backward rule receives the output gradient and a per-input "needed" mask
# and returns one gradient (or None) per input.
BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn | None
    name: str = ""

    @property
    def label(self) -> str:
        return f"#{self.id}:{self.op}" + (f"[{self.name}]" if self.name else "")


@dataclass
class Graph:
    """Tape of primitive operations evaluated in order."""

    check_finite: bool = True
    nodes: list[Node] = field(default_factory=list)
    backward_passes: int = 0
    loss: Tensor | None = None
    logits: Tensor | None = None

    # -- bookkeeping -----------------------------------------------------

    def _record(self, op: str, inputs: tuple[Tensor, ...], out: np.ndarray,
                backward: BackwardFn | None, name: str = "") -> Tensor:
        node_id = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite activation at node #{node_id}:{op}" + (f"[{name}]" if name else ""))
        t = Tensor(out, name=name or f"{op}{node_id}")
        self.nodes.append(Node(node_id, op, inputs, t, backward, name))
        return t

    def _shape_fail(self, op: str, name: str, msg: str) -> ShapeError:
        return ShapeError(f"node #{len(self.nodes)}:{op}" + (f"[{name}]" if name else "") + f": {msg}")

    def leaves(self) -> list[Tensor]:
        produced = {id(n.output) for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    # -- primitives ------------------------------------------------------

    def dense(self, x: Tensor, w: Tensor, b: Tensor | None = None, name: str = "") -> Tensor:
        """``x @ w.T + b`` for ``x`` of shape (N, in) and ``w`` of shape (out, in)."""
        if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
            raise self._shape_fail("dense", name, f"input {x.shape} incompatible with weight {w.shape}")
        if b is not None and b.shape != (w.shape[0],):
            raise self._shape_fail("dense", name, f"bias {b.shape} does not match {w.shape[0]} outputs")
        xd, wd = x.data, w.data
        out = xd @ wd.T
        if b is not None:
            out = out + b.data

        def backward(g, need):
            gx = g @ wd if need[0] else None
            gw = g.T @ xd if need[1] else None
            grads = [gx, gw]
            if b is not None:
                grads.append(g.sum(axis=0) if need[2] else None)
            return grads

        inputs = (x, w) if b is None else (x, w, b)
        return self._record("dense", inputs, out, backward, name)

    def conv2d(self, x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1, name: str = "") -> Tensor:
        """Stride-1 cross-correlation, NCHW input, (F, C, kh, kw) kernel, zero padding."""
        if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
            raise self._shape_fail("conv2d", name, f"input {x.shape} incompatible with kernel {w.shape}")
        n, c, h, wid = x.shape
        f, _, kh, kw = w.shape
        ho, wo = h + 2 * padding - kh + 1, wid + 2 * padding - kw + 1
        if ho < 1 or wo < 1:
            raise self._shape_fail("conv2d", name, f"kernel {kh}x{kw} larger than padded input {h}x{wid}")
        if b is not None and b.shape != (f,):
            raise self._shape_fail("conv2d", name, f"bias {b.shape} does not match {f} filters")
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        # (N, C, ho, wo, kh, kw) -> (N*ho*wo, C*kh*kw)
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        wmat = w.data.reshape(f, c * kh * kw)
        out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b.data[None, :, None, None]
        out = np.ascontiguousarray(out)

        def backward(g, need):
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
            gx = gw = gb = None
            if need[1]:
                gw = (g2.T @ cols).reshape(w.shape)
            if need[0]:
                dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding:padding + h, padding:padding + wid] if padding else gxp
                gx = np.ascontiguousarray(gx)
            if b is not None and need[2]:
                gb = g.sum(axis=(0, 2, 3))
            return [gx, gw] if b is None else [gx, gw, gb]

        inputs = (x, w) if b is None else (x, w, b)
        return self._record("conv2d", inputs, out, backward, name)

    def relu(self, x: Tensor, name: str = "") -> Tensor:
        mask = x.data > 0
        out = np.where(mask, x.data, 0).astype(x.dtype)
        return self._record("relu", (x,), out, lambda g, need: [g * mask], name)

    def add(self, a: Tensor, b: Tensor, name: str = "") -> Tensor:
        if a.shape != b.shape:
            raise self._shape_fail("add", name, f"operands {a.shape} and {b.shape} differ (no broadcasting)")
        return self._record("add", (a, b), a.data + b.data,
                            lambda g, need: [g if need[0] else None, g if need[1] else None], name)

    def scale(self, x: Tensor, c: float, name: str = "") -> Tensor:
        c = x.dtype.type(c)
        return self._record("scale", (x,), x.data * c, lambda g, need: [g * c], name)

    def flatten(self, x: Tensor, name: str = "") -> Tensor:
        shape = x.shape
        out = x.data.reshape(shape[0], -1)
        return self._record("flatten", (x,), out, lambda g, need: [g.reshape(shape)], name)

    def mean_pool(self, x: Tensor, k: int = 2, name: str = "") -> Tensor:
        """Non-overlapping k x k average pooling."""
        if x.data.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
            raise self._shape_fail("mean_pool", name, f"spatial dims of {x.shape} not divisible by {k}")
        n, c, h, w = x.shape
        inv = x.dtype.type(1.0 / (k * k))
        out = x.data.reshape(n, c, h // k, k, w // k, k).sum(axis=(3, 5)) * inv

        def backward(g, need):
            gx = np.broadcast_to((g * inv)[:, :, :, None, :, None], (n, c, h // k, k, w // k, k))
            return [np.ascontiguousarray(gx).reshape(n, c, h, w)]

        return self._record("mean_pool", (x,), out, backward, name)

    def batchnorm(self, x: Tensor, gamma: Tensor, beta: Tensor, eps: float,
                  running: tuple[np.ndarray, np.ndarray] | None = None,
                  shards: int = 1, name: str = "") -> tuple[Tensor, np.ndarray | None, np.ndarray | None]:
        """Per-channel normalization over (N, H, W) or (N,) for 2-D input.

        With ``running=None`` each of ``shards`` contiguous sub-batches is
        normalized by its own mean and (biased) variance, and the per-shard
        statistics are returned with shape (shards, C).  With ``running`` the
        given (mean, var) are treated as constants and ``None`` is returned
        for the statistics.
        """
        if x.data.ndim not in (2, 4):
            raise self._shape_fail("batchnorm", name, f"expected 2-D or 4-D input, got {x.shape}")
        c = x.shape[1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise self._shape_fail("batchnorm", name, f"affine params {gamma.shape} do not match {c} channels")
        dt = x.dtype.type
        xd = x.data if x.data.ndim == 4 else x.data[:, :, None, None]
        n = xd.shape[0]
        ga = gamma.data[None, :, None, None]
        be = beta.data[None, :, None, None]

        if running is not None:
            mean, var = running
            inv_std = (1.0 / np.sqrt(var.astype(x.dtype) + dt(eps))).astype(x.dtype)
            xhat = (xd - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
            out = (xhat * ga + be).reshape(x.shape)

            def backward_running(g, need):
                g4 = g.reshape(xd.shape)
                gx = (g4 * (ga * inv_std[None, :, None, None])).reshape(x.shape) if need[0] else None
                ggam = (g4 * xhat).sum(axis=(0, 2, 3)) if need[1] else None
                gbet = g4.sum(axis=(0, 2, 3)) if need[2] else None
                return [gx, ggam, gbet]

            return self._record("batchnorm", (x, gamma, beta), out, backward_running, name), None, None

        if n % shards:
            raise self._shape_fail("batchnorm", name, f"batch of {n} not divisible into {shards} shards")
        m = n // shards
        if m * xd.shape[2] * xd.shape[3] < 2:
            raise self._shape_fail("batchnorm", name, "batch statistics need at least 2 values per channel")
        xs = xd.reshape(shards, m, c, xd.shape[2], xd.shape[3])
        count = dt(m * xd.shape[2] * xd.shape[3])
        mu = xs.mean(axis=(1, 3, 4), keepdims=True)
        xc = xs - mu
        var = (xc * xc).mean(axis=(1, 3, 4), keepdims=True)
        inv_std = dt(1.0) / np.sqrt(var + dt(eps))
        xhat = xc * inv_std
        out = (xhat * ga[None] + be[None]).reshape(x.shape)

        def backward_batch(g, need):
            g5 = g.reshape(xs.shape)
            gx = ggam = gbet = None
            if need[0]:
                gh = g5 * ga[None]
                gx = (inv_std * (gh - gh.sum(axis=(1, 3, 4), keepdims=True) / count
                                 - xhat * (gh * xhat).sum(axis=(1, 3, 4), keepdims=True) / count)).reshape(x.shape)
            if need[1]:
                ggam = (g5 * xhat).sum(axis=(0, 1, 3, 4))
            if need[2]:
                gbet = g5.sum(axis=(0, 1, 3, 4))
            return [gx, ggam, gbet]

        t = self._record("batchnorm", (x, gamma, beta), out, backward_batch, name)
        return t, mu.reshape(shards, c), var.reshape(shards, c)

    def softmax_cross_entropy(self, logits: Tensor, labels: np.ndarray, name: str = "") -> Tensor:
        """Mean cross-entropy over the batch; stores softmax for backward."""
        labels = np.asarray(labels)
        if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
            raise self._shape_fail("softmax_cross_entropy", name,
                                   f"logits {logits.shape} incompatible with labels {labels.shape}")
        n = logits.shape[0]
        if n == 0:
            raise self._shape_fail("softmax_cross_entropy", name, "empty batch")
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - logsum
        rows = np.arange(n)
        loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)
        probs = np.exp(logp)

        def backward(g, need):
            d = probs.copy()
            d[rows, labels] -= 1
            return [d * (g / logits.dtype.type(n))]

        t = self._record("softmax_cross_entropy", (logits,), loss, backward, name)
        self.loss = t
        self.logits = logits
        return t

    # -- reverse sweep ---------------------------------------------------

    def backward(self, loss: Tensor | None = None, wrt: Iterable[Tensor] = (),
                 grad_output: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Populate ``.grad`` on every tensor in ``wrt`` with d(loss)/d(tensor).

        ``loss`` defaults to the graph's cross-entropy node.  A non-scalar
        output may be differentiated by passing ``grad_output`` (a
        vector-Jacobian product).  Returns a mapping ``id(tensor) -> gradient``;
        leaves the output does not depend on get a zero gradient.
        """
        loss = loss if loss is not None else self.loss
        if loss is None or not self.nodes:
            raise BackwardError("backward called before any forward evaluation")
        if grad_output is None and loss.data.size != 1:
            raise BackwardError(f"loss must be scalar, got shape {loss.shape}")
        if grad_output is not None and np.shape(grad_output) != loss.shape:
            raise BackwardError(f"grad_output {np.shape(grad_output)} does not match output {loss.shape}")
        wrt = list(wrt)
        produced = {id(n.output): n for n in self.nodes}
        if id(loss) not in produced:
            raise BackwardError("loss tensor was not produced by this graph")
        leaf_ids = {id(t) for t in self.leaves()}
        for t in wrt:
            if id(t) not in leaf_ids:
                raise BackwardError(f"{t!r} is not a leaf of this graph")

        targets = {id(t) for t in wrt}
        needs: dict[int, bool] = {}
        for n in self.nodes:
            needs[id(n.output)] = any(id(t) in targets or needs.get(id(t), False) for t in n.inputs)

        self.backward_passes += 1
        seed = np.ones_like(loss.data) if grad_output is None else np.asarray(grad_output, dtype=loss.dtype)
        grads: dict[int, np.ndarray] = {id(loss): seed}
        last = produced[id(loss)].id
        for n in reversed(self.nodes[: last + 1]):
            g = grads.get(id(n.output))
            if g is None or not needs[id(n.output)]:
                continue
            mask = [id(t) in targets or needs.get(id(t), False) for t in n.inputs]
            for t, gi, m in zip(n.inputs, n.backward(g, mask), mask):
                if not m or gi is None:
                    continue
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi

        out: dict[int, np.ndarray] = {}
        for t in wrt:
            g = grads.get(id(t))
            t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
            out[id(t)] = t.grad
        return out


def sgd_momentum_update(params: Sequence[Tensor], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
                        lr: float, momentum: float = 0.9, weight_decay: float | Sequence[float] = 0.0) -> None:
    """In-place heavy-ball step: ``v <- mu v + g + wd p``; ``p <- p - lr v``.

    All gradients are checked before anything is written, so a non-finite
    gradient leaves parameters and velocity untouched.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("params, grads and velocity must be aligned")
    wds = [weight_decay] * len(params) if np.isscalar(weight_decay) else list(weight_decay)
    for p, g, v in zip(params, grads, velocity):
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"gradient/velocity shape mismatch for {p!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {p!r}; step aborted")
    for p, g, v, wd in zip(params, grads, velocity, wds):
        dt = p.dtype.type
        v *= dt(momentum)
        v += g
        if wd:
            v += dt(wd) * p.data
        p.data -= dt(lr) * v
