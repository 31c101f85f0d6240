"""Layers, the dual batch-norm routing scheme, and the checkpoint container."""
from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autograd import DEFAULT_DTYPE, Graph, ShapeError, Tensor


class Route(str, enum.Enum):
    MAIN = "main"
    AUX = "aux"


class StatsMode(str, enum.Enum):
    BATCH = "batch"
    RUNNING = "running"


class ParamRole(str, enum.Enum):
    SHARED = "Shared"
    MAIN_BN = "MainBN"
    AUX_BN = "AuxBN"


@dataclass
class BatchNormState:
    """Affine parameters plus running statistics for one BN branch."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, channels: int, name: str, momentum: float = 0.1, eps: float = 1e-5,
             dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(
            scale=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.scale"),
            shift=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.shift"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.running_mean.dtype.type(self.momentum)
        one = self.running_mean.dtype.type(1.0)
        # Shard statistics are averaged, as a synchronized multi-device BN would.
        self.running_mean[...] = (one - m) * self.running_mean + m * batch_mean.mean(axis=0)
        self.running_var[...] = np.maximum((one - m) * self.running_var + m * batch_var.mean(axis=0), 0)


def batchnorm_forward(graph: Graph, x: Tensor, state: BatchNormState, stats_mode: StatsMode | str,
                      update_running: bool, shards: int = 1, name: str = "") -> Tensor:
    """Normalize ``x`` with ``state`` inside ``graph``.

    Batch mode uses mini-batch statistics (per shard); Running mode uses the
    stored ones.  Running statistics are written only when ``update_running``
    is set and batch statistics were computed.
    """
    stats_mode = StatsMode(stats_mode)
    if x.shape[1] != state.channels:
        raise ShapeError(f"{name or 'batchnorm'}: {x.shape[1]} channels, state has {state.channels}")
    if stats_mode is StatsMode.BATCH:
        if x.shape[0] // max(shards, 1) < 2:
            raise ValueError(f"{name or 'batchnorm'}: batch statistics need at least 2 examples per shard")
        out, mean, var = graph.batchnorm(x, state.scale, state.shift, state.eps, shards=shards, name=name)
        if update_running:
            state.update(mean, var)
        return out
    # Running mode never writes: there is no batch statistic to fold in.
    out, _, _ = graph.batchnorm(x, state.scale, state.shift, state.eps,
                                running=(state.running_mean, state.running_var), name=name)
    return out


class DualBatchNorm:
    """Two independent BN branches; each call routes through exactly one."""

    def __init__(self, channels: int, name: str, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.name = name
        self.main = BatchNormState.init(channels, f"{name}.main", momentum, eps, dtype)
        self.aux = BatchNormState.init(channels, f"{name}.aux", momentum, eps, dtype)

    def branch(self, route: Route | str) -> BatchNormState:
        return self.main if Route(route) is Route.MAIN else self.aux

    def __call__(self, graph: Graph, x: Tensor, route, stats_mode, update_running: bool, shards: int = 1) -> Tensor:
        route = Route(route)
        return batchnorm_forward(graph, x, self.branch(route), stats_mode, update_running,
                                 shards=shards, name=f"{self.name}.{route.value}")


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, name: str, rng: np.random.Generator,
                 bias: bool = False, dtype=DEFAULT_DTYPE):
        self.name = name
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias") if bias else None
        self.padding = k // 2

    def params(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias

    def __call__(self, graph: Graph, x: Tensor, **_) -> Tensor:
        return graph.conv2d(x, self.weight, self.bias, padding=self.padding, name=self.name)


class Dense:
    def __init__(self, fin: int, fout: int, name: str, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.name = name
        bound = 1.0 / np.sqrt(fin)
        self.weight = Tensor(rng.uniform(-bound, bound, (fout, fin)).astype(dtype), requires_grad=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def params(self):
        yield self.weight
        yield self.bias

    def __call__(self, graph: Graph, x: Tensor, **_) -> Tensor:
        return graph.dense(x, self.weight, self.bias, name=self.name)


class ReLU:
    name = "relu"

    def params(self):
        return iter(())

    def __call__(self, graph: Graph, x: Tensor, **_) -> Tensor:
        return graph.relu(x)


class MeanPool:
    name = "pool"

    def __init__(self, k: int = 2):
        self.k = k

    def params(self):
        return iter(())

    def __call__(self, graph: Graph, x: Tensor, **_) -> Tensor:
        return graph.mean_pool(x, self.k)


class Flatten:
    name = "flatten"

    def params(self):
        return iter(())

    def __call__(self, graph: Graph, x: Tensor, **_) -> Tensor:
        return graph.flatten(x)


@dataclass
class Network:
    layers: list
    in_shape: tuple[int, int, int]
    classes: int
    arch: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def bn_layers(self) -> list[DualBatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, DualBatchNorm)]

    def named_parameters(self) -> Iterator[tuple[str, Tensor, ParamRole]]:
        for layer in self.layers:
            if isinstance(layer, DualBatchNorm):
                for state, role in ((layer.main, ParamRole.MAIN_BN), (layer.aux, ParamRole.AUX_BN)):
                    yield state.scale.name, state.scale, role
                    yield state.shift.name, state.shift, role
            else:
                for p in layer.params():
                    yield p.name, p, ParamRole.SHARED

    def parameters(self) -> Iterator[Tensor]:
        for _, p, _ in self.named_parameters():
            yield p

    def running_stats(self) -> Iterator[tuple[str, np.ndarray]]:
        for layer in self.bn_layers():
            for branch in ("main", "aux"):
                st = getattr(layer, branch)
                yield f"{layer.name}.{branch}.running_mean", st.running_mean
                yield f"{layer.name}.{branch}.running_var", st.running_var

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p, _ in self.named_parameters()}
        out.update(dict(self.running_stats()))
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.state_arrays().items():
            v[...] = snap[k]

    def astype(self, dtype) -> "Network":
        """Deep copy in another precision (used for 64-bit verification)."""
        clone = build_reference_cnn(**self.arch, dtype=dtype)
        for k, v in clone.state_arrays().items():
            v[...] = self.state_arrays()[k].astype(dtype)
        return clone


def param_roles(net: Network) -> dict[str, ParamRole]:
    return {name: role for name, _, role in net.named_parameters()}


def network_forward(net: Network, x: Tensor, route=Route.MAIN, stats_mode=StatsMode.BATCH,
                    update_running: bool = False, labels: np.ndarray | None = None,
                    shards: int = 1, graph: Graph | None = None) -> Graph:
    """Evaluate ``net`` on ``x`` with every dual-BN layer on one branch.

    The returned graph carries ``logits`` and, when ``labels`` are given, the
    mean cross-entropy ``loss``.
    """
    graph = graph if graph is not None else Graph()
    h = x
    for layer in net.layers:
        if isinstance(layer, DualBatchNorm):
            h = layer(graph, h, route, stats_mode, update_running, shards=shards)
        else:
            h = layer(graph, h)
    graph.logits = h
    if labels is not None:
        graph.softmax_cross_entropy(h, labels, name="loss")
    return graph


def backward_params(graph: Graph, net: Network, extra: tuple[Tensor, ...] = ()) -> dict[str, np.ndarray]:
    """One backward sweep for every parameter the pass touched plus ``extra`` leaves.

    Parameters of the unused BN branch are absent from the result.
    """
    leaf_ids = {id(t) for t in graph.leaves()}
    named = [(name, p) for name, p, _ in net.named_parameters() if id(p) in leaf_ids]
    grads = graph.backward(wrt=[p for _, p in named] + list(extra))
    return {name: grads[id(p)] for name, p in named}


def predict(net: Network, x: np.ndarray, batch: int = 500) -> np.ndarray:
    """Inference: Main branch, running statistics."""
    preds = []
    for i in range(0, len(x), batch):
        xb = Tensor(np.ascontiguousarray(x[i:i + batch], dtype=net.dtype))
        g = network_forward(net, xb, Route.MAIN, StatsMode.RUNNING, update_running=False)
        preds.append(g.logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def build_reference_cnn(in_shape=(1, 16, 16), classes: int = 10, widths=(8, 16), seed: int = 0,
                        dual_bn: bool = True, bn_momentum: float = 0.1, bn_eps: float = 1e-5,
                        dtype=DEFAULT_DTYPE) -> Network:
    """conv3x3 -> dual-BN -> relu -> pool, twice, then a dense head."""
    rng = np.random.default_rng(seed)
    c, h, w = in_shape
    layers: list = []
    cin = c
    for i, width in enumerate(widths):
        layers.append(Conv2d(cin, width, 3, f"conv{i}", rng, dtype=dtype))
        if dual_bn:
            layers.append(DualBatchNorm(width, f"bn{i}", bn_momentum, bn_eps, dtype=dtype))
        layers += [ReLU(), MeanPool(2)]
        cin, h, w = width, h // 2, w // 2
    layers += [Flatten(), Dense(cin * h * w, classes, "fc", rng, dtype=dtype)]
    arch = dict(in_shape=tuple(in_shape), classes=classes, widths=tuple(widths), seed=seed,
                dual_bn=dual_bn, bn_momentum=bn_momentum, bn_eps=bn_eps)
    return Network(layers, tuple(in_shape), classes, arch)


# -- checkpoint container ----------------------------------------------------

CHECKPOINT_MAGIC = b"FAPCKPT\0"
CHECKPOINT_VERSION = 1
_PRECISION_TAGS = {np.dtype(np.float32): b"f4", np.dtype(np.float64): b"f8"}


class CheckpointError(Exception):
    pass


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack(">I", len(b)) + b


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _unpack_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack(">I", _read_exact(buf, 4))
    return _read_exact(buf, n).decode()


def encode_checkpoint(records: list[tuple[str, str, np.ndarray]], meta: dict, dtype) -> bytes:
    """Header (magic, version, precision, count, JSON meta) then (name, role, shape, raw) records."""
    tag = _PRECISION_TAGS[np.dtype(dtype)]
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack(">I", CHECKPOINT_VERSION))
    out.write(tag)
    out.write(struct.pack(">I", len(records)))
    out.write(_pack_str(json.dumps(meta, sort_keys=True)))
    for name, role, arr in records:
        arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder(">"))
        out.write(_pack_str(name))
        out.write(_pack_str(role))
        out.write(struct.pack(">I", arr.ndim))
        out.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def decode_checkpoint(data: bytes) -> tuple[list[tuple[str, str, np.ndarray]], dict, np.dtype]:
    buf = io.BytesIO(data)
    if _read_exact(buf, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack(">I", _read_exact(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    tag = _read_exact(buf, 2)
    dtype = {v: k for k, v in _PRECISION_TAGS.items()}.get(tag)
    if dtype is None:
        raise CheckpointError(f"unknown precision tag {tag!r}")
    (count,) = struct.unpack(">I", _read_exact(buf, 4))
    meta = json.loads(_unpack_str(buf))
    records = []
    for _ in range(count):
        name = _unpack_str(buf)
        role = _unpack_str(buf)
        (ndim,) = struct.unpack(">I", _read_exact(buf, 4))
        shape = struct.unpack(f">{ndim}I", _read_exact(buf, 4 * ndim)) if ndim else ()
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(_read_exact(buf, nbytes), dtype=dtype.newbyteorder(">")).astype(dtype).reshape(shape)
        records.append((name, role, arr))
    return records, meta, dtype


def save_checkpoint(path: str | Path, net: Network, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write parameters, running statistics and any ``extra`` arrays (e.g. optimizer velocity)."""
    records = [(name, role.value, p.data) for name, p, role in net.named_parameters()]
    records += [(name, "RunningStat", arr) for name, arr in net.running_stats()]
    records += [(name, "Extra", arr) for name, arr in (extra or {}).items()]
    meta = dict(meta or {})
    meta["arch"] = {k: list(v) if isinstance(v, tuple) else v for k, v in net.arch.items()}
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(records, meta, net.dtype))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[Network, dict[str, np.ndarray], dict]:
    records, meta, dtype = decode_checkpoint(Path(path).read_bytes())
    arch = dict(meta["arch"])
    arch["in_shape"] = tuple(arch["in_shape"])
    arch["widths"] = tuple(arch["widths"])
    net = build_reference_cnn(**arch, dtype=dtype)
    state = net.state_arrays()
    extra = {}
    for name, role, arr in records:
        if role == "Extra":
            extra[name] = arr
        elif name in state:
            if state[name].shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {state[name].shape}")
            state[name][...] = arr
        else:
            raise CheckpointError(f"unexpected record {name!r}")
    return net, extra, meta
