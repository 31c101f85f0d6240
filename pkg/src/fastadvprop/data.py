"""Datasets, IDX ingestion, synthetic fixtures, batching, and the corruption suite."""
from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from .nn import Network, decode_checkpoint, encode_checkpoint, predict

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError("labels out of range")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes, split or self.split)


# -- IDX -------------------------------------------------------------------

def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic {magic}, expected {expected_magic}")
    ndim = 3 if magic == IDX_IMAGE_MAGIC else 1
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataError(f"{path}: truncated file, expected {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, classes: int | None = None,
             split: str = "train") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); bytes are scaled to [0, 1]."""
    imgs = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC).astype(np.int64)
    if len(imgs) != len(labels):
        raise DataError(f"image count {len(imgs)} != label count {len(labels)}")
    images = (imgs.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    classes = classes if classes is not None else int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, classes, split)


def write_idx(images_path: str | Path, labels_path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write (N, H, W) or single-channel (N, 1, H, W) images and (N,) labels as an IDX pair.

    Float images are taken to be in [0, 1] and rounded to bytes.
    """
    images = np.asarray(images)
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise DataError("IDX images must be single-channel")
        images = images[:, 0]
    if np.issubdtype(images.dtype, np.floating):
        images = np.rint(np.clip(images, 0, 1) * 255)
    images = images.astype(np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def save_dataset(path: str | Path, ds: Dataset) -> None:
    records = [("images", "Data", ds.images), ("labels", "Data", ds.labels.astype(np.float32))]
    Path(path).write_bytes(encode_checkpoint(records, {"classes": ds.classes, "split": ds.split}, np.float32))


def load_dataset(path: str | Path) -> Dataset:
    records, meta, _ = decode_checkpoint(Path(path).read_bytes())
    arrays = {name: arr for name, _, arr in records}
    return Dataset(arrays["images"], arrays["labels"].astype(np.int64), meta["classes"], meta["split"])


# -- synthetic data ----------------------------------------------------------

def synth_blobs(n: int, classes: int = 10, shape=(1, 16, 16), separation: float = 1.0, seed: int = 0,
                nuisance: float = 0.12, pixel_noise: float = 0.03, smoothness: float = 2.0,
                split: str = "train", prototype_seed: int | None = None) -> Dataset:
    """Class-conditional Gaussian images clipped to [0, 1].

    Each class mean is ``0.5 + 0.25 * separation * P_c`` for a smooth,
    unit-variance random prototype ``P_c``; the shared covariance is a smooth
    nuisance field plus white pixel noise.  ``prototype_seed`` fixes the class
    means independently of the sample draw so train/test splits agree.
    """
    if n < classes:
        raise DataError(f"need at least one example per class ({n} < {classes})")
    c, h, w = shape
    proto_rng = np.random.default_rng(seed if prototype_seed is None else prototype_seed)
    protos = gaussian_filter(proto_rng.standard_normal((classes, c, h, w)), sigma=(0, 0, smoothness, smoothness))
    protos /= protos.reshape(classes, -1).std(axis=1)[:, None, None, None]

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    labels = np.concatenate([np.arange(classes), rng.integers(0, classes, n - classes)])
    rng.shuffle(labels)
    field = gaussian_filter(rng.standard_normal((n, c, h, w)), sigma=(0, 0, smoothness, smoothness))
    field /= max(field.std(), 1e-12)
    x = 0.5 + 0.25 * separation * protos[labels] + nuisance * field + pixel_noise * rng.standard_normal((n, c, h, w))
    return Dataset(np.clip(x, 0, 1).astype(np.float32), labels.astype(np.int64), classes, split)


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    shard: np.ndarray  # shard index per example, contiguous equal blocks
    index: np.ndarray  # dataset indices


def epoch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, 0xBA7C])


def batch_iter(ds: Dataset, total_batch: int, shards: int = 1, seed: int = 0, epoch: int = 0,
               drop_last: bool = True) -> Iterator[Batch]:
    """Seed-deterministic shuffled batches; each batch is ``shards`` equal contiguous blocks."""
    if total_batch < 1 or shards < 1 or total_batch % shards:
        raise DataError(f"batch size {total_batch} not divisible into {shards} shards")
    order = np.random.default_rng(epoch_seed(seed, epoch)).permutation(len(ds))
    stop = len(ds) - len(ds) % total_batch if drop_last else len(ds)
    for i in range(0, stop, total_batch):
        idx = order[i:i + total_batch]
        if len(idx) % shards:
            continue
        shard = np.repeat(np.arange(shards), len(idx) // shards)
        yield Batch(ds.images[idx], ds.labels[idx], shard, idx)


def batches_per_epoch(n: int, total_batch: int) -> int:
    return n // total_batch


# -- corruptions -------------------------------------------------------------

CORRUPTION_TYPES = ("gaussian-noise", "impulse-noise", "gaussian-blur", "contrast", "brightness")

# Severity 1..3 magnitudes; index 0 is the identity.
SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian-noise": (0.0, 0.04, 0.08, 0.12),   # additive N(0, s^2)
    "impulse-noise": (0.0, 0.03, 0.06, 0.10),    # salt-and-pepper fraction
    "gaussian-blur": (0.0, 0.6, 1.0, 1.5),       # blur sigma in pixels
    "contrast": (1.0, 0.6, 0.4, 0.25),           # contrast retained about the image mean
    "brightness": (0.0, 0.15, 0.3, 0.45),        # additive shift
}


@dataclass(frozen=True)
class CorruptionSpec:
    type: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.type not in SEVERITY_TABLE:
            raise DataError(f"unknown corruption type {self.type!r}")
        if not 0 <= self.severity < len(SEVERITY_TABLE[self.type]):
            raise DataError(f"severity {self.severity} out of range for {self.type}")


def corrupt(images: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption to an image (C, H, W) or a batch (N, C, H, W)."""
    x = np.asarray(images, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    level = SEVERITY_TABLE[spec.type][spec.severity]
    if spec.severity == 0:
        out = x.copy()
    else:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, CORRUPTION_TYPES.index(spec.type), spec.severity]))
        if spec.type == "gaussian-noise":
            out = x + level * rng.standard_normal(x.shape)
        elif spec.type == "impulse-noise":
            u = rng.random(x.shape)
            out = x.copy()
            out[u < level / 2] = 0.0
            out[(u >= level / 2) & (u < level)] = 1.0
        elif spec.type == "gaussian-blur":
            out = gaussian_filter(x, sigma=(0, 0, level, level), mode="nearest")
        elif spec.type == "contrast":
            mean = x.mean(axis=(1, 2, 3), keepdims=True)
            out = (x - mean) * level + mean
        else:
            out = x + level
    out = np.clip(out, 0, 1).astype(np.float32)
    return out[0] if single else out


def default_suite(seed: int = 0, severities=(1, 2, 3)) -> list[CorruptionSpec]:
    return [CorruptionSpec(t, s, seed) for t in CORRUPTION_TYPES for s in severities]


def corruption_suite_eval(net: Network, ds: Dataset, specs: list[CorruptionSpec] | None = None,
                          reference_errors: dict | None = None) -> dict:
    """Top-1 error for every (type, severity), per-type means, and the normalized score.

    ``reference_errors`` maps type -> mean-over-severity error (or the
    ``per_type`` block of another result).  The score is the mean over types
    of error / reference error, times 100; lower is better.
    """
    specs = specs if specs is not None else default_suite()
    per_spec: dict[str, float] = {}
    by_type: dict[str, list[float]] = {}
    for spec in specs:
        err = float((predict(net, corrupt(ds.images, spec)) != ds.labels).mean())
        per_spec[f"{spec.type}/{spec.severity}"] = err
        by_type.setdefault(spec.type, []).append(err)
    per_type = {t: float(np.mean(v)) for t, v in by_type.items()}
    mean_error = float(np.mean(list(per_type.values())))
    result = {"per_spec": per_spec, "per_type": per_type, "mean_error": mean_error,
              "mean_accuracy": 1.0 - mean_error, "score": None}
    if reference_errors is None:
        log.warning("no reference errors supplied; reporting unnormalized mean corruption error")
        return result
    result["score"] = normalized_score(per_type, reference_errors)
    return result


def normalized_score(per_type: dict[str, float], reference: dict[str, float]) -> float:
    ratios = []
    for t, err in per_type.items():
        ref = reference[t]
        if ref <= 0:
            raise DataError(f"reference error for {t} is zero; cannot normalize")
        ratios.append(err / ref)
    return 100.0 * float(np.mean(ratios))
