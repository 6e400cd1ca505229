"""Datasets, client partitioning and poisoning transforms."""

from __future__ import annotations

import csv
import gzip
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise ShapeError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain non-finite values")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_count", int(self.class_count))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.class_count == other.class_count
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class Partition:
    assignments: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


@dataclass(frozen=True)
class TriggerSpec:
    pixel_indices: tuple[int, ...]
    trigger_value: float = 1.0
    target_label: int = 1

    def __post_init__(self):
        if not self.pixel_indices:
            raise ValueError("trigger needs at least one pixel")
        if not 0.0 <= self.trigger_value <= 1.0:
            raise ValueError("trigger_value must lie in [0, 1]")
        object.__setattr__(self, "pixel_indices", tuple(int(i) for i in self.pixel_indices))

    def check(self, dim: int, class_count: int) -> None:
        if min(self.pixel_indices) < 0 or max(self.pixel_indices) >= dim:
            raise ValueError(f"trigger pixels out of range for dimension {dim}")
        if not 0 <= self.target_label < class_count:
            raise ValueError(f"target label {self.target_label} out of range")

    def embed(self, features: np.ndarray) -> np.ndarray:
        out = np.array(features, dtype=np.float64)
        out[..., list(self.pixel_indices)] = self.trigger_value
        return out


def corner_trigger(dim: int, size: int = 3, value: float = 1.0, target_label: int = 1) -> TriggerSpec:
    """Square ``size`` x ``size`` block in the bottom-right corner of a square image.

    Non-square ``dim`` is treated as rows of width ``floor(sqrt(dim))``.
    """
    width = math.isqrt(dim)
    rows = dim // width
    if size > width or size > rows:
        raise ValueError(f"trigger of size {size} does not fit a {rows}x{width} image")
    pixels = [r * width + c for r in range(rows - size, rows) for c in range(width - size, width)]
    return TriggerSpec(tuple(pixels), value, target_label)


@dataclass(frozen=True)
class SubgroupBox:
    """Axis-aligned box ``lo <= x[dims] <= hi``; members get ``target_label``."""

    dims: tuple[int, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    target_label: int

    def __post_init__(self):
        if not (len(self.dims) == len(self.lo) == len(self.hi)) or not self.dims:
            raise ValueError("dims, lo and hi must be non-empty and of equal length")

    def contains(self, features: np.ndarray) -> np.ndarray:
        sel = features[:, list(self.dims)]
        return np.all((sel >= np.asarray(self.lo)) & (sel <= np.asarray(self.hi)), axis=1)


POISON_KINDS = ("backdoor_trigger", "label_flip", "subgroup_relabel", "none")


@dataclass(frozen=True)
class PoisonConfig:
    kind: str = "none"
    attack_rate: float = 0.0
    trigger: TriggerSpec | None = None
    flip_source: int | None = None
    flip_target: int | None = None
    subgroup: SubgroupBox | None = None

    def __post_init__(self):
        if self.kind not in POISON_KINDS:
            raise ValueError(f"unknown poison kind {self.kind!r}")
        if not 0.0 <= self.attack_rate <= 1.0:
            raise ValueError("attack_rate must lie in [0, 1]")
        if self.kind == "backdoor_trigger" and self.trigger is None:
            raise ValueError("backdoor_trigger poisoning needs a trigger")
        if self.kind == "label_flip" and (self.flip_source is None or self.flip_target is None):
            raise ValueError("label_flip needs flip_source and flip_target")
        if self.kind == "subgroup_relabel" and self.subgroup is None:
            raise ValueError("subgroup_relabel needs a subgroup box")


def synth_blobs(class_count: int, per_class: int, dim: int, spread: float, seed: int) -> LabeledDataset:
    """Gaussian clusters around random points of the unit sphere mapped into [0,1]^d.

    A class mean is ``(u + 1) / 2`` for a random unit vector ``u``; samples are
    ``mean + spread * N(0, I)`` clipped to [0, 1]. Rows are grouped by class.
    """
    if class_count < 2 or per_class < 1 or dim < 2:
        raise ValueError("need class_count >= 2, per_class >= 1, dim >= 2")
    if spread < 0:
        raise ValueError(f"spread must be non-negative, got {spread}")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((class_count, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    means = (u + 1.0) / 2.0
    labels = np.repeat(np.arange(class_count), per_class)
    noise = rng.standard_normal((class_count * per_class, dim))
    features = np.clip(means[labels] + spread * noise, 0.0, 1.0)
    return LabeledDataset(features, labels, class_count)


def train_test_split(data: LabeledDataset, test_per_class: int, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Hold out ``test_per_class`` random samples of every class."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(data.class_count):
        members = np.flatnonzero(data.labels == c)
        if members.size < test_per_class:
            raise ValueError(f"class {c} has only {members.size} samples")
        test_idx.append(rng.choice(members, size=test_per_class, replace=False))
    test = np.sort(np.concatenate(test_idx)) if test_idx else np.array([], dtype=np.int64)
    mask = np.ones(len(data), dtype=bool)
    mask[test] = False
    return data.subset(np.flatnonzero(mask)), data.subset(test)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: Path, magic: int, ndims: int) -> tuple[tuple[int, ...], bytes]:
    with _open(path) as fh:
        raw = fh.read()
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    payload = raw[header:]
    if len(payload) != math.prod(dims):
        raise FormatError(f"{path}: expected {math.prod(dims)} data bytes, found {len(payload)}")
    return dims, payload


def load_idx(images_path, labels_path, class_count: int | None = None) -> LabeledDataset:
    """Read an MNIST-style IDX image/label pair; pixels are scaled by 1/255."""
    (n_img, rows, cols), pixels = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise FormatError(f"{n_img} images but {n_lab} labels")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(n_img, rows * cols) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    if class_count is None:
        class_count = int(y.max()) + 1 if y.size else 1
    return LabeledDataset(x, y, class_count)


def write_csv(data: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(data.dim)])
        for label, row in zip(data.labels, data.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def read_csv(path, class_count: int | None = None) -> LabeledDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise FormatError(f"{path}: missing 'label,f0,...' header")
        rows = [r for r in reader if r]
    y = np.array([int(r[0]) for r in rows], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(len(rows), len(header) - 1)
    if class_count is None:
        class_count = int(y.max()) + 1 if y.size else 1
    return LabeledDataset(x, y, class_count)


def partition_iid(data: LabeledDataset, clients: int, seed: int) -> Partition:
    """Shuffle and cut into ``clients`` shards whose sizes differ by at most one."""
    if clients < 1:
        raise ValueError("need at least one client")
    if len(data) < clients:
        raise ValueError(f"{len(data)} samples cannot fill {clients} shards")
    order = np.random.default_rng(seed).permutation(len(data))
    # Larger shards last so that e.g. 101 / 10 gives nine of 10 then one of 11.
    base, extra = divmod(len(data), clients)
    sizes = [base] * (clients - extra) + [base + 1] * extra
    bounds = np.cumsum([0] + sizes)
    return Partition(tuple(tuple(int(i) for i in order[a:b]) for a, b in zip(bounds[:-1], bounds[1:])))


def partition_dirichlet(data: LabeledDataset, clients: int, alpha: float, seed: int) -> Partition:
    """Per-class Dirichlet(alpha) split of sample indices across clients.

    Every class is shuffled and cut according to its own draw of client
    proportions. An empty shard is filled by moving the last index of the
    currently largest shard (lowest client index on ties).
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if clients < 1:
        raise ValueError("need at least one client")
    if len(data) < clients:
        raise ValueError(f"{len(data)} samples cannot fill {clients} shards")
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(clients)]
    for c in range(data.class_count):
        members = np.flatnonzero(data.labels == c)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        props = rng.dirichlet(np.full(clients, float(alpha)))
        cuts = (np.cumsum(props)[:-1] * members.size).astype(np.int64)
        for shard, part in zip(shards, np.split(members, cuts)):
            shard.extend(int(i) for i in part)
    for i in range(clients):
        if not shards[i]:
            donor = max(range(clients), key=lambda j: (len(shards[j]), -j))
            shards[i].append(shards[donor].pop())
            log.debug("dirichlet partition: shard %d was empty, took one index from shard %d", i, donor)
    return Partition(tuple(tuple(s) for s in shards))


def poison_count(rate: float, n: int) -> int:
    # Tolerance keeps e.g. 0.29 * 100 = 28.999999999999996 from rounding down to 28.
    return min(n, int(math.floor(rate * n + 1e-9)))


def apply_poison(data: LabeledDataset, cfg: PoisonConfig, seed: int) -> LabeledDataset:
    """Return a poisoned copy of ``data``; the input is left untouched.

    Backdoor poisoning replaces ``floor(r * n)`` randomly chosen samples in
    place rather than appending duplicates.
    """
    x = np.array(data.features)
    y = np.array(data.labels)
    if cfg.kind == "none":
        return data
    if cfg.kind == "backdoor_trigger":
        trig = cfg.trigger
        trig.check(data.dim, data.class_count)
        count = poison_count(cfg.attack_rate, len(data))
        if count == 0:
            return data
        chosen = np.random.default_rng(seed).choice(len(data), size=count, replace=False)
        x[chosen] = trig.embed(x[chosen])
        y[chosen] = trig.target_label
    elif cfg.kind == "label_flip":
        y[data.labels == cfg.flip_source] = cfg.flip_target
    elif cfg.kind == "subgroup_relabel":
        box = cfg.subgroup
        y[box.contains(data.features)] = box.target_label
    return LabeledDataset(x, y, data.class_count)


def make_backdoor_testset(clean_test: LabeledDataset, trigger: TriggerSpec) -> LabeledDataset:
    """Triggered copies of every test sample not already of the target class.

    An all-target input yields an empty dataset and a warning.
    """
    trigger.check(clean_test.dim, clean_test.class_count)
    keep = clean_test.labels != trigger.target_label
    if not keep.any():
        log.warning("backdoor test set is empty: every sample already has the target label")
    x = trigger.embed(clean_test.features[keep])
    y = np.full(int(keep.sum()), trigger.target_label, dtype=np.int64)
    return LabeledDataset(x.reshape(-1, clean_test.dim), y, clean_test.class_count)


def class_proportions(data: LabeledDataset, partition: Partition) -> np.ndarray:
    """Row i holds the label histogram of shard i, normalised to sum to one."""
    out = np.zeros((len(partition), data.class_count))
    for i, idx in enumerate(partition.assignments):
        counts = np.bincount(data.labels[list(idx)], minlength=data.class_count)
        out[i] = counts / counts.sum()
    return out

