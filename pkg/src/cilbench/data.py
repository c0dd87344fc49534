"""Dataset containers, task streams, replay memory, and OOD test subsets.

Feature datasets are plain (n, d) float64 matrices with integer labels.
The binary on-disk format is little-endian:

    magic "OCF1" | u32 version=1 | u32 n | u32 d
    n*d float32 features (row-major) | n int32 labels

CSV rows are ``d feature columns, one integer label column`` with no header.
A suite manifest is a JSON document naming the ID train/test files and a
list of OOD datasets, each tagged ``near`` or ``far``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream

__all__ = [
    "DataError",
    "FormatError",
    "DimensionMismatchError",
    "LabelOutOfRangeError",
    "NonFiniteFeatureError",
    "FeatureDataset",
    "Task",
    "TaskStream",
    "MemoryBuffer",
    "OodEntry",
    "OodSuite",
    "save_dataset",
    "load_dataset",
    "split_tasks",
    "features_by_class",
    "memory_rows",
    "rebalance_memory",
    "herding_select",
    "ood_subset",
    "load_suite_manifest",
]

_MAGIC = b"OCF1"
_VERSION = 1


class DataError(Exception):
    """Base class for dataset ingestion errors."""


class FormatError(DataError):
    """Malformed header, truncated payload, or unparsable text."""


class DimensionMismatchError(DataError):
    """Row width disagrees with the declared feature dimension."""


class LabelOutOfRangeError(DataError):
    """A label falls outside [0, n_classes)."""


class NonFiniteFeatureError(DataError):
    """A feature value is NaN or infinite."""


@dataclass(frozen=True)
class FeatureDataset:
    """Rows of feature vectors with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 0
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] == 0 or feats.shape[1] == 0:
            raise FormatError("features must be a nonempty (n, d) matrix")
        if labels.shape != (feats.shape[0],):
            raise DimensionMismatchError("labels must have one entry per row")
        if not np.all(np.isfinite(feats)):
            raise NonFiniteFeatureError("non-finite feature value")
        n_classes = self.n_classes
        if self.class_names is not None:
            n_classes = len(self.class_names)
        if n_classes <= 0:
            n_classes = int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= n_classes:
            raise LabelOutOfRangeError(
                f"labels must lie in [0, {n_classes})"
            )
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "n_classes", n_classes)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def rows_for_class(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def subset(self, idx) -> "FeatureDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureDataset(
            self.features[idx], self.labels[idx], self.n_classes, self.class_names
        )


@dataclass(frozen=True)
class Task:
    train: FeatureDataset
    test: FeatureDataset
    classes: tuple[int, ...]


@dataclass(frozen=True)
class TaskStream:
    """Ordered partition of classes into tasks with disjoint label sets."""

    tasks: tuple[Task, ...]
    step_size: int

    def __post_init__(self):
        seen: set[int] = set()
        for task in self.tasks:
            cls = set(task.classes)
            if cls & seen:
                raise DataError("task class sets must be pairwise disjoint")
            seen |= cls
            for part in (task.train, task.test):
                if not set(np.unique(part.labels)) <= cls:
                    raise DataError("task datasets may only contain task classes")

    @property
    def num_steps(self) -> int:
        return len(self.tasks)

    def classes_through(self, t: int) -> tuple[int, ...]:
        """Seen-class set after step t (1-based), in task order."""
        out: list[int] = []
        for task in self.tasks[:t]:
            out.extend(task.classes)
        return tuple(out)

    def test_through(self, t: int) -> FeatureDataset:
        """Union of the test sets of tasks 1..t."""
        feats = np.concatenate([task.test.features for task in self.tasks[:t]])
        labels = np.concatenate([task.test.labels for task in self.tasks[:t]])
        n_classes = self.tasks[0].train.n_classes
        return FeatureDataset(feats, labels, n_classes)


@dataclass
class MemoryBuffer:
    """Fixed-budget exemplar store; ``entries[c]`` indexes rows of class c
    within that class's training rows (see :func:`features_by_class`)."""

    budget: int
    entries: dict[int, list[int]] = field(default_factory=dict)

    def total(self) -> int:
        return sum(len(v) for v in self.entries.values())


@dataclass(frozen=True)
class OodEntry:
    name: str
    dataset: FeatureDataset
    tag: str  # "near" | "far"

    def __post_init__(self):
        if self.tag not in ("near", "far"):
            raise DataError(f"unknown OOD tag {self.tag!r}")


@dataclass(frozen=True)
class OodSuite:
    entries: tuple[OodEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DataError("OOD dataset names must be unique")


def save_dataset(ds: FeatureDataset, path) -> None:
    """Write the binary feature format (little-endian, float32 payload)."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, ds.n, ds.dim))
        fh.write(ds.features.astype("<f4").tobytes(order="C"))
        fh.write(ds.labels.astype("<i4").tobytes(order="C"))


def _load_binary(path: Path, n_classes: int) -> FeatureDataset:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise FormatError("file too short for header")
    if raw[:4] != _MAGIC:
        raise FormatError("bad magic, expected OCF1")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}")
    expect = 16 + 4 * n * d + 4 * n
    if len(raw) != expect:
        raise FormatError(f"payload size mismatch ({len(raw)} != {expect})")
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=16)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=16 + 4 * n * d)
    return FeatureDataset(
        feats.astype(np.float64).reshape(n, d), labels.astype(np.int64), n_classes
    )


def _load_csv(path: Path, n_classes: int) -> FeatureDataset:
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
                if width < 2:
                    raise FormatError("need at least one feature column")
            elif len(parts) != width:
                raise DimensionMismatchError(f"row {lineno} has {len(parts)} columns")
            try:
                rows.append([float(p) for p in parts[:-1]])
                labels.append(int(parts[-1]))
            except ValueError as exc:
                raise FormatError(f"row {lineno}: {exc}") from exc
    if not rows:
        raise FormatError("empty CSV file")
    return FeatureDataset(np.array(rows), np.array(labels), n_classes)


def load_dataset(path, fmt: str = "binary", n_classes: int = 0) -> FeatureDataset:
    """Load a dataset, validating all invariants.

    ``n_classes`` caps the label range when the caller knows the class
    count (labels >= n_classes raise :class:`LabelOutOfRangeError`).
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such file: {path}")
    if fmt == "binary":
        return _load_binary(path, n_classes)
    if fmt == "csv":
        return _load_csv(path, n_classes)
    raise ValueError(f"unknown format {fmt!r}")


def split_tasks(
    ds_train: FeatureDataset,
    ds_test: FeatureDataset,
    k: int,
    class_order=None,
) -> TaskStream:
    """Partition classes into ceil(K/k) tasks of k classes (last task takes
    the remainder).  ``class_order`` is an explicit permutation of class ids
    or an :class:`RngStream` used to shuffle them; identity when omitted."""
    K = ds_train.n_classes
    if k < 2:
        raise ValueError("step size k must be >= 2")
    if k > K:
        raise ValueError(f"step size {k} exceeds class count {K}")
    if class_order is None:
        order = np.arange(K)
    elif isinstance(class_order, RngStream):
        order = class_order.child("class-order").gen.permutation(K)
    else:
        order = np.asarray(class_order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(K)):
            raise ValueError("class_order must be a permutation of all classes")
    tasks = []
    for start in range(0, K, k):
        classes = tuple(int(c) for c in order[start : start + k])
        tr_idx = np.flatnonzero(np.isin(ds_train.labels, classes))
        te_idx = np.flatnonzero(np.isin(ds_test.labels, classes))
        tasks.append(
            Task(ds_train.subset(tr_idx), ds_test.subset(te_idx), classes)
        )
    return TaskStream(tuple(tasks), k)


def features_by_class(stream: TaskStream, t: int) -> dict[int, np.ndarray]:
    """Per-class training rows (original row order) for classes of tasks 1..t."""
    out: dict[int, np.ndarray] = {}
    for task in stream.tasks[:t]:
        for c in task.classes:
            rows = task.train.rows_for_class(c)
            out[c] = task.train.features[rows]
    return out


def memory_rows(
    mem: MemoryBuffer, feats_by_class: dict[int, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Materialize the exemplar store as (features, labels), class-ordered."""
    xs, ys = [], []
    for c in sorted(mem.entries):
        idx = mem.entries[c]
        if not idx:
            continue
        xs.append(feats_by_class[c][np.asarray(idx, dtype=np.int64)])
        ys.append(np.full(len(idx), c, dtype=np.int64))
    if not xs:
        d = next(iter(feats_by_class.values())).shape[1] if feats_by_class else 0
        return np.zeros((0, d)), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys)


def herding_select(class_features: np.ndarray, q: int) -> list[int]:
    """Greedy mean-matching selection.

    At step s the index minimizing ``||mu - mean(selected + {x})||_2`` is
    taken, with ties broken by lowest index; ``mu`` is the class mean.
    """
    feats = np.asarray(class_features, dtype=np.float64)
    n = feats.shape[0]
    if q <= 0:
        raise ValueError("q must be positive")
    if q > n:
        raise ValueError("q exceeds available rows")
    mu = feats.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros(feats.shape[1])
    taken = np.zeros(n, dtype=bool)
    for s in range(1, q + 1):
        dists = np.linalg.norm(mu - (running + feats) / s, axis=1)
        dists[taken] = np.inf
        i = int(np.argmin(dists))  # argmin returns the lowest tied index
        chosen.append(i)
        taken[i] = True
        running += feats[i]
    return chosen


def rebalance_memory(
    mem: MemoryBuffer,
    stream: TaskStream,
    t: int,
    feats_by_class: dict[int, np.ndarray],
    strategy: str = "herding",
    rng: RngStream | None = None,
) -> MemoryBuffer:
    """Rebuild the exemplar store after step t.

    Every class seen through step t gets quota ``q = budget // |Q_t|``:
    existing lists are truncated (herding keeps the first q in stored
    order; random takes a seeded subsample) and new classes are filled by
    the selection strategy.  Leftover budget slots stay unassigned.
    """
    if t < 1:
        raise ValueError("step index must be >= 1")
    if strategy not in ("herding", "random"):
        raise ValueError(f"unknown strategy {strategy!r}")
    seen = stream.classes_through(t)
    entries: dict[int, list[int]] = {}
    if mem.budget <= 0 or not seen:
        return MemoryBuffer(mem.budget, entries)
    q = mem.budget // len(seen)
    if q == 0:
        return MemoryBuffer(mem.budget, entries)
    for c in seen:
        feats = feats_by_class.get(c)
        if feats is None or feats.shape[0] == 0:
            raise DataError(f"class {c} has no training rows")
        quota = min(q, feats.shape[0])
        old = mem.entries.get(c)
        if old is not None:
            if len(old) <= quota:
                entries[c] = list(old)
            elif strategy == "herding":
                entries[c] = list(old[:quota])
            else:
                sub = rng.child(f"trunc{c}").gen.choice(
                    len(old), size=quota, replace=False
                )
                entries[c] = [old[i] for i in sorted(sub.tolist())]
        else:
            if strategy == "herding":
                entries[c] = herding_select(feats, quota)
            else:
                pick = rng.child(f"fill{c}").gen.choice(
                    feats.shape[0], size=quota, replace=False
                )
                entries[c] = sorted(int(i) for i in pick)
    return MemoryBuffer(mem.budget, entries)


def ood_subset(
    ood: FeatureDataset, t: int, total_steps: int, rng: RngStream
) -> FeatureDataset:
    """First floor(n * t / total_steps) rows of a fixed seeded permutation.

    The permutation depends only on the stream identity, so subsets are
    nested across t: subset(t) is a prefix of subset(t+1).
    """
    if not 1 <= t <= total_steps:
        raise ValueError("step index out of range")
    perm = rng.child("perm").gen.permutation(ood.n)
    take = (ood.n * t) // total_steps
    return ood.subset(perm[:take])


def load_suite_manifest(path) -> tuple[FeatureDataset, FeatureDataset, OodSuite]:
    """Read a suite manifest JSON; paths are resolved against its directory.

    Schema: {"n_classes": int?, "id_train": str, "id_test": str,
             "ood": [{"name": str, "path": str, "tag": "near"|"far"}]}
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    n_classes = int(doc.get("n_classes", 0))
    try:
        train = load_dataset(base / doc["id_train"], "binary", n_classes)
        test = load_dataset(base / doc["id_test"], "binary", n_classes)
        entries = tuple(
            OodEntry(e["name"], load_dataset(base / e["path"], "binary"), e["tag"])
            for e in doc["ood"]
        )
    except KeyError as exc:
        raise FormatError(f"manifest missing field {exc}") from exc
    return train, test, OodSuite(entries)
