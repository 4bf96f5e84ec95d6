"""Task streams, exemplar memory and dataset loading.

Inside a :class:`TaskStream` every label is a *head index*: the position of the
class in the seeded class order.  Task t therefore owns a contiguous block of
head indices, and the classifier head grows by appending rows.  The original
dataset class ids are kept in ``TaskStream.class_order`` and in each
``TaskDescriptor``.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .metrics import ClassSet, TaskDescriptor


class ConfigurationError(ValueError):
    pass


class ExemplarBudgetWarning(UserWarning):
    """Requested more exemplars than the class has samples."""


@dataclass
class LabeledExample:
    input: np.ndarray
    label: int
    source_index: int


@dataclass
class ArrayDataset:
    """Images as float32 NCHW plus integer labels and stable origin indices."""

    x: np.ndarray
    y: np.ndarray
    index: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.index = np.asarray(self.index, dtype=np.int64)
        if not (len(self.x) == len(self.y) == len(self.index)):
            raise ValueError("x, y and index lengths differ")

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(self.x[i], int(self.y[i]), int(self.index[i]))

    def take(self, sel) -> "ArrayDataset":
        return ArrayDataset(self.x[sel], self.y[sel], self.index[sel])

    def where_labels(self, labels) -> "ArrayDataset":
        return self.take(np.isin(self.y, np.asarray(list(labels))))

    @property
    def classes(self) -> list[int]:
        return sorted(np.unique(self.y).tolist())

    @staticmethod
    def concat(parts: Sequence["ArrayDataset"]) -> "ArrayDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return ArrayDataset(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.index for p in parts]),
        )


@dataclass
class DatasetSplits:
    train: ArrayDataset
    test: ArrayDataset
    name: str = "dataset"
    channel_mean: tuple[float, ...] = ()
    channel_std: tuple[float, ...] = ()

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.train.classes) | set(self.test.classes))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train.x.shape[1:])


# ---------------------------------------------------------------------------
# Loading and synthetic data
# ---------------------------------------------------------------------------


def standardize(splits: DatasetSplits) -> DatasetSplits:
    """Per-channel standardization with statistics from the train split."""
    mean = splits.train.x.mean(axis=(0, 2, 3), dtype=np.float64)
    std = splits.train.x.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std > 0, std, 1.0)

    def norm(ds: ArrayDataset) -> ArrayDataset:
        x = (ds.x - mean[None, :, None, None]) / std[None, :, None, None]
        return ArrayDataset(x.astype(np.float32), ds.y, ds.index)

    return DatasetSplits(
        norm(splits.train),
        norm(splits.test),
        splits.name,
        tuple(round(float(v), 6) for v in mean),
        tuple(round(float(v), 6) for v in std),
    )


def _to_unit_nchw(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    scale = 255.0 if x.dtype == np.uint8 else 1.0
    x = x.astype(np.float32) / scale
    if x.ndim == 3:
        x = x[..., None]
    # HWC on disk -> CHW in memory
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def load_npz(path: str | Path) -> DatasetSplits:
    """Arrays ``x_train, y_train, x_test, y_test`` with NHWC images."""
    with np.load(path) as f:
        xtr, ytr = _to_unit_nchw(f["x_train"]), f["y_train"]
        xte, yte = _to_unit_nchw(f["x_test"]), f["y_test"]
    train = ArrayDataset(xtr, ytr, np.arange(len(ytr)))
    test = ArrayDataset(xte, yte, np.arange(len(ytr), len(ytr) + len(yte)))
    return standardize(DatasetSplits(train, test, Path(path).stem))


def read_manifest(path: str | Path) -> list[tuple[str, int, str]]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            split = rec["split"].strip()
            if split not in ("train", "test"):
                raise ConfigurationError(f"unknown split {split!r} in {path}")
            rows.append((rec["path_or_index"].strip(), int(rec["label"]), split))
    return rows


def write_manifest(path: str | Path, rows: Sequence[tuple[str, int, str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_or_index", "label", "split"])
        w.writerows(rows)


def load_manifest(path: str | Path, arrays: str | Path | None = None) -> DatasetSplits:
    """Load a ``path_or_index,label,split`` manifest.

    Entries are image paths relative to the manifest, or integer indices into
    the ``x`` array of ``arrays`` (an .npz file) when given.
    """
    from PIL import Image

    path = Path(path)
    rows = read_manifest(path)
    pool = None
    if arrays is not None:
        with np.load(arrays) as f:
            pool = np.asarray(f["x"])
    imgs, labels, splits = [], [], []
    for ref, label, split in rows:
        if pool is not None:
            img = pool[int(ref)]
        else:
            img = np.asarray(Image.open(path.parent / ref).convert("RGB"))
        imgs.append(img)
        labels.append(label)
        splits.append(split)
    x = _to_unit_nchw(np.stack(imgs))
    y = np.asarray(labels)
    is_train = np.asarray(splits) == "train"
    idx = np.arange(len(y))
    train = ArrayDataset(x[is_train], y[is_train], idx[is_train])
    test = ArrayDataset(x[~is_train], y[~is_train], idx[~is_train])
    return standardize(DatasetSplits(train, test, path.stem))


def _smooth_noise(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    raw = rng.standard_normal((n, k + 2, k + 2))
    # 3x3 box blur keeps the parts spatially coherent
    out = sum(raw[:, i : i + k, j : j + k] for i in range(3) for j in range(3)) / 9.0
    out -= out.mean(axis=(1, 2), keepdims=True)
    out /= np.abs(out).max(axis=(1, 2), keepdims=True) + 1e-8
    return out


def make_synthetic(
    num_classes: int = 20,
    train_per_class: int = 200,
    test_per_class: int = 50,
    image_size: int = 16,
    channels: int = 3,
    seed: int = 0,
    num_parts: int = 24,
    part_size: int = 5,
    parts_per_class: int = 3,
    noise: float = 0.35,
    jitter: int = 2,
) -> DatasetSplits:
    """Procedural image classes composed from a shared bank of colored parts.

    Classes reuse parts from one bank, so features learned on a subset of the
    classes transfer to the others (what proxy pretraining relies on).
    """
    rng = np.random.default_rng(seed)
    shapes = _smooth_noise(rng, num_parts, part_size)
    colors = rng.uniform(-1.0, 1.0, size=(num_parts, channels))
    bank = shapes[:, None, :, :] * colors[:, :, None, None]  # P, C, k, k

    lo, hi = jitter, image_size - part_size - jitter
    class_parts = np.stack([rng.choice(num_parts, parts_per_class, replace=False) for _ in range(num_classes)])
    class_pos = rng.integers(lo, hi + 1, size=(num_classes, parts_per_class, 2))

    def render(n_per_class: int) -> tuple[np.ndarray, np.ndarray]:
        n = n_per_class * num_classes
        labels = np.repeat(np.arange(num_classes), n_per_class)
        canvas = np.zeros((n, channels, image_size, image_size))
        for j in range(parts_per_class):
            part_ids = class_parts[labels, j]
            pos = class_pos[labels, j] + rng.integers(-jitter, jitter + 1, size=(n, 2))
            amp = rng.uniform(0.6, 1.4, size=n)
            for s in range(n):
                r, c = pos[s]
                canvas[s, :, r : r + part_size, c : c + part_size] += amp[s] * bank[part_ids[s]]
        # one random distractor part per image
        d_ids = rng.integers(0, num_parts, size=n)
        d_pos = rng.integers(0, image_size - part_size + 1, size=(n, 2))
        d_amp = rng.uniform(0.3, 0.8, size=n)
        for s in range(n):
            r, c = d_pos[s]
            canvas[s, :, r : r + part_size, c : c + part_size] += d_amp[s] * bank[d_ids[s]]
        canvas += noise * rng.standard_normal(canvas.shape)
        pix = np.clip(0.5 + 0.25 * canvas, 0.0, 1.0).astype(np.float32)
        return pix, labels

    xtr, ytr = render(train_per_class)
    xte, yte = render(test_per_class)
    train = ArrayDataset(xtr, ytr, np.arange(len(ytr)))
    test = ArrayDataset(xte, yte, np.arange(len(ytr), len(ytr) + len(yte)))
    return standardize(DatasetSplits(train, test, f"synthetic{num_classes}"))


# ---------------------------------------------------------------------------
# Pretrain / CIL class split
# ---------------------------------------------------------------------------


@dataclass
class PretrainSplit:
    pretrain: DatasetSplits | None
    cil: DatasetSplits
    pretrain_classes: list[int]
    cil_classes: list[int]


def make_pretrain_split(splits: DatasetSplits, heldout_fraction: float, seed: int) -> PretrainSplit:
    """Hold out a class-disjoint subset for proxy pretraining."""
    if not 0.0 <= heldout_fraction < 1.0:
        raise ConfigurationError(f"heldout_fraction {heldout_fraction} outside [0, 1)")
    classes = np.asarray(splits.classes)
    n_hold = int(math.floor(heldout_fraction * len(classes) + 1e-9))
    perm = np.random.default_rng(seed).permutation(classes)
    pre = sorted(perm[:n_hold].tolist())
    cil = sorted(perm[n_hold:].tolist())
    if set(pre) & set(cil):
        raise RuntimeError("pretrain and CIL class sets overlap")
    if not cil:
        raise ConfigurationError("no classes left for CIL")

    def sub(classes_):
        return DatasetSplits(
            splits.train.where_labels(classes_),
            splits.test.where_labels(classes_),
            splits.name,
            splits.channel_mean,
            splits.channel_std,
        )

    return PretrainSplit(sub(pre) if pre else None, sub(cil), pre, cil)


# ---------------------------------------------------------------------------
# Task streams
# ---------------------------------------------------------------------------


@dataclass
class TaskData:
    descriptor: TaskDescriptor
    train: ArrayDataset
    test: ArrayDataset
    labels: ClassSet  # head indices


@dataclass
class TaskStream:
    tasks: list[TaskData]
    class_order: list[int]
    access_hook: Callable[[str, int], None] | None = field(default=None, repr=False)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def _touch(self, kind: str, t: int) -> None:
        if not 1 <= t <= self.num_tasks:
            raise IndexError(f"task {t} outside 1..{self.num_tasks}")
        if self.access_hook is not None:
            self.access_hook(kind, t)

    def train_split(self, t: int) -> ArrayDataset:
        self._touch("train", t)
        return self.tasks[t - 1].train

    def test_split(self, t: int) -> ArrayDataset:
        self._touch("test", t)
        return self.tasks[t - 1].test

    def labels(self, t: int) -> ClassSet:
        return self.tasks[t - 1].labels

    def descriptor(self, t: int) -> TaskDescriptor:
        return self.tasks[t - 1].descriptor

    def seen_labels(self, t: int) -> list[int]:
        """Head indices of every class in tasks 1..t."""
        return [c for k in range(1, t + 1) for c in self.labels(k)]

    def summary(self) -> dict:
        return {
            "class_order": list(self.class_order),
            "tasks": [
                {
                    "index": td.descriptor.index,
                    "classes": td.descriptor.classes.to_list(),
                    "train_count": len(td.train),
                    "test_count": len(td.test),
                }
                for td in self.tasks
            ],
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def task_sizes(num_classes: int, num_tasks: int) -> list[int]:
    if num_tasks < 1:
        raise ConfigurationError("num_tasks must be >= 1")
    if num_classes < num_tasks:
        raise ConfigurationError(f"{num_classes} classes cannot fill {num_tasks} tasks")
    per = math.ceil(num_classes / num_tasks)
    last = num_classes - per * (num_tasks - 1)
    if last < 1:
        raise ConfigurationError(
            f"{num_classes} classes over {num_tasks} tasks leaves the last task empty "
            f"with {per} classes per task"
        )
    return [per] * (num_tasks - 1) + [last]


def split_classes(splits: DatasetSplits, num_tasks: int, seed: int) -> TaskStream:
    """Seeded class shuffle cut into contiguous task groups."""
    classes = splits.classes
    sizes = task_sizes(len(classes), num_tasks)
    order = np.random.default_rng(seed).permutation(np.asarray(classes)).tolist()
    head_of = {c: i for i, c in enumerate(order)}
    lut = np.full(max(classes) + 1, -1, dtype=np.int64)
    for c, h in head_of.items():
        lut[c] = h

    def relabel(ds: ArrayDataset) -> ArrayDataset:
        return ArrayDataset(ds.x, lut[ds.y], ds.index)

    tasks, start = [], 0
    for t, size in enumerate(sizes, start=1):
        group = order[start : start + size]
        heads = list(range(start, start + size))
        tr = relabel(splits.train.where_labels(group))
        te = relabel(splits.test.where_labels(group))
        desc = TaskDescriptor(t, ClassSet(tuple(group)), len(tr))
        tasks.append(TaskData(desc, tr, te, ClassSet(tuple(heads))))
        start += size
    return TaskStream(tasks, order)


# ---------------------------------------------------------------------------
# Exemplar memory
# ---------------------------------------------------------------------------


def scale_buffer(base_size: int, base_train_count: int, train_count: int) -> int:
    if min(base_size, base_train_count, train_count) <= 0:
        raise ValueError("buffer scaling inputs must be positive")
    # half-up rounding; Python's round() is half-even
    return int(math.floor(base_size * train_count / base_train_count + 0.5))


def select_exemplars(features, budget_per_class: int, source_index=None) -> np.ndarray:
    """Indices of the samples closest to the feature mean, nearest first.

    Ties are broken by ascending ``source_index`` (defaults to position).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ValueError("features must be a nonempty 2-D array")
    if budget_per_class < 1:
        raise ValueError("budget_per_class must be >= 1")
    src = np.arange(len(feats)) if source_index is None else np.asarray(source_index)
    if budget_per_class > len(feats):
        warnings.warn(
            f"budget {budget_per_class} exceeds population {len(feats)}; returning all",
            ExemplarBudgetWarning,
            stacklevel=2,
        )
    dist = np.sqrt(((feats - feats.mean(axis=0)) ** 2).sum(axis=1))
    order = np.lexsort((src, dist))
    return order[:budget_per_class]


def l2_normalize(feats: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    return feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), eps)


@dataclass
class ExemplarMemory:
    budget: int
    per_class: dict[int, ArrayDataset] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class)

    def as_dataset(self) -> ArrayDataset | None:
        if not self.per_class:
            return None
        return ArrayDataset.concat([self.per_class[c] for c in self.classes])

    def check(self) -> None:
        if len(self) > self.budget:
            raise AssertionError(f"memory holds {len(self)} > budget {self.budget}")
        for c, ds in self.per_class.items():
            if len(ds) and not np.all(ds.y == c):
                raise AssertionError(f"class {c} holds foreign labels")


def update_memory(
    memory: ExemplarMemory,
    feature_fn: Callable[[np.ndarray], np.ndarray],
    new_data: ArrayDataset,
    new_classes: Sequence[int],
) -> ExemplarMemory:
    """Rebalance to an equal per-class quota and insert exemplars of new classes.

    Existing classes keep their lowest-rank exemplars; new classes are ranked by
    distance to the mean of their l2-normalized features.
    """
    new_classes = list(new_classes)
    overlap = set(new_classes) & set(memory.per_class)
    if overlap:
        raise ConfigurationError(f"classes {sorted(overlap)} already in memory")
    seen = len(memory.per_class) + len(new_classes)
    quota = memory.budget // seen if seen else 0
    if quota < 1:
        raise ConfigurationError(f"budget {memory.budget} cannot hold one exemplar for {seen} classes")
    out = {c: ds.take(slice(0, quota)) for c, ds in memory.per_class.items()}
    for c in new_classes:
        ds = new_data.take(new_data.y == c)
        if len(ds) == 0:
            raise ConfigurationError(f"no training samples for class {c}")
        feats = l2_normalize(feature_fn(ds.x))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExemplarBudgetWarning)
            keep = select_exemplars(feats, quota, ds.index)
        out[c] = ds.take(keep)
    mem = ExemplarMemory(memory.budget, out)
    mem.check()
    return mem
