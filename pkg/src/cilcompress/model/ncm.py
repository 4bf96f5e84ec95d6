"""Nearest-class-mean classification over exemplar features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class MissingExemplarError(ValueError):
    pass


class DegenerateMeanError(ValueError):
    pass


@dataclass
class ClassMeans:
    classes: np.ndarray  # sorted class ids
    means: np.ndarray  # (num_classes, dim), unit rows

    def __len__(self) -> int:
        return len(self.classes)


def _normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def class_means_from_features(features_by_class: dict[int, np.ndarray], eps: float = 1e-12) -> ClassMeans:
    classes = sorted(features_by_class)
    rows = []
    for c in classes:
        feats = np.asarray(features_by_class[c], dtype=np.float64)
        if feats.size == 0:
            raise MissingExemplarError(f"class {c} has no exemplars")
        mean = _normalize(feats).mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < eps:
            raise DegenerateMeanError(f"class {c}: normalized features average to zero")
        rows.append(mean / norm)
    return ClassMeans(np.asarray(classes, dtype=np.int64), np.stack(rows))


def compute_class_means(
    feature_fn: Callable[[np.ndarray], np.ndarray], memory, seen_classes=None
) -> ClassMeans:
    """Per-class normalized mean of normalized exemplar features.

    ``feature_fn`` maps a batch of inputs to penultimate features.
    """
    if seen_classes is not None:
        missing = sorted(set(seen_classes) - set(memory.per_class))
        if missing:
            raise MissingExemplarError(f"no exemplars for classes {missing}")
    feats = {}
    for c, ds in memory.per_class.items():
        if len(ds) == 0:
            raise MissingExemplarError(f"class {c} has no exemplars")
        feats[c] = feature_fn(ds.x)
    return class_means_from_features(feats)


def ncm_predict(features, means: ClassMeans) -> np.ndarray:
    """Class of the nearest mean to each normalized feature; ties go to the lowest id."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if feats.shape[1] != means.means.shape[1]:
        raise ValueError(f"feature dim {feats.shape[1]} != mean dim {means.means.shape[1]}")
    f = _normalize(feats)
    d2 = ((f[:, None, :] - means.means[None, :, :]) ** 2).sum(axis=-1)
    # classes are sorted, so argmin's first-index rule is the lowest-id tie-break
    return means.classes[np.argmin(d2, axis=1)]
