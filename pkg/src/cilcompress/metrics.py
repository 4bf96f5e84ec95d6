"""Class-incremental bookkeeping: class sets, task descriptors and the accuracy matrix.

Accuracies are kept as ``(correct, total)`` integer pairs and only turned into
fractions when a metric is read, so ACC/BWT can be checked exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator


class MetricError(Exception):
    """Base class for accuracy-matrix errors."""


class MatrixIndexError(MetricError, IndexError):
    pass


class ImmutableEntryError(MetricError):
    pass


class MissingDataError(MetricError):
    pass


class UndefinedMetricError(MetricError):
    pass


@dataclass(frozen=True)
class ClassSet:
    ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate class ids in {ids}")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[int]:
        return iter(self.ids)

    def __contains__(self, item) -> bool:
        return item in self.ids

    def isdisjoint(self, other: Iterable[int]) -> bool:
        return set(self.ids).isdisjoint(other)

    def to_list(self) -> list[int]:
        return list(self.ids)


@dataclass(frozen=True)
class TaskDescriptor:
    index: int
    classes: ClassSet
    sample_count: int

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("task index starts at 1")
        if self.sample_count <= 0:
            raise ValueError(f"task {self.index} has no samples")


class AccuracyMatrix:
    """Write-once lower-triangular table of a_{i,t} as correct/total counts.

    ``after_task`` is the task index i just trained, ``on_task`` the evaluated
    task t, with ``1 <= t <= i <= num_tasks``.
    """

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        self.num_tasks = num_tasks
        self._entries: dict[tuple[int, int], tuple[int, int]] = {}

    def record(self, after_task: int, on_task: int, correct: int, total: int) -> "AccuracyMatrix":
        if not 1 <= on_task <= after_task <= self.num_tasks:
            raise MatrixIndexError(
                f"entry ({after_task},{on_task}) outside 1 <= on_task <= after_task <= {self.num_tasks}"
            )
        if total <= 0 or not 0 <= correct <= total:
            raise ValueError(f"invalid count {correct}/{total}")
        key = (after_task, on_task)
        if key in self._entries:
            raise ImmutableEntryError(f"a_{{{after_task},{on_task}}} already recorded")
        self._entries[key] = (int(correct), int(total))
        return self

    def counts(self, after_task: int, on_task: int) -> tuple[int, int]:
        try:
            return self._entries[(after_task, on_task)]
        except KeyError:
            raise MissingDataError(f"a_{{{after_task},{on_task}}} not recorded") from None

    def exact(self, after_task: int, on_task: int) -> Fraction:
        c, n = self.counts(after_task, on_task)
        return Fraction(c, n)

    def get(self, after_task: int, on_task: int) -> float:
        c, n = self.counts(after_task, on_task)
        return c / n

    def __contains__(self, key) -> bool:
        return tuple(key) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self) -> list[tuple[int, int]]:
        return sorted(self._entries)

    def last_complete_row(self) -> int:
        """Largest i with a_{i,1..i} all present (0 if none)."""
        done = 0
        for i in range(1, self.num_tasks + 1):
            if all((i, t) in self._entries for t in range(1, i + 1)):
                done = i
            else:
                break
        return done

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task", "on_task", "correct", "total"])
        for (i, t) in self.keys():
            c, n = self._entries[(i, t)]
            w.writerow([i, t, c, n])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, num_tasks: int | None = None) -> "AccuracyMatrix":
        rows = list(csv.DictReader(io.StringIO(text)))
        if num_tasks is None:
            num_tasks = max((int(r["after_task"]) for r in rows), default=1)
        m = cls(num_tasks)
        for r in rows:
            m.record(int(r["after_task"]), int(r["on_task"]), int(r["correct"]), int(r["total"]))
        return m

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, AccuracyMatrix)
            and self.num_tasks == other.num_tasks
            and self._entries == other._entries
        )

    def __repr__(self) -> str:
        return f"AccuracyMatrix(num_tasks={self.num_tasks}, entries={len(self._entries)})"


def record_accuracy(matrix: AccuracyMatrix, after_task: int, on_task: int, value) -> AccuracyMatrix:
    """Record one accuracy; ``value`` is a ``(correct, total)`` pair or a fraction.

    Plain floats are converted to the closest fraction with denominator <= 10**6.
    """
    if isinstance(value, tuple):
        correct, total = value
    else:
        frac = Fraction(value).limit_denominator(10**6)
        if not 0 <= frac <= 1:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        correct, total = frac.numerator, frac.denominator
    return matrix.record(after_task, on_task, correct, total)


def _final_task(matrix: AccuracyMatrix) -> int:
    return matrix.num_tasks


def compute_acc_exact(matrix: AccuracyMatrix) -> Fraction:
    T = _final_task(matrix)
    return sum((matrix.exact(T, t) for t in range(1, T + 1)), Fraction(0)) / T


def compute_acc(matrix: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks after the final task."""
    return float(compute_acc_exact(matrix))


def compute_bwt_exact(matrix: AccuracyMatrix) -> Fraction:
    T = _final_task(matrix)
    if T < 2:
        raise UndefinedMetricError("BWT needs at least two tasks")
    total = sum((matrix.exact(T, t) - matrix.exact(t, t) for t in range(1, T)), Fraction(0))
    return total / (T - 1)


def compute_bwt(matrix: AccuracyMatrix) -> float:
    """Backward transfer; negative values mean forgetting."""
    return float(compute_bwt_exact(matrix))


def taskwise_forgetting_exact(matrix: AccuracyMatrix, t: int) -> Fraction:
    T = _final_task(matrix)
    if not 1 <= t < T:
        raise UndefinedMetricError(f"forgetting undefined for task {t} of {T}")
    return matrix.exact(T, t) - matrix.exact(t, t)


def taskwise_forgetting(matrix: AccuracyMatrix, t: int) -> float:
    return float(taskwise_forgetting_exact(matrix, t))


def acc_after_task(matrix: AccuracyMatrix, i: int) -> float:
    """Running ACC after task i: mean of a_{i,1..i}."""
    return float(sum((matrix.exact(i, t) for t in range(1, i + 1)), Fraction(0)) / i)
