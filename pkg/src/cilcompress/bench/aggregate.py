"""Mean and population standard deviation of ACC/BWT over seeds, from persisted run directories."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

from ..metrics import AccuracyMatrix, UndefinedMetricError, compute_acc, compute_bwt

GROUP_KEYS = ("method", "framework", "dataset")
COLUMNS = ("method", "framework", "dataset", "tag", "n_seeds", "seeds", "acc_mean", "acc_std", "bwt_mean",
           "bwt_std", "params", "flops")
STD_NOTE = "std is the population standard deviation over seeds (ddof=0), omitted for a single seed"


class GroupingError(ValueError):
    pass


@dataclass
class RunSummary:
    path: str
    method: str
    framework: str
    dataset: str
    tag: str
    seed: int
    acc: float
    bwt: float | None
    params: int | None
    flops: int | None

    def key(self, fields) -> tuple:
        return tuple(str(getattr(self, f)) for f in fields)


@dataclass
class GroupStats:
    key: dict
    seeds: list[int]
    acc_mean: float
    acc_std: float | None
    bwt_mean: float | None
    bwt_std: float | None
    params: int | None
    flops: int | None

    def row(self) -> dict:
        return {
            "method": self.key.get("method", ""), "framework": self.key.get("framework", ""),
            "dataset": self.key.get("dataset", ""), "tag": self.key.get("tag", ""),
            "n_seeds": len(self.seeds), "seeds": " ".join(map(str, self.seeds)),
            "acc_mean": self.acc_mean, "acc_std": self.acc_std, "bwt_mean": self.bwt_mean,
            "bwt_std": self.bwt_std, "params": self.params, "flops": self.flops,
        }


def _mean_std(values: list[float]) -> tuple[float, float | None]:
    vals = sorted(values)  # summation order independent of directory order
    mean = math.fsum(vals) / len(vals)
    if len(vals) < 2:
        return mean, None
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))


def read_run(path: str | Path) -> RunSummary:
    p = Path(path)
    try:
        record = json.loads((p / "run.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{p}: no run.json (not a run directory)") from None
    if record.get("status") != "completed":
        raise ValueError(f"{p}: run status is {record.get('status')!r}")
    s = record["summary"]
    matrix = AccuracyMatrix.from_csv((p / "matrix.csv").read_text(), s["num_tasks"])
    try:
        bwt = compute_bwt(matrix)
    except UndefinedMetricError:
        bwt = None
    cost = record.get("cost", {}).get("inference", {})
    return RunSummary(str(p), s["method"], s["framework"], s["dataset"], s.get("tag", ""), record["seed"],
                      compute_acc(matrix), bwt, cost.get("params"), cost.get("flops"))


def aggregate(paths, group_by: tuple[str, ...] | None = None) -> list[GroupStats]:
    """One GroupStats per group; without ``group_by`` all runs must share one (method, framework, dataset)."""
    runs = sorted((read_run(p) for p in paths), key=lambda r: (r.key(GROUP_KEYS + ("tag",)), r.seed, r.path))
    if not runs:
        raise ValueError("no run directories given")
    if group_by is None:
        keys = {r.key(GROUP_KEYS) for r in runs}
        if len(keys) > 1:
            raise GroupingError(
                f"runs span {len(keys)} (method, framework, dataset) groups; pass --group-by to aggregate them"
            )
        group_by = GROUP_KEYS
    bad = [f for f in group_by if f not in RunSummary.__dataclass_fields__]
    if bad:
        raise GroupingError(f"unknown grouping fields: {', '.join(bad)}")
    groups: dict[tuple, list[RunSummary]] = {}
    for r in runs:
        groups.setdefault(r.key(group_by), []).append(r)
    out = []
    for key in sorted(groups):
        members = groups[key]
        acc_mean, acc_std = _mean_std([r.acc for r in members])
        bwts = [r.bwt for r in members if r.bwt is not None]
        bwt_mean, bwt_std = _mean_std(bwts) if bwts else (None, None)
        params = {r.params for r in members}
        flops = {r.flops for r in members}
        out.append(GroupStats(
            dict(zip(group_by, key)), sorted(r.seed for r in members), acc_mean, acc_std, bwt_mean, bwt_std,
            params.pop() if len(params) == 1 else None, flops.pop() if len(flops) == 1 else None,
        ))
    return out


def _fmt(v, digits=4) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def to_csv(stats: list[GroupStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for g in stats:
        row = g.row()
        w.writerow([_fmt(row[c], 6) for c in COLUMNS])
    return buf.getvalue()


def to_text(stats: list[GroupStats]) -> str:
    header = ["method", "framework", "dataset", "tag", "seeds", "ACC", "BWT", "params(M)", "GFLOPs"]
    rows = []
    for g in stats:
        r = g.row()

        def pm(mean, std):
            if mean is None:
                return "-"
            return f"{100 * mean:.2f}" + ("" if std is None else f" ± {100 * std:.2f}")

        rows.append([r["method"], r["framework"], r["dataset"], r["tag"] or "-", str(r["n_seeds"]),
                     pm(r["acc_mean"], r["acc_std"]), pm(r["bwt_mean"], r["bwt_std"]),
                     "-" if r["params"] is None else f"{r['params'] / 1e6:.3f}",
                     "-" if r["flops"] is None else f"{r['flops'] / 1e9:.4f}"])
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header, *rows]]
    return "\n".join(lines) + f"\n# ACC/BWT in percent; {STD_NOTE}\n"
