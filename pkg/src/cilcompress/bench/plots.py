"""Plot files derived only from persisted run artifacts.

Each plot ``<kind>.png`` is written next to ``<kind>.csv`` holding the exact
plotted series.  Missing matrix entries are annotated on the figure.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..metrics import AccuracyMatrix, acc_after_task, compute_acc, taskwise_forgetting  # noqa: E402

KINDS = ("acc-vs-task", "forgetting-bars", "acc-flops-scatter")


def _load(run_dir: Path) -> tuple[str, AccuracyMatrix, dict]:
    record = json.loads((run_dir / "run.json").read_text())
    summary = record.get("summary", {})
    text = (run_dir / "matrix.csv").read_text() if (run_dir / "matrix.csv").exists() else ""
    num_tasks = summary.get("num_tasks")
    if num_tasks is None:
        snap = (run_dir / "config.snapshot").read_text()
        num_tasks = int(next(l.split("=")[1] for l in snap.splitlines() if l.startswith("num_tasks ")))
    m = AccuracyMatrix.from_csv(text, num_tasks) if text else AccuracyMatrix(num_tasks)
    label = summary.get("tag") or "{}/{}".format(summary.get("method", "?"), summary.get("framework", "?"))
    label = f"{label} s{record.get('seed', '?')}"
    return label, m, record


def _missing(m: AccuracyMatrix) -> list[tuple[int, int]]:
    return [(i, t) for i in range(1, m.num_tasks + 1) for t in range(1, i + 1) if (i, t) not in m]


def series(kind: str, run_dirs) -> tuple[list[dict], list[str]]:
    """Rows of plotted points plus missing-data notes, in run-label order."""
    runs = sorted((_load(Path(d)) for d in run_dirs), key=lambda r: r[0])
    rows, notes = [], []
    for label, m, record in runs:
        missing = _missing(m)
        if missing:
            notes.append(f"{label}: missing " + ", ".join(f"a[{i},{t}]" for i, t in missing[:6])
                         + (" ..." if len(missing) > 6 else ""))
        gaps = {i for i, _ in missing}
        if kind == "acc-vs-task":
            for i in range(1, m.num_tasks + 1):
                if i not in gaps:
                    rows.append({"run": label, "x": i, "y": acc_after_task(m, i)})
        elif kind == "forgetting-bars":
            T = m.num_tasks
            for t in range(1, T):
                if (T, t) in m and (t, t) in m:
                    rows.append({"run": label, "x": t, "y": taskwise_forgetting(m, t)})
        elif kind == "acc-flops-scatter":
            cost = record.get("cost", {}).get("inference")
            if _final_row_complete(m) and cost:
                rows.append({"run": label, "x": cost["flops"] / 1e9, "y": compute_acc(m)})
            else:
                notes.append(f"{label}: no final ACC or cost report")
        else:
            raise ValueError(f"unknown plot kind {kind!r}; expected one of {KINDS}")
    return rows, notes


def _final_row_complete(m: AccuracyMatrix) -> bool:
    return all((m.num_tasks, t) in m for t in range(1, m.num_tasks + 1))


def emit_plot(kind: str, run_dirs, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``<kind>.png`` and ``<kind>.csv`` into ``out_dir``."""
    rows, notes = series(kind, run_dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["run", "x", "y"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"run": r["run"], "x": r["x"], "y": f"{r['y']:.6f}"})
    csv_path = out / f"{kind}.csv"
    csv_path.write_text(buf.getvalue())

    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    labels = list(dict.fromkeys(r["run"] for r in rows))
    if kind == "acc-vs-task":
        for lab in labels:
            pts = [r for r in rows if r["run"] == lab]
            ax.plot([p["x"] for p in pts], [100 * p["y"] for p in pts], marker="o", label=lab)
        ax.set_xlabel("task")
        ax.set_ylabel("ACC after task (%)")
    elif kind == "forgetting-bars":
        width = 0.8 / max(len(labels), 1)
        for k, lab in enumerate(labels):
            pts = [r for r in rows if r["run"] == lab]
            ax.bar([p["x"] + k * width for p in pts], [100 * p["y"] for p in pts], width, label=lab)
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_xlabel("task")
        ax.set_ylabel("forgetting a[T,t] - a[t,t] (%)")
    else:
        for r in rows:
            ax.scatter(r["x"], 100 * r["y"], label=r["run"])
        ax.set_xlabel("GFLOPs")
        ax.set_ylabel("final ACC (%)")
    if labels:
        ax.legend(fontsize=7)
    if notes:
        ax.text(0.01, 0.01, "MISSING DATA\n" + "\n".join(notes), transform=ax.transAxes, fontsize=6,
                color="red", va="bottom")
    ax.set_title(kind)
    fig.tight_layout()
    png = out / f"{kind}.png"
    fig.savefig(png, format="png", metadata={"Software": None})
    plt.close(fig)
    return png, csv_path
