"""Acceptance criteria, each at its stated tolerance.

Every test records one ``CRITERION <n> PASS|FAIL: ...`` line; the lines are
printed in an "acceptance criteria" section at the end of the pytest run.  Criteria 7 and 8 run the desk-scale experiments below and
take several minutes on one CPU core.
"""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from cilcompress import config
from cilcompress.bench.runner import run_experiment
from cilcompress.metrics import (
    AccuracyMatrix,
    ImmutableEntryError,
    compute_acc_exact,
    compute_bwt_exact,
    taskwise_forgetting_exact,
)
from cilcompress.model import build_model, cost_report
from cilcompress.model.graph import BNScaleView
from cilcompress.pruning import global_prune_mask, prune_model, zero_masked

from conftest import ACCEPTANCE_LINES, tiny_config
from test_losses import composite_cases, fd_grad, rel_err, instance, PREV, CUR
from test_pruning import randomize

SEEDS = (0, 1, 2, 3, 4)

# 20 synthetic classes: 10 held out for proxy pretraining, 10 split into 5 CIL tasks.
DESK = {
    "num_tasks": 5,
    "dataset.num_classes": 20,
    "dataset.pretrain_fraction": 0.5,
    "dataset.train_per_class": 100,
    "dataset.test_per_class": 50,
    "optim.epochs": 10,
    "optim.batch_size": 32,
    "pretrain.epochs": 15,
    "student.arch": "toycnn",
    "student.width": 1.0,
    "teacher.arch": "toycnn",
    "teacher.width": 2.0,
    "checkpoints": False,
}


def report(n, ok, detail):
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def desk_run(tmp_path_factory, cache, **over):
    cfg = config.from_flat({**DESK, **over})
    out = tmp_path_factory.mktemp(f"{over.get('method')}-{over.get('framework')}-s{cfg.seed}")
    rec = run_experiment(cfg, out, cache_dir=cache)
    assert rec.status == "completed", rec.error
    return rec, out


@pytest.fixture(scope="module")
def cache(tmp_path_factory):
    return tmp_path_factory.mktemp("pretrain-cache")


# -- 1 ----------------------------------------------------------------------------------


def test_c1_cost_calibration():
    mb = cost_report(build_model("mobilenetv2", 100, (3, 32, 32)))
    rn = cost_report(build_model("resnet34", 100, (3, 32, 32)))
    checks = [
        abs(mb.flops / 1e9 - 0.013) <= 0.10 * 0.013,
        abs(mb.params / 1e6 - 2.30) <= 0.05 * 2.30,
        abs(rn.flops / 1e9 - 2.32) <= 0.10 * 2.32,
        abs(rn.params / 1e6 - 21.28) <= 0.02 * 21.28,
    ]
    ok = report(1, all(checks), f"mobilenetv2 {mb.flops / 1e9:.4f} GFLOPs {mb.params / 1e6:.3f} M; "
                                f"resnet34 {rn.flops / 1e9:.4f} GFLOPs {rn.params / 1e6:.3f} M")
    assert ok


# -- 2 ----------------------------------------------------------------------------------


def test_c2_zero_masked_surgery_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    for k, arch in enumerate(("resnet34", "mobilenetv2", "toycnn")):
        shape = (3, 16, 16) if arch == "toycnn" else (3, 32, 32)
        for j, ratio in enumerate((0.1, 0.2, 0.3, 0.4, 0.5, 0.6)):
            model = randomize(build_model(arch, 100, shape), 100 * k + j)
            pruned, mask = prune_model(model, ratio)
            oracle = zero_masked(model, mask)
            x = torch.randn(10, *shape, generator=torch.Generator().manual_seed(j))
            with torch.no_grad():
                worst = max(worst, (pruned(x)[0] - oracle(x)[0]).abs().max().item())
    dt = time.perf_counter() - t0
    ok = report(2, worst <= 1e-5 and dt < 120, f"max |logit diff| {worst:.2e} over 18 cases in {dt:.1f}s")
    assert ok


# -- 3 ----------------------------------------------------------------------------------


def test_c3_mask_exactness():
    rng = np.random.default_rng(2024)
    bad, done = 0, 0
    while done < 1000:
        sizes = rng.integers(2, 40, size=rng.integers(1, 8))
        ratio = float(rng.uniform(0.01, 0.95))
        gam = [np.round(rng.uniform(0, 1, n), int(rng.integers(1, 4))) for n in sizes]  # rounding forces ties
        entries = [(f"L{i}", c, float(g), True) for i, gs in enumerate(gam) for c, g in enumerate(gs)]
        view = BNScaleView(entries, [f"L{i}" for i in range(len(gam))])
        k = math.floor(ratio * len(entries))
        oracle = sorted(entries, key=lambda e: e[2])[:k]  # stable: layer order, then channel order
        per_layer = {}
        for name, *_ in oracle:
            per_layer[name] = per_layer.get(name, 0) + 1
        if any(per_layer.get(f"L{i}", 0) > n - 1 for i, n in enumerate(sizes)):
            continue  # caps would bind; this criterion covers non-binding caps
        mask = global_prune_mask(view, ratio, per_layer_cap=1.0)
        dropped = {(name, int(c)) for name, keep in mask.keep.items() for c in np.flatnonzero(~keep)}
        if mask.channels_dropped != k or dropped != {(n, c) for n, c, *_ in oracle}:
            bad += 1
        done += 1
    ok = report(3, bad == 0, f"{done - bad}/{done} masks drop exactly floor(ratio*N) oracle channels")
    assert ok


# -- 4 ----------------------------------------------------------------------------------


def test_c4_metric_oracles():
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(1000):
        T = int(rng.integers(1, 13))
        m = AccuracyMatrix(T)
        a = {}
        for i in range(1, T + 1):
            for t in range(1, i + 1):
                n = int(rng.integers(1, 200))
                c = int(rng.integers(0, n + 1))
                m.record(i, t, c, n)
                a[i, t] = Fraction(c, n)
        acc = Fraction(0)
        for t in range(1, T + 1):
            acc += a[T, t]
        bad += compute_acc_exact(m) != acc / T
        if T >= 2:
            bwt = Fraction(0)
            for t in range(1, T):
                bwt += a[T, t] - a[t, t]
                bad += taskwise_forgetting_exact(m, t) != a[T, t] - a[t, t]
            bad += compute_bwt_exact(m) != bwt / (T - 1)
    ok = report(4, bad == 0, f"{bad} mismatches against re-summation over 1000 matrices (T<=12)")
    assert ok


# -- 5 ----------------------------------------------------------------------------------


def test_c5_gradient_suite():
    from cilcompress import losses

    t0 = time.perf_counter()
    worst, leaks = 0.0, 0
    for seed in range(5):
        s0, cases = composite_cases(seed=seed)
        for name, fn in cases:
            s = s0.clone().requires_grad_(True)
            fn(s).backward()
            worst = max(worst, rel_err(s.grad, fd_grad(fn, s0.clone())))
        gam = torch.randn(6, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        g = gam.clone().requires_grad_(True)
        losses.sparsity_penalty([g]).backward()
        worst = max(worst, rel_err(g.grad, fd_grad(lambda v: losses.sparsity_penalty([v]), gam.clone())))
        # KD terms: no gradient on logits outside the distilled subset
        s, t = instance(100 + seed)
        y = torch.tensor([5, 6, 7, 5, 6])
        for f in (lambda z: losses.kd_kl(t, z, PREV, 2.0),
                  lambda z: losses.student_sub_loss(z, t, y, PREV, 2.0, 10.0)
                  - losses.student_sub_loss(z, t, y, PREV, 2.0, 0.0),
                  lambda z: losses.icarl_kd_loss(z, t, y, PREV, 2.0, 1.0) - losses.icarl_kd_loss(z, t, y, PREV, 2.0, 0.0)):
            z = s.clone().requires_grad_(True)
            f(z).backward()
            leaks += int(torch.any(z.grad[:, CUR] != 0.0))
    dt = time.perf_counter() - t0
    ok = report(5, worst < 1e-4 and leaks == 0 and dt < 300,
                f"max relative FD error {worst:.2e}; {leaks} out-of-subset gradient leaks; {dt:.1f}s")
    assert ok


# -- 6 ----------------------------------------------------------------------------------


def test_c6_degenerate_weights():
    from cilcompress import losses

    worst = 0.0
    for seed in range(20):
        s0, cases = composite_cases(lam=0.0, mu=0.0, seed=seed)
        y_all = torch.tensor([0, 6, 3, 7, 5])
        y_cur = torch.tensor([5, 6, 7, 7, 5])
        y_mem = torch.tensor([0, 4, 2])
        for name, fn in cases:
            if name in ("kd_kl", "cls_subset"):
                continue
            if name.startswith("ssil"):
                ce = losses.cls_loss(s0, y_cur, CUR) + losses.cls_loss(s0[:3] * 0.7, y_mem, PREV)
            else:
                ce = losses.cls_loss(s0, y_all)
            worst = max(worst, abs(fn(s0).item() - ce.item()))
    ok = report(6, worst <= 1e-8, f"max |composite - CE| {worst:.2e} with all weights 0")
    assert ok


# -- 7 ----------------------------------------------------------------------------------


@pytest.mark.parametrize("method", ["lwf", "icarl"])
def test_c7_kd_directionality(tmp_path_factory, cache, method):
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in SEEDS:
        base, _ = desk_run(tmp_path_factory, cache, method=method, framework="none", seed=seed)
        kd, _ = desk_run(tmp_path_factory, cache, method=method, framework="kd", seed=seed)
        a, b = base.summary["acc"], kd.summary["acc"]
        wins += b >= a
        rows.append(f"s{seed} {a:.3f}->{b:.3f}")
    dt = time.perf_counter() - t0
    ok = report(f"7 ({method})", wins >= 4 and dt < 1800,
                f"KD >= base in {wins}/5 seeds [{', '.join(rows)}] in {dt / 60:.1f} min")
    assert ok


# -- 8 ----------------------------------------------------------------------------------


def test_c8_pruning_directionality(tmp_path_factory, cache):
    t0 = time.perf_counter()
    wins, reductions, rows = 0, [], []
    for seed in SEEDS:
        pre, pre_dir = desk_run(tmp_path_factory, cache, method="lwf", framework="pre-prune", seed=seed,
                                **{"prune.ratio": 0.4})
        post, post_dir = desk_run(tmp_path_factory, cache, method="lwf", framework="post-prune", seed=seed,
                                  **{"prune.ratio": 0.4})
        wins += pre.summary["acc"] >= post.summary["acc"]
        for d in (pre_dir, post_dir):
            cost = json.loads((d / "cost.json").read_text())
            reductions.append(1 - cost["inference"]["params"] / cost["unpruned"]["params"])
        rows.append(f"s{seed} pre {pre.summary['acc']:.3f} post {post.summary['acc']:.3f}")
    dt = time.perf_counter() - t0
    ok = report(8, wins >= 3 and min(reductions) >= 0.30 and dt < 2700,
                f"pre >= post in {wins}/5 seeds [{', '.join(rows)}]; min param reduction "
                f"{100 * min(reductions):.1f}%; {dt / 60:.1f} min")
    assert ok


# -- 9 ----------------------------------------------------------------------------------


def test_c9_protocol_invariants(tmp_path):
    cfg = tiny_config(method="icarl", framework="kd")
    rec = run_experiment(cfg, tmp_path / "kd")
    assert rec.status == "completed", rec.error
    events = [json.loads(l) for l in (tmp_path / "kd" / "events.log").read_text().splitlines()]
    problems = []
    task = None
    for e in events:
        if e["event"] == "task_start":
            task = e["task"]
        elif e["event"] == "task_end":
            task = None
        elif e["event"] == "data_access" and task is not None:
            if e["split"] == "train" and e["task"] != task:
                problems.append(f"train split of task {e['task']} read during task {task}")
            if e["split"] == "test" and e["task"] > task:
                problems.append(f"test split of future task {e['task']} read during task {task}")
    fps = [e for e in events if e["event"] == "teacher_fingerprint"]
    for before, after in zip(fps[::2], fps[1::2]):
        if before["sha1"] != after["sha1"]:
            problems.append(f"teacher changed during student training on task {before['task']}")
    starts = [(e["task"], e["role"]) for e in events if e["event"] == "train_start"]
    for t in range(2, cfg.num_tasks + 1):
        order = [r for k, r in starts if k == t]
        if order != ["student", "teacher"]:
            problems.append(f"task {t} order {order}")
    evals = [(e["role"], e["classifier"], e["after_task"]) for e in events if e["event"] == "eval"]
    if len(evals) != len(set(evals)):
        problems.append("an accuracy row was evaluated twice")
    m = AccuracyMatrix.from_csv((tmp_path / "kd" / "matrix.csv").read_text(), cfg.num_tasks)
    try:
        m.record(1, 1, 0, 1)
        problems.append("matrix entry was overwritten")
    except ImmutableEntryError:
        pass
    ok = report(9, not problems and len(m) == 6,
                "isolation, teacher constancy, student-first ordering and write-once hold"
                if not problems else "; ".join(problems))
    assert ok


# -- 10 ---------------------------------------------------------------------------------


def test_c10_determinism(tmp_path):
    same = []
    for framework in ("none", "kd", "post-prune"):
        cfg = tiny_config(method="icarl", framework=framework, seed=3)
        for d in ("a", "b"):
            rec = run_experiment(cfg, tmp_path / f"{framework}-{d}")
            assert rec.status == "completed", rec.error
        files = sorted(p.name for p in (tmp_path / f"{framework}-a").glob("matrix*.csv"))
        same += [(tmp_path / f"{framework}-a" / f).read_bytes() == (tmp_path / f"{framework}-b" / f).read_bytes()
                 for f in files]
    ok = report(10, all(same), f"{sum(same)}/{len(same)} matrix CSVs byte-identical across repeated runs")
    assert ok
