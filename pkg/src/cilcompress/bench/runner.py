"""Run one configured experiment and persist every artifact to a run directory.

Layout::

    <out>/config.snapshot        full flat config, one key per line
    <out>/matrix.csv             accuracy matrix of the configured classifier
    <out>/matrix_<clf>.csv       every classifier the method supports
    <out>/cost.json              inference / unpruned / per-task cost reports
    <out>/events.log             line-delimited JSON events
    <out>/stream.json            class order and task sizes
    <out>/checkpoints/task_<t>.<role>.weights
    <out>/run.json               RunRecord and summary metrics
"""

from __future__ import annotations

import hashlib
import json
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .. import config as config_mod
from .. import data, metrics, pruning
from .. import trainers as tr
from ..config import ExperimentConfig, ModelConfig
from ..model.archs import build_model
from ..model.cost import cost_report
from ..model.graph import ModelGraph
from ..model.weights import load_pretrained, save_weights

_PRETRAIN_CACHE: dict[str, dict[str, torch.Tensor]] = {}


@dataclass
class RunRecord:
    out_dir: str
    seed: int
    status: str
    config_snapshot: str = "config.snapshot"
    matrix_path: str = "matrix.csv"
    events_path: str = "events.log"
    cost: dict = field(default_factory=dict)
    duration_s: float = 0.0
    error: str | None = None
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# -- data and models ---------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> data.DatasetSplits:
    d = cfg.dataset
    if d.name == "synthetic":
        return data.make_synthetic(d.num_classes, d.train_per_class, d.test_per_class, d.image_size, seed=d.seed)
    if d.name == "npz":
        return data.load_npz(d.path)
    if d.name == "manifest":
        return data.load_manifest(d.path, d.arrays or None)
    raise config_mod.ConfigValidationError(f"dataset.name: unknown dataset {d.name!r}", ["dataset.name"])


def prepare_stream(cfg: ExperimentConfig, splits: data.DatasetSplits | None = None):
    """(PretrainSplit, TaskStream) for ``cfg``; the holdout depends only on dataset settings."""
    splits = splits or load_dataset(cfg)
    ps = data.make_pretrain_split(splits, cfg.dataset.pretrain_fraction, cfg.dataset.seed)
    stream = data.split_classes(ps.cil, cfg.num_tasks, cfg.seed)
    return ps, stream


def _fresh_model(mcfg: ModelConfig, input_shape, seed: int, role: str) -> ModelGraph:
    torch.manual_seed(int(tr.make_rng(seed, "init", role).integers(0, 2**62)))
    return build_model(mcfg.arch, 0, input_shape, mcfg.width)


def _pretrain_key(cfg: ExperimentConfig, mcfg: ModelConfig) -> str:
    flat = config_mod.to_flat(cfg)
    keys = {k: v for k, v in flat.items() if k.startswith(("dataset.", "pretrain.", "optim."))}
    keys.update(arch=mcfg.arch, width=mcfg.width)
    return hashlib.sha1(json.dumps(keys, sort_keys=True).encode()).hexdigest()[:16]


def initial_model(cfg: ExperimentConfig, mcfg: ModelConfig, role: str, ps: data.PretrainSplit, input_shape,
                  events: tr.EventLog, cache_dir: Path | None = None) -> ModelGraph:
    """A head-less model, initialised from weights, proxy pretraining, or at random."""
    model = _fresh_model(mcfg, input_shape, cfg.seed, role)
    if mcfg.weights:
        return load_pretrained(model, mcfg.weights)
    if not mcfg.pretrained or ps.pretrain is None:
        return model
    key = _pretrain_key(cfg, mcfg)
    cached = Path(cache_dir) / f"pretrained-{key}.weights" if cache_dir else None
    if key not in _PRETRAIN_CACHE:
        if cached is not None and cached.exists():
            events.emit("pretrain_cached", role=role, path=str(cached))
            return load_pretrained(model, cached)
        src = _fresh_model(mcfg, input_shape, cfg.pretrain.seed, "pretrain")
        src, _ = tr.pretrain(src, ps.pretrain, cfg, events, role)
        _PRETRAIN_CACHE[key] = {k: v.clone() for k, v in src.backbone_state().items()}
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            save_weights(src, cached, {"pretrain_key": key})
    else:
        events.emit("pretrain_cached", role=role, key=key)
    state = _PRETRAIN_CACHE[key]
    with torch.no_grad():
        for name, t in model.backbone_state().items():
            t.copy_(state[name])
    return model


# -- orchestration -------------------------------------------------------------------


class _Checkpointer:
    def __init__(self, out: Path, enabled: bool):
        self.dir = out / "checkpoints"
        self.enabled = enabled
        if enabled:
            self.dir.mkdir(parents=True, exist_ok=True)

    def __call__(self, t: int, role: str, model: ModelGraph) -> None:
        if self.enabled:
            save_weights(model, self.dir / f"task_{t}.{role}.weights", {"task": t, "role": role})


def execute(cfg: ExperimentConfig, out: Path, events: tr.EventLog, cache_dir: Path | None = None,
            splits: data.DatasetSplits | None = None) -> dict:
    """Run the configured method/framework; returns matrices and cost reports."""
    ps, stream = prepare_stream(cfg, splits)
    stream.access_hook = lambda kind, t: events.emit("data_access", split=kind, task=t)
    input_shape = ps.cil.input_shape
    (out / "stream.json").write_text(stream.summary_json() + "\n")
    ckpt = _Checkpointer(out, cfg.checkpoints)
    student = tr.init_state(initial_model(cfg, cfg.student, "student", ps, input_shape, events, cache_dir),
                            cfg.method, stream, cfg, "student")
    costs: dict = {}
    extra_mats: dict[str, metrics.AccuracyMatrix] = {}
    fw = cfg.framework
    if fw == "none":
        res = tr.run_cil(student, stream, cfg, events, on_task_end=lambda t, s: ckpt(t, "student", s.model))
        final = res.state.model
    elif fw == "kd":
        teacher = tr.init_state(initial_model(cfg, cfg.teacher, "teacher", ps, input_shape, events, cache_dir),
                                cfg.method, stream, cfg, "teacher")

        def on_end(t, pair):
            ckpt(t, "student", pair.student.model)
            ckpt(t, "teacher", pair.teacher.model)

        res = tr.kd_run_cil(tr.KDPairState(teacher, student), stream, cfg, events, on_task_end=on_end)
        final = res.state.model
        extra_mats["teacher"] = res.teacher_matrix
        costs["teacher"] = cost_report(teacher.model).to_dict()
    elif fw == "pre-prune":
        plan = pruning.plan_from_config(cfg, "pre")
        res, cost, mask = pruning.pre_pruning_pipeline(
            student, stream, plan, cfg, events, on_task_end=lambda t, s: ckpt(t, "student", s.model))
        final = res.state.model
        costs["mask"] = mask.to_dict()
    elif fw == "post-prune":
        plan = pruning.plan_from_config(cfg, "post")

        def on_end(t, s, pruned):
            ckpt(t, "student", s.model)
            ckpt(t, "pruned", pruned)

        res, per_task = pruning.post_pruning_pipeline(student, stream, plan, cfg, events, on_task_end=on_end)
        final = None
        costs["per_task"] = [c.to_dict() for c in per_task]
        costs["inference"] = per_task[-1].to_dict()
        for clf, m in res.extra["unpruned_matrices"].items():
            extra_mats[f"unpruned_{clf}"] = m
    else:  # validated earlier
        raise config_mod.ConfigValidationError(f"framework: {fw!r}", ["framework"])
    if final is not None:
        costs["inference"] = cost_report(final).to_dict()
    reference = _fresh_model(cfg.student, input_shape, cfg.seed, "reference").extend_head(len(stream.seen_labels(stream.num_tasks)))
    costs["unpruned"] = cost_report(reference).to_dict()
    return {"matrices": res.matrices, "extra": extra_mats, "costs": costs, "stream": stream, "splits": ps}


def summarize(m: metrics.AccuracyMatrix) -> dict:
    out = {"complete_rows": m.last_complete_row()}
    if out["complete_rows"] == m.num_tasks:
        out["acc"] = metrics.compute_acc(m)
        if m.num_tasks >= 2:
            out["bwt"] = metrics.compute_bwt(m)
    return out


def run_experiment(cfg: ExperimentConfig | str | Path, out_dir: str | Path, cache_dir: str | Path | None = None,
                   splits: data.DatasetSplits | None = None) -> RunRecord:
    """Execute one run.  Config errors raise; training failures yield ``status='failed'``."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = config_mod.load(cfg)
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(config_mod.dumps(cfg))
    events_path = out / "events.log"
    events_path.write_text("")
    events = tr.EventLog(events_path)
    record = RunRecord(str(out), cfg.seed, "failed")
    t0 = time.perf_counter()
    events.emit("run_start", seed=cfg.seed, method=cfg.method, framework=cfg.framework)
    try:
        result = execute(cfg, out, events, Path(cache_dir) if cache_dir else None, splits)
    except Exception as exc:  # keep partial artifacts, report the failure
        record.error = f"{type(exc).__name__}: {exc}"
        events.emit("run_failed", error=record.error, traceback=traceback.format_exc())
    else:
        mats = result["matrices"]
        for clf, m in mats.items():
            (out / f"matrix_{clf}.csv").write_text(m.to_csv())
        for name, m in result["extra"].items():
            (out / f"matrix_{name}.csv").write_text(m.to_csv())
        primary = mats[cfg.classifier]
        (out / "matrix.csv").write_text(primary.to_csv())
        (out / "cost.json").write_text(json.dumps(result["costs"], indent=2, sort_keys=True) + "\n")
        record.status = "completed"
        record.cost = {k: {"params": v["params"], "flops": v["flops"]}
                       for k, v in result["costs"].items() if k in ("inference", "unpruned", "teacher")}
        ps = result["splits"]
        record.summary = {
            "method": cfg.method, "framework": cfg.framework, "dataset": cfg.dataset.name,
            "classifier": cfg.classifier, "tag": cfg.tag, "num_tasks": cfg.num_tasks,
            **summarize(primary),
            "normalization": {"mean": list(ps.cil.channel_mean), "std": list(ps.cil.channel_std)},
            "pretrain_classes": ps.pretrain_classes,
        }
    finally:
        record.duration_s = round(time.perf_counter() - t0, 3)
        events.emit("run_end", status=record.status)
        events.close()
        (out / "run.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    return record
