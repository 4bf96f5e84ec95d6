"""Sequential class-incremental training and the teacher-student KD orchestrator."""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import torch

from . import losses
from .config import REPLAY_METHODS, ExperimentConfig, OptimConfig
from .data import ArrayDataset, DatasetSplits, ExemplarMemory, TaskStream, scale_buffer, update_memory
from .metrics import AccuracyMatrix
from .model.graph import ModelGraph, extend_head, prunable_gammas
from .model.ncm import MissingExemplarError, compute_class_means, ncm_predict

EVAL_BATCH = 256


class TrainingFailure(RuntimeError):
    pass


class EventLog:
    """Line-delimited JSON event records, optionally mirrored to a file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.listeners: list[Callable[[dict], None]] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def emit(self, event: str, **fields) -> dict:
        rec = {"seq": len(self.records), "event": event, **fields}
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()
        for fn in self.listeners:
            fn(rec)
        return rec

    def of(self, event: str) -> list[dict]:
        return [r for r in self.records if r["event"] == event]

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


@dataclass
class MethodState:
    model: ModelGraph
    method: str
    role: str = "student"
    prev_snapshot: ModelGraph | None = None
    memory: ExemplarMemory | None = None
    seen: list[int] = field(default_factory=list)

    @property
    def replay(self) -> bool:
        return self.method in REPLAY_METHODS


@dataclass
class KDPairState:
    teacher: MethodState
    student: MethodState


@dataclass
class CILResult:
    matrices: dict[str, AccuracyMatrix]
    state: MethodState
    teacher_matrix: AccuracyMatrix | None = None
    extra: dict = field(default_factory=dict)

    @property
    def matrix(self) -> AccuracyMatrix:
        return self.matrices["mlp"]


# -- seeding helpers -----------------------------------------------------------


def _seed_seq(seed: int, *keys) -> list[int]:
    return [int(seed)] + [zlib.crc32(str(k).encode()) for k in keys]


def make_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(_seed_seq(seed, *keys))


def make_torch_generator(seed: int, *keys) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(make_rng(seed, *keys).integers(0, 2**62)))
    return g


def fingerprint(model: torch.nn.Module) -> str:
    h = hashlib.sha1()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- low-level training ----------------------------------------------------------


def _optimizer(model: ModelGraph, optim: OptimConfig, total_steps: int, lr: float | None = None):
    # losses are summed over the batch, so the mean-convention lr is divided by B
    B = optim.batch_size
    opt = torch.optim.SGD(
        model.parameters(), lr=(optim.lr if lr is None else lr) / B, momentum=optim.momentum,
        weight_decay=optim.weight_decay * B,
    )
    total = max(total_steps, 1)
    if optim.schedule == "cosine":
        fn = lambda s: 0.5 * (1.0 + math.cos(math.pi * min(s, total) / total))  # noqa: E731
    elif optim.schedule == "step":
        fn = lambda s: 0.1 ** ((s >= 0.5 * total) + (s >= 0.75 * total))  # noqa: E731
    else:
        fn = lambda s: 1.0  # noqa: E731
    return opt, torch.optim.lr_scheduler.LambdaLR(opt, fn)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    perm = rng.permutation(n)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()  # a lone trailing sample joins the previous batch (BN needs >1 sample)
    for k, i in enumerate(starts):
        yield perm[i : starts[k + 1] if k + 1 < len(starts) else n]


def _tensor(x: np.ndarray, like: torch.nn.Module) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x)).to(next(like.parameters()).dtype)


@torch.no_grad()
def _ref_logits(ref: ModelGraph | None, x: torch.Tensor) -> torch.Tensor | None:
    if ref is None:
        return None
    ref.eval()
    return ref(x)[0]


@dataclass
class LossPlan:
    """What one training phase optimizes.

    ``composition`` is ``plain`` (task data), ``mixed`` (task data plus memory,
    shuffled together) or ``separated`` (task batch plus a memory sub-batch).
    ``ref`` is the frozen model whose soft targets are distilled; ``kd_full``
    distills over every logit instead of the previous classes only.
    """

    composition: str = "plain"
    ref: ModelGraph | None = None
    lam: float = 0.0
    kd_full: bool = False
    prev: list[int] = field(default_factory=list)
    current: list[int] = field(default_factory=list)
    tau: float = 2.0
    mu: float = 0.0
    include_stem: bool = False


def _fit(
    model: ModelGraph,
    data: ArrayDataset,
    memory: ArrayDataset | None,
    plan: LossPlan,
    optim: OptimConfig,
    epochs: int,
    rng: np.random.Generator,
    events: EventLog,
    tag: str,
    lr: float | None = None,
) -> None:
    if plan.composition == "mixed" and memory is not None and len(memory):
        data = ArrayDataset.concat([data, memory])
    B = optim.batch_size
    steps_per_epoch = math.ceil(len(data) / B)
    opt, sched = _optimizer(model, optim, epochs * steps_per_epoch, lr)
    gammas = prunable_gammas(model, plan.include_stem) if plan.mu else []
    mem_sub = 0
    if plan.composition == "separated" and memory is not None and len(memory):
        mem_sub = min(B // 4, len(memory))
    step = 0
    for epoch in range(epochs):
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(data), B, rng):
            x = _tensor(data.x[idx], model)
            y = torch.from_numpy(data.y[idx])
            if mem_sub:
                midx = rng.choice(len(memory), mem_sub, replace=False)
                xm = _tensor(memory.x[midx], model)
                ym = torch.from_numpy(memory.y[midx])
                logits = model(torch.cat([x, xm]))[0]
                ref = _ref_logits(plan.ref, torch.cat([x, xm]))
                n = len(idx)
                loss = losses.ssil_loss(
                    logits[:n], y, logits[n:], ym,
                    None if ref is None else ref[:n], None if ref is None else ref[n:],
                    plan.current, plan.prev, plan.tau, plan.lam if ref is not None else 0.0,
                )
            else:
                logits = model(x)[0]
                ref = _ref_logits(plan.ref, x)
                if plan.composition == "separated" and plan.prev:
                    loss = losses.cls_loss(logits, y, plan.current)
                    if ref is not None and plan.lam:
                        loss = loss + plan.lam * losses.kd_kl(ref, logits, plan.prev, plan.tau)
                elif ref is None:
                    loss = losses.cls_loss(logits, y)
                elif plan.kd_full:
                    loss = losses.student_init_loss(logits, ref, y, plan.tau, plan.lam)
                else:
                    loss = losses.lwf_loss(logits, ref, y, plan.prev, plan.tau, plan.lam)
            if plan.mu:
                loss = loss + plan.mu * losses.sparsity_penalty(gammas)
            if not torch.isfinite(loss):
                raise TrainingFailure(f"{tag}: non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            total += float(loss.detach())
            count += len(idx)
        events.emit("epoch", tag=tag, epoch=epoch, mean_loss=round(total / max(count, 1), 6))
    model.eval()


# -- per-task operations ----------------------------------------------------------


def memory_budget(stream: TaskStream, cfg: ExperimentConfig) -> int:
    train_count = sum(stream.descriptor(t).sample_count for t in range(1, stream.num_tasks + 1))
    return scale_buffer(cfg.memory.buffer_base, cfg.memory.base_train_count, train_count)


def feature_fn(model: ModelGraph) -> Callable[[np.ndarray], np.ndarray]:
    @torch.no_grad()
    def fn(x: np.ndarray) -> np.ndarray:
        model.eval()
        out = [model(_tensor(x[i : i + EVAL_BATCH], model))[1] for i in range(0, len(x), EVAL_BATCH)]
        return torch.cat(out).double().numpy()

    return fn


def begin_task(state: MethodState, stream: TaskStream, t: int, seed: int) -> None:
    """Grow the head for task t's classes."""
    new = stream.labels(t).to_list()
    extend_head(state.model, new, state.seen, make_torch_generator(seed, "head", state.role, t))
    state.seen.extend(new)


def default_plan(state: MethodState, stream: TaskStream, t: int, cfg: ExperimentConfig) -> LossPlan:
    """The base method's own objective for task t."""
    prev = [c for k in range(1, t) for c in stream.labels(k)]
    current = stream.labels(t).to_list()
    plan = LossPlan(prev=prev, current=current, tau=cfg.kd.temperature, include_stem=cfg.prune.include_stem)
    if state.method == "icarl":
        plan.composition = "mixed"
    elif state.method == "ssil" and t > 1:
        plan.composition = "separated"
    if t > 1 and state.method != "finetune":
        plan.ref = state.prev_snapshot
        plan.lam = cfg.lwf.lam
    return plan


def train_task(
    state: MethodState,
    stream: TaskStream,
    t: int,
    cfg: ExperimentConfig,
    events: EventLog,
    plan: LossPlan | None = None,
    epochs: int | None = None,
    tag: str = "train",
    lr: float | None = None,
    rng_tag: str | None = None,
) -> MethodState:
    """Optimize ``state.model`` on task t (plus replay memory) with ``plan``.

    Batch order is keyed on (seed, role, t, ``rng_tag`` or ``tag``).
    """
    plan = plan or default_plan(state, stream, t, cfg)
    data = stream.train_split(t)
    memory = state.memory.as_dataset() if (state.memory is not None and plan.composition != "plain") else None
    rng = make_rng(cfg.seed, "batches", state.role, t, rng_tag or tag)
    events.emit("train_start", role=state.role, task=t, tag=tag, method=state.method, mu=plan.mu,
                distill=plan.ref is not None and plan.lam > 0, lam=plan.lam if plan.ref is not None else 0.0)
    _fit(state.model, data, memory, plan, cfg.optim, cfg.optim.epochs if epochs is None else epochs, rng,
         events, f"{state.role}:{tag}:t{t}", lr)
    events.emit("train_end", role=state.role, task=t, tag=tag)
    return state


def finish_task(state: MethodState, stream: TaskStream, t: int, selector: ModelGraph | None = None) -> None:
    """Freeze the snapshot used by the next task and refresh replay memory."""
    state.prev_snapshot = state.model.clone().eval()
    for p in state.prev_snapshot.parameters():
        p.requires_grad_(False)
    if state.replay and state.memory is not None:
        fresh = update_memory(
            state.memory, feature_fn(selector or state.model), stream.train_split(t), stream.labels(t).to_list()
        )
        state.memory.per_class = fresh.per_class


@torch.no_grad()
def evaluate(
    model: ModelGraph,
    stream: TaskStream,
    through: int,
    classifier: str = "mlp",
    memory: ExemplarMemory | None = None,
) -> list[tuple[int, int]]:
    """(correct, total) on tasks 1..through, predicting over every seen class."""
    model.eval()
    seen = stream.seen_labels(through)
    if model.num_classes != len(seen):
        raise ValueError(f"head has {model.num_classes} outputs but {len(seen)} classes are seen")
    means = None
    if classifier == "ncm":
        if memory is None:
            raise MissingExemplarError("NCM evaluation needs exemplar memory")
        means = compute_class_means(feature_fn(model), memory, seen)
    out = []
    for t in range(1, through + 1):
        ds = stream.test_split(t)
        correct = 0
        for i in range(0, len(ds), EVAL_BATCH):
            logits, feats = model(_tensor(ds.x[i : i + EVAL_BATCH], model))
            if means is None:
                pred = logits.argmax(dim=1).numpy()
            else:
                pred = ncm_predict(feats.double().numpy(), means)
            correct += int((pred == ds.y[i : i + EVAL_BATCH]).sum())
        out.append((correct, len(ds)))
    return out


def _record(matrices: dict[str, AccuracyMatrix], state: MethodState, stream: TaskStream, t: int,
            events: EventLog, role: str) -> None:
    for clf, m in matrices.items():
        accs = evaluate(state.model, stream, t, clf, state.memory)
        for on, (c, n) in enumerate(accs, start=1):
            m.record(t, on, c, n)
        events.emit("eval", role=role, classifier=clf, after_task=t, counts=[list(a) for a in accs])


def new_matrices(state: MethodState, stream: TaskStream) -> dict[str, AccuracyMatrix]:
    mats = {"mlp": AccuracyMatrix(stream.num_tasks)}
    if state.replay:
        mats["ncm"] = AccuracyMatrix(stream.num_tasks)
    return mats


def init_state(model: ModelGraph, method: str, stream: TaskStream, cfg: ExperimentConfig,
               role: str = "student") -> MethodState:
    mem = ExemplarMemory(memory_budget(stream, cfg)) if method in REPLAY_METHODS else None
    return MethodState(model, method, role, memory=mem)


def run_cil(
    state: MethodState,
    stream: TaskStream,
    cfg: ExperimentConfig,
    events: EventLog,
    start_task: int = 1,
    mu: float = 0.0,
    result: CILResult | None = None,
    on_task_end: Callable[[int, MethodState], None] | None = None,
) -> CILResult:
    """Train tasks ``start_task..T`` with the base method, recording a_{t,1..t} after each."""
    result = result or CILResult(new_matrices(state, stream), state)
    for t in range(start_task, stream.num_tasks + 1):
        events.emit("task_start", task=t, role=state.role)
        begin_task(state, stream, t, cfg.seed)
        plan = default_plan(state, stream, t, cfg)
        plan.mu = mu
        train_task(state, stream, t, cfg, events, plan)
        finish_task(state, stream, t)
        _record(result.matrices, state, stream, t, events, state.role)
        if on_task_end:
            on_task_end(t, state)
        events.emit("task_end", task=t, role=state.role)
    return result


def kd_run_cil(
    pair: KDPairState,
    stream: TaskStream,
    cfg: ExperimentConfig,
    events: EventLog,
    on_task_end: Callable[[int, KDPairState], None] | None = None,
) -> CILResult:
    """Teacher-student CIL: only the student is evaluated and reported.

    Task 1: teacher on plain CE, then student on CE + KD over all task-1
    classes.  Later tasks: student first, distilling the previous classes
    from the teacher as it stood after task t-1 (weight ``kd.lambda_sub``, or
    ``lwf.lam`` for the replay methods), then the teacher runs its base method.  ``kd.from_current_teacher`` swaps that order.
    """
    teacher, student = pair.teacher, pair.student
    if student.memory is not None:
        teacher.memory = student.memory  # one shared exemplar buffer
    result = CILResult(new_matrices(student, stream), student, AccuracyMatrix(stream.num_tasks))
    kd = cfg.kd

    def train_student(t: int) -> None:
        plan = default_plan(student, stream, t, cfg)
        plan.ref = teacher.model
        if t == 1:
            plan.kd_full, plan.lam = True, kd.lambda_init
        elif student.replay:
            # the replay variants swap only the distillation source and keep their own weight
            plan.lam = cfg.lwf.lam
        else:
            plan.lam = kd.lambda_sub
        before = fingerprint(teacher.model)
        events.emit("teacher_fingerprint", task=t, when="before_student", sha1=before)
        # same batch order as a plain run, so zero KD weights reproduce it exactly
        train_task(student, stream, t, cfg, events, plan, tag="kd", rng_tag="train")
        after = fingerprint(teacher.model)
        events.emit("teacher_fingerprint", task=t, when="after_student", sha1=after)
        if before != after:
            raise TrainingFailure(f"teacher parameters changed during student training on task {t}")

    for t in range(1, stream.num_tasks + 1):
        events.emit("task_start", task=t, role="pair")
        begin_task(teacher, stream, t, cfg.seed)
        begin_task(student, stream, t, cfg.seed)
        if t == 1 or kd.from_current_teacher:
            train_task(teacher, stream, t, cfg, events, tag="teacher")
            train_student(t)
        else:
            train_student(t)
            train_task(teacher, stream, t, cfg, events, tag="teacher")
        finish_task(teacher, stream, t)
        finish_task_no_memory(student)
        _record(result.matrices, student, stream, t, events, "student")
        taccs = evaluate(teacher.model, stream, t)
        for on, (c, n) in enumerate(taccs, start=1):
            result.teacher_matrix.record(t, on, c, n)
        events.emit("eval", role="teacher", classifier="mlp", after_task=t, counts=[list(a) for a in taccs])
        if on_task_end:
            on_task_end(t, pair)
        events.emit("task_end", task=t, role="pair")
    return result


def finish_task_no_memory(state: MethodState) -> None:
    state.prev_snapshot = state.model.clone().eval()
    for p in state.prev_snapshot.parameters():
        p.requires_grad_(False)


# -- proxy pretraining -------------------------------------------------------------


def pretrain(model: ModelGraph, splits: DatasetSplits, cfg: ExperimentConfig, events: EventLog,
             role: str = "student") -> tuple[ModelGraph, float]:
    """Supervised training on the holdout classes; returns the model and its test accuracy."""
    classes = splits.classes
    lut = {c: i for i, c in enumerate(classes)}

    def relabel(ds: ArrayDataset) -> ArrayDataset:
        return ArrayDataset(ds.x, np.asarray([lut[int(y)] for y in ds.y]), ds.index)

    train, test = relabel(splits.train), relabel(splits.test)
    seed = cfg.pretrain.seed
    model.extend_head(len(classes), generator=make_torch_generator(seed, "pretrain-head", role))
    rng = make_rng(seed, "pretrain", role)
    events.emit("pretrain_start", role=role, classes=len(classes))
    _fit(model, train, None, LossPlan(), cfg.optim, cfg.pretrain.epochs, rng, events, f"{role}:pretrain",
         cfg.pretrain.lr)
    acc = accuracy(model, test)
    events.emit("pretrain_end", role=role, test_accuracy=round(acc, 6))
    return model, acc


@torch.no_grad()
def accuracy(model: ModelGraph, ds: ArrayDataset) -> float:
    model.eval()
    correct = 0
    for i in range(0, len(ds), EVAL_BATCH):
        logits, _ = model(_tensor(ds.x[i : i + EVAL_BATCH], model))
        correct += int((logits.argmax(1).numpy() == ds.y[i : i + EVAL_BATCH]).sum())
    return correct / len(ds)
