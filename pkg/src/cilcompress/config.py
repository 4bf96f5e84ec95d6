"""Experiment configuration: flat ``dotted.key = value`` files.

Each line is a TOML key/value pair, so files can be parsed by any TOML reader,
but only flat dotted keys from the schema below are accepted.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

METHODS = ("finetune", "lwf", "icarl", "ssil")
FRAMEWORKS = ("none", "kd", "pre-prune", "post-prune")
CLASSIFIERS = ("mlp", "ncm")
SCHEDULES = ("cosine", "step", "constant")
REPLAY_METHODS = ("icarl", "ssil")


class ConfigValidationError(ValueError):
    def __init__(self, msg: str, keys: list[str] | None = None):
        super().__init__(msg)
        self.keys = keys or []


def _f(default, doc: str, source: str = "desk default"):
    return field(default=default, metadata={"doc": doc, "source": source})


@dataclass
class DatasetConfig:
    name: str = _f("synthetic", "synthetic | npz | manifest")
    path: str = _f("", "npz file or manifest CSV for non-synthetic datasets")
    arrays: str = _f("", "optional npz with array 'x' that manifest indices point into")
    num_classes: int = _f(20, "synthetic: total classes, including the pretrain holdout")
    train_per_class: int = _f(200, "synthetic: training images per class")
    test_per_class: int = _f(50, "synthetic: test images per class")
    image_size: int = _f(16, "synthetic: image height and width")
    seed: int = _f(0, "synthetic: generator seed (fixed across run seeds)")
    pretrain_fraction: float = _f(0.5, "fraction of classes held out for proxy pretraining")


@dataclass
class ModelConfig:
    arch: str = _f("toycnn", "toycnn | resnet18 | resnet34 | mobilenetv2")
    width: float = _f(1.0, "channel width multiplier")
    pretrained: bool = _f(True, "initialize the backbone from pretrained weights", "reported setup")
    weights: str = _f("", "weights container to load; empty runs proxy pretraining")


@dataclass
class KDConfig:
    temperature: float = _f(2.0, "distillation temperature tau", "reported setup")
    lambda_init: float = _f(1.0, "KD weight on the first task", "reported setup")
    lambda_sub: float = _f(10.0, "KD weight on later tasks", "reported setup")
    from_current_teacher: bool = _f(False, "distill from the teacher after (not before) the current task")


@dataclass
class LwFConfig:
    # 'lambda' is a Python keyword; the file key is lwf.lambda
    lam: float = _f(1.0, "weight of the base methods' distillation term")


@dataclass
class MemoryConfig:
    buffer_base: int = _f(2000, "replay buffer size for a base_train_count-sized training set", "reported setup")
    base_train_count: int = _f(50000, "training-set size the base buffer refers to", "reported setup")


@dataclass
class PruneConfig:
    ratio: float = _f(0.4, "global fraction of prunable channels to remove")
    mu: float = _f(0.1, "weight of the l1 penalty on BN scales", "reported setup")
    per_layer_cap: float = _f(0.9, "max fraction of one layer's channels that may be removed")
    include_stem: bool = _f(False, "allow pruning the first conv's output channels")
    sparsity_epochs: int = _f(-1, "pre-pruning alignment epochs; -1 uses optim.epochs")
    recovery_epochs: int = _f(-1, "recovery fine-tune epochs after surgery; -1 uses optim.epochs")
    recovery_sparsity: bool = _f(False, "keep the l1 penalty during recovery")
    post_sparsity: bool = _f(True, "post-pruning: l1 penalty during large-model CIL training")


@dataclass
class OptimConfig:
    lr: float = _f(0.05, "learning rate for a batch-mean loss; divided by batch_size for summed losses")
    momentum: float = _f(0.9, "SGD momentum")
    weight_decay: float = _f(5e-4, "L2 weight decay (batch-mean convention)")
    epochs: int = _f(20, "epochs per task")
    batch_size: int = _f(128, "mini-batch size", "reported setup")
    schedule: str = _f("cosine", "cosine | step | constant, reset every task")


@dataclass
class PretrainConfig:
    epochs: int = _f(15, "proxy pretraining epochs")
    lr: float = _f(0.05, "proxy pretraining learning rate")
    seed: int = _f(0, "proxy pretraining seed (shared across run seeds)")


@dataclass
class ExperimentConfig:
    method: str = _f("lwf", "finetune | lwf | icarl | ssil")
    framework: str = _f("none", "none | kd | pre-prune | post-prune")
    classifier: str = _f("mlp", "mlp | ncm; classifier written to matrix.csv")
    seed: int = _f(0, "run seed: class order, initialization, batch order")
    num_tasks: int = _f(10, "number of tasks", "reported setup")
    tag: str = _f("", "free-form label for grouping and plot legends")
    checkpoints: bool = _f(True, "save weights at every task boundary")
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    student: ModelConfig = field(default_factory=ModelConfig)
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(width=2.0))
    kd: KDConfig = field(default_factory=KDConfig)
    lwf: LwFConfig = field(default_factory=LwFConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def validate(self) -> "ExperimentConfig":
        problems = []
        if self.method not in METHODS:
            problems.append(f"method: {self.method!r} not in {METHODS}")
        if self.framework not in FRAMEWORKS:
            problems.append(f"framework: {self.framework!r} not in {FRAMEWORKS}")
        if self.classifier not in CLASSIFIERS:
            problems.append(f"classifier: {self.classifier!r} not in {CLASSIFIERS}")
        if self.classifier == "ncm" and self.method not in REPLAY_METHODS:
            problems.append("classifier: ncm needs a replay method (icarl or ssil)")
        if self.optim.schedule not in SCHEDULES:
            problems.append(f"optim.schedule: {self.optim.schedule!r} not in {SCHEDULES}")
        if not self.kd.temperature > 0:
            problems.append("kd.temperature must be > 0")
        for key, v in (("kd.lambda_init", self.kd.lambda_init), ("kd.lambda_sub", self.kd.lambda_sub),
                       ("lwf.lambda", self.lwf.lam), ("prune.mu", self.prune.mu)):
            if v < 0:
                problems.append(f"{key} must be >= 0")
        if not 0 < self.prune.ratio < 1:
            problems.append("prune.ratio must be in (0, 1)")
        if not 0 < self.prune.per_layer_cap <= 1:
            problems.append("prune.per_layer_cap must be in (0, 1]")
        if self.num_tasks < 1:
            problems.append("num_tasks must be >= 1")
        if self.optim.batch_size < 1 or self.optim.epochs < 0:
            problems.append("optim.batch_size must be >= 1 and optim.epochs >= 0")
        if not 0 <= self.dataset.pretrain_fraction < 1:
            problems.append("dataset.pretrain_fraction must be in [0, 1)")
        if problems:
            raise ConfigValidationError("; ".join(problems))
        return self

    @property
    def sparsity_epochs(self) -> int:
        return self.optim.epochs if self.prune.sparsity_epochs < 0 else self.prune.sparsity_epochs

    @property
    def recovery_epochs(self) -> int:
        return self.optim.epochs if self.prune.recovery_epochs < 0 else self.prune.recovery_epochs


# -- flat key mapping --------------------------------------------------------

_ALIASES = {"lwf.lam": "lwf.lambda"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


def _walk(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _walk(value, key + ".")
        else:
            yield _ALIASES.get(key, key), f, value


def schema() -> list[dict]:
    """Every accepted key with its type, default, description and source."""
    return [
        {"key": k, "type": type(v).__name__, "default": v, "doc": f.metadata.get("doc", ""),
         "source": f.metadata.get("source", "")}
        for k, f, v in _walk(ExperimentConfig())
    ]


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigValidationError(f"{key}: expected bool, got {value!r}", [key])
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(f"{key}: expected int, got {value!r}", [key])
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(f"{key}: expected float, got {value!r}", [key])
        return float(value)
    if not isinstance(value, str):
        raise ConfigValidationError(f"{key}: expected string, got {value!r}", [key])
    return value


def from_flat(values: dict[str, Any]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    known = {k: v for k, _, v in _walk(cfg)}
    unknown = sorted(k for k in values if k not in known)
    if unknown:
        raise ConfigValidationError(f"unknown config keys: {', '.join(unknown)}", unknown)
    for key, value in values.items():
        value = _coerce(key, value, known[key])
        *path, attr = _REVERSE.get(key, key).split(".")
        target = cfg
        for p in path:
            target = getattr(target, p)
        setattr(target, attr, value)
    return cfg.validate()


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigValidationError(f"config syntax error: {exc}") from exc
    return from_flat(_flatten(raw))


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    return json.dumps(value)


def dumps(cfg: ExperimentConfig) -> str:
    """Full snapshot, one ``key = value`` line per schema key."""
    return "".join(f"{k} = {_fmt(v)}\n" for k, _, v in _walk(cfg))


def to_flat(cfg: ExperimentConfig) -> dict[str, Any]:
    return {k: v for k, _, v in _walk(cfg)}


def schema_markdown() -> str:
    lines = ["| key | type | default | description | source |", "|---|---|---|---|---|"]
    for row in schema():
        doc = row["doc"].replace("|", "\\|")
        lines.append(f"| `{row['key']}` | {row['type']} | `{_fmt(row['default'])}` | {doc} | {row['source']} |")
    return "\n".join(lines) + "\n"
