"""Global BN-scale channel pruning, structural surgery, and the pre-/post-pruning pipelines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .model.graph import BNScaleView, ModelGraph, Node, channel_groups, prunable_scales


class InfeasibleRatioError(ValueError):
    def __init__(self, msg: str, max_achievable: int):
        super().__init__(msg)
        self.max_achievable = max_achievable


class SurgeryError(ValueError):
    pass


@dataclass
class ChannelMask:
    keep: dict[str, np.ndarray]  # prunable BN layer -> boolean keep vector
    ratio: float
    channels_dropped: int
    requested: int
    shortfall: int = 0

    def kept_indices(self) -> dict[str, list[int]]:
        return {k: np.flatnonzero(v).tolist() for k, v in self.keep.items()}

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "requested": self.requested,
            "channels_dropped": self.channels_dropped,
            "shortfall": self.shortfall,
            "kept": self.kept_indices(),
            "sizes": {k: int(len(v)) for k, v in self.keep.items()},
        }


@dataclass
class PruningPlan:
    strategy: str
    ratio: float
    sparsity_epochs: int
    recovery_epochs: int
    per_layer_cap: float = 0.9
    include_stem: bool = False
    mu: float = 0.1
    recovery_sparsity: bool = False

    def __post_init__(self):
        if self.strategy not in ("pre", "post"):
            raise ValueError(f"strategy must be 'pre' or 'post', got {self.strategy!r}")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"pruning ratio {self.ratio} outside (0, 1)")


def global_prune_mask(view: BNScaleView, ratio: float, per_layer_cap: float = 0.9) -> ChannelMask:
    """Drop the floor(ratio * N) prunable channels of smallest |gamma| network-wide.

    Candidates are visited in (|gamma|, layer order, channel) order.  A drop
    that would exceed ``per_layer_cap`` of a layer or leave it empty is skipped
    and the next candidate is promoted.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"pruning ratio {ratio} outside (0, 1)")
    if len(view) == 0:
        raise ValueError("empty scale view")
    layer_pos = {name: i for i, name in enumerate(view.layers)}
    sizes = view.layer_sizes()
    cand = [(abs(g), layer_pos[layer], ch, layer) for layer, ch, g, ok in view.entries if ok]
    keep = {layer: np.ones(sizes[layer], dtype=bool) for layer in {c[3] for c in cand}}
    target = math.floor(ratio * len(cand))
    limit = {layer: min(math.floor(per_layer_cap * sizes[layer]), sizes[layer] - 1) for layer in keep}
    max_achievable = sum(max(v, 0) for v in limit.values())
    if target > max_achievable:
        raise InfeasibleRatioError(
            f"ratio {ratio} needs {target} drops but per-layer caps allow at most {max_achievable}",
            max_achievable,
        )
    dropped = {layer: 0 for layer in keep}
    n = 0
    for _, _, ch, layer in sorted(cand, key=lambda c: (c[0], c[1], c[2])):
        if n == target:
            break
        if dropped[layer] + 1 > limit[layer]:
            continue
        keep[layer][ch] = False
        dropped[layer] += 1
        n += 1
    return ChannelMask(keep, ratio, n, target, target - n)


def _state_key(model: ModelGraph, node: str, param: str) -> str:
    return model.param_name(node, param)


def apply_surgery(model: ModelGraph, mask: ChannelMask, include_stem: bool = False) -> ModelGraph:
    """Physically remove masked channels, returning a new, smaller graph."""
    groups = channel_groups(model, include_stem)
    for layer, keep in mask.keep.items():
        g = groups.get(layer)
        if g is None or not g.prunable:
            raise SurgeryError(f"mask touches non-prunable layer {layer!r}")
        if len(keep) != model.node(layer).attrs["channels"]:
            raise SurgeryError(f"mask for {layer!r} has {len(keep)} entries, layer has {model.node(layer).attrs['channels']}")
        if not keep.any():
            raise SurgeryError(f"mask empties layer {layer!r}")
    nodes = {n.name: Node(n.name, n.kind, n.inputs, dict(n.attrs)) for n in model.nodes}
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    def slice_param(node: str, param: str, idx: torch.Tensor, dim: int) -> None:
        key = _state_key(model, node, param)
        if key in state:
            state[key] = state[key].index_select(dim, idx)

    for layer, keep in mask.keep.items():
        if keep.all():
            continue
        g = groups[layer]
        idx = torch.as_tensor(np.flatnonzero(keep), dtype=torch.long)
        k = len(idx)
        for p in ("weight", "bias"):
            slice_param(g.conv, p, idx, 0)
        nodes[g.conv].attrs["out_ch"] = k
        for name in [g.leader] + [f for f in g.followers if nodes[f].kind == "bn"]:
            for p in ("weight", "bias", "running_mean", "running_var"):
                slice_param(name, p, idx, 0)
            nodes[name].attrs["channels"] = k
        for name in g.followers:
            if nodes[name].kind == "conv":
                for p in ("weight", "bias"):
                    slice_param(name, p, idx, 0)
                nodes[name].attrs.update(in_ch=k, out_ch=k, groups=k)
        for name in g.consumers:
            slice_param(name, "weight", idx, 1)
            if nodes[name].kind == "conv":
                nodes[name].attrs["in_ch"] = k
            else:
                nodes[name].attrs["in_f"] = k
    pruned = ModelGraph([nodes[n.name] for n in model.nodes], model.arch, model.input_shape)
    pruned.load_state_dict(state)
    pruned.train(model.training)
    return pruned.to(next(model.parameters()).dtype)


def zero_masked(model: ModelGraph, mask: ChannelMask, include_stem: bool = False) -> ModelGraph:
    """Copy of ``model`` with the BN scale and shift of every removed channel set to 0.

    Depthwise follower BNs are zeroed too, since surgery removes their channels as well.
    """
    groups = channel_groups(model, include_stem)
    out = model.clone()
    with torch.no_grad():
        for layer, keep in mask.keep.items():
            drop = torch.as_tensor(np.flatnonzero(~keep), dtype=torch.long)
            g = groups[layer]
            for name in [g.leader] + [f for f in g.followers if model.node(f).kind == "bn"]:
                bn = out.module(name)
                bn.weight[drop] = 0.0
                bn.bias[drop] = 0.0
    return out


def prune_model(model: ModelGraph, ratio: float, per_layer_cap: float = 0.9,
                include_stem: bool = False) -> tuple[ModelGraph, ChannelMask]:
    view = prunable_scales(model, include_stem)
    mask = global_prune_mask(view, ratio, per_layer_cap)
    return apply_surgery(model, mask, include_stem), mask


# -- pipelines -----------------------------------------------------------------------


def plan_from_config(cfg, strategy: str) -> PruningPlan:
    p = cfg.prune
    return PruningPlan(strategy, p.ratio, cfg.sparsity_epochs, cfg.recovery_epochs, p.per_layer_cap,
                       p.include_stem, p.mu, p.recovery_sparsity)


def _prune_state_model(model: ModelGraph, plan: PruningPlan, events, task: int, role: str):
    pruned, mask = prune_model(model, plan.ratio, plan.per_layer_cap, plan.include_stem)
    events.emit("prune", task=task, role=role, ratio=plan.ratio, dropped=mask.channels_dropped,
                requested=mask.requested, shortfall=mask.shortfall)
    return pruned, mask


def pre_pruning_pipeline(state, stream, plan: PruningPlan, cfg, events, on_task_end=None):
    """Align on task 1 with the l1 penalty, prune once, recover, then run CIL on the compact model.

    Returns ``(CILResult, CostReport, ChannelMask)``; the cost report describes
    the pruned model with its final head.
    """
    from . import trainers as tr
    from .model.cost import cost_report

    if plan.strategy != "pre":
        raise ValueError("pre_pruning_pipeline needs a 'pre' plan")
    result = tr.CILResult(tr.new_matrices(state, stream), state)
    events.emit("task_start", task=1, role=state.role)
    tr.begin_task(state, stream, 1, cfg.seed)
    align = tr.LossPlan(tau=cfg.kd.temperature, mu=plan.mu, include_stem=plan.include_stem)
    tr.train_task(state, stream, 1, cfg, events, align, epochs=plan.sparsity_epochs, tag="sparsity")
    state.model, mask = _prune_state_model(state.model, plan, events, 1, state.role)
    recover = tr.LossPlan(tau=cfg.kd.temperature, mu=plan.mu if plan.recovery_sparsity else 0.0,
                          include_stem=plan.include_stem)
    tr.train_task(state, stream, 1, cfg, events, recover, epochs=plan.recovery_epochs, tag="recovery")
    tr.finish_task(state, stream, 1)
    tr._record(result.matrices, state, stream, 1, events, state.role)
    if on_task_end:
        on_task_end(1, state)
    events.emit("task_end", task=1, role=state.role)
    tr.run_cil(state, stream, cfg, events, start_task=2, result=result, on_task_end=on_task_end)
    return result, cost_report(state.model), mask


def post_pruning_pipeline(state, stream, plan: PruningPlan, cfg, events, on_task_end=None):
    """CIL on the full model; after each task a pruned, recovered clone is evaluated.

    The accuracy matrix comes from the clones.  Returns ``(CILResult,
    [CostReport per task])``; the full model's own matrices are kept in
    ``result.extra["unpruned_matrices"]``.
    """
    from . import trainers as tr
    from .model.cost import cost_report

    if plan.strategy != "post":
        raise ValueError("post_pruning_pipeline needs a 'post' plan")
    pruned_mats = tr.new_matrices(state, stream)
    costs = []
    masks = []

    def after_task(t, st):
        before = tr.fingerprint(st.model)
        pruned, mask = _prune_state_model(st.model.clone(), plan, events, t, "pruned")
        clone = tr.MethodState(pruned, st.method, "pruned", memory=st.memory, seen=list(st.seen))
        recover = tr.LossPlan(
            composition="mixed" if st.replay else "plain", tau=cfg.kd.temperature,
            mu=plan.mu if plan.recovery_sparsity else 0.0, include_stem=plan.include_stem,
        )
        tr.train_task(clone, stream, t, cfg, events, recover, epochs=plan.recovery_epochs, tag="recovery")
        tr._record(pruned_mats, clone, stream, t, events, "pruned")
        costs.append(cost_report(pruned))
        masks.append(mask)
        if tr.fingerprint(st.model) != before:
            raise RuntimeError(f"pruning a clone altered the full model on task {t}")
        if on_task_end:
            on_task_end(t, st, pruned)

    mu = plan.mu if cfg.prune.post_sparsity else 0.0
    large = tr.run_cil(state, stream, cfg, events, mu=mu, on_task_end=after_task)
    result = tr.CILResult(pruned_mats, state, extra={"unpruned_matrices": large.matrices, "masks": masks})
    return result, costs
