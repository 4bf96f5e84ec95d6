from .archs import ARCHITECTURES, build_model
from .cost import CostReport, cost_report, count_flops, count_params
from .graph import GraphBuilder, ModelGraph, channel_groups, extend_head, prunable_scales
from .weights import load_model, load_pretrained, read_weights, save_weights

__all__ = [
    "ARCHITECTURES", "build_model", "CostReport", "cost_report", "count_flops", "count_params",
    "GraphBuilder", "ModelGraph", "channel_groups", "extend_head", "prunable_scales",
    "load_model", "load_pretrained", "read_weights", "save_weights",
]
