"""Parameter and FLOP accounting.

FLOPs count 2 per multiply-accumulate in conv and linear layers only; BN,
activations, pooling and additions are free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import ModelGraph


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    params: int
    flops: int
    per_layer: list[LayerCost] = field(default_factory=list)
    input_shape: tuple[int, ...] = ()

    @property
    def mparams(self) -> float:
        return self.params / 1e6

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "flops": self.flops,
            "input_shape": list(self.input_shape),
            "per_layer": [vars(lc) for lc in self.per_layer],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        return cls(d["params"], d["flops"], [LayerCost(**lc) for lc in d["per_layer"]], tuple(d["input_shape"]))

    def format_table(self) -> str:
        rows = [(lc.name, lc.kind, f"{lc.params:,}", f"{lc.flops:,}") for lc in self.per_layer if lc.params or lc.flops]
        rows.append(("TOTAL", "", f"{self.params:,}", f"{self.flops:,}"))
        widths = [max(len(r[i]) for r in rows + [("layer", "kind", "params", "flops")]) for i in range(4)]
        lines = ["  ".join(h.ljust(w) if i < 2 else h.rjust(w) for i, (h, w) in enumerate(zip(("layer", "kind", "params", "flops"), widths)))]
        for r in rows:
            lines.append("  ".join(v.ljust(w) if i < 2 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))
        lines.append(f"params: {self.mparams:.2f} M   FLOPs: {self.gflops:.4f} G   input: {'x'.join(map(str, self.input_shape))}")
        return "\n".join(lines)


def _layer_params(node) -> int:
    a = node.attrs
    if node.kind == "conv":
        return a["kernel"] ** 2 * (a["in_ch"] // a["groups"]) * a["out_ch"] + (a["out_ch"] if a["bias"] else 0)
    if node.kind == "bn":
        return 2 * a["channels"]
    if node.kind == "linear":
        return a["in_f"] * a["out_f"] + (a["out_f"] if a["bias"] else 0)
    return 0


def cost_report(model: ModelGraph, input_shape=None) -> CostReport:
    input_shape = tuple(input_shape or model.input_shape)
    shapes = model.node_shapes(input_shape)
    per_layer = []
    for n in model.nodes:
        a = n.attrs
        flops = 0
        if n.kind == "conv":
            _, ho, wo = shapes[n.name]
            flops = 2 * a["kernel"] ** 2 * (a["in_ch"] // a["groups"]) * a["out_ch"] * ho * wo
        elif n.kind == "linear":
            flops = 2 * a["in_f"] * a["out_f"]
        per_layer.append(LayerCost(n.name, n.kind, _layer_params(n), flops))
    return CostReport(
        sum(lc.params for lc in per_layer), sum(lc.flops for lc in per_layer), per_layer, input_shape
    )


def count_params(model: ModelGraph) -> int:
    return cost_report(model).params


def count_flops(model: ModelGraph, input_shape=None) -> int:
    return cost_report(model, input_shape).flops
