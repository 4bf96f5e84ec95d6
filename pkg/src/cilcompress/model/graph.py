"""Layered network description with explicit channel structure.

A :class:`ModelGraph` is a list of nodes in topological order.  Each node
names its inputs, so residual junctions and depthwise convolutions are visible
to the pruning code, which needs to know which batch-norm channels can be
removed and which downstream weights consume them.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

NODE_KINDS = ("input", "conv", "bn", "act", "pool", "add", "flatten", "linear")
HEAD = "head"


class ShapeError(ValueError):
    pass


class UnsupportedArchitectureError(ValueError):
    pass


class HeadOverlapError(ValueError):
    pass


@dataclass
class Node:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs), "attrs": dict(self.attrs)}

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        return cls(d["name"], d["kind"], tuple(d["inputs"]), dict(d["attrs"]))


def _key(name: str) -> str:
    return name.replace(".", "__")


def _make_module(node: Node) -> nn.Module | None:
    a = node.attrs
    if node.kind == "conv":
        return nn.Conv2d(
            a["in_ch"], a["out_ch"], a["kernel"], a["stride"], a["padding"], groups=a["groups"], bias=a["bias"]
        )
    if node.kind == "bn":
        return nn.BatchNorm2d(a["channels"], eps=a.get("eps", 1e-5))
    if node.kind == "linear":
        lin = nn.Linear(a["in_f"], max(a["out_f"], 1), bias=a["bias"])
        if a["out_f"] == 0:
            # nn.Linear cannot initialise a zero-width weight
            lin.weight = nn.Parameter(torch.empty(0, a["in_f"]))
            if a["bias"]:
                lin.bias = nn.Parameter(torch.empty(0))
            lin.out_features = 0
        return lin
    return None


class ModelGraph(nn.Module):
    """Executable DAG of conv/bn/act/pool/add/flatten/linear nodes.

    The final node must be the linear classifier named ``head``; its input is
    the feature vector returned alongside the logits.
    """

    def __init__(self, nodes: list[Node], arch: str = "custom", input_shape=(3, 32, 32)):
        super().__init__()
        self.nodes = [Node(n.name, n.kind, tuple(n.inputs), dict(n.attrs)) for n in nodes]
        self.arch = arch
        self.input_shape = tuple(int(v) for v in input_shape)
        self._validate()
        self.layers = nn.ModuleDict()
        for n in self.nodes:
            m = _make_module(n)
            if m is not None:
                self.layers[_key(n.name)] = m

    def _validate(self) -> None:
        seen = set()
        if not self.nodes or self.nodes[0].kind != "input":
            raise ValueError("first node must be the input")
        for n in self.nodes:
            if n.kind not in NODE_KINDS:
                raise ValueError(f"unknown node kind {n.kind!r}")
            if n.name in seen:
                raise ValueError(f"duplicate node name {n.name!r}")
            missing = [i for i in n.inputs if i not in seen]
            if missing:
                raise ValueError(f"node {n.name!r} reads undefined {missing}")
            seen.add(n.name)
        last = self.nodes[-1]
        if last.name != HEAD or last.kind != "linear":
            raise ValueError("last node must be the linear 'head'")
        self.node_shapes()  # raises on inconsistent channel counts

    # -- structure ---------------------------------------------------------

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def module(self, name: str) -> nn.Module:
        return self.layers[_key(name)]

    def successors(self) -> dict[str, list[str]]:
        succ: dict[str, list[str]] = {n.name: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                succ[i].append(n.name)
        return succ

    @property
    def head(self) -> nn.Linear:
        return self.module(HEAD)

    @property
    def num_classes(self) -> int:
        return self.nodes[-1].attrs["out_f"]

    @property
    def feature_dim(self) -> int:
        return self.nodes[-1].attrs["in_f"]

    def node_shapes(self, input_shape=None) -> dict[str, tuple[int, ...]]:
        """Static output shape (C, H, W) or (F,) of every node for one sample."""
        c, h, w = input_shape or self.input_shape
        shapes: dict[str, tuple[int, ...]] = {}
        for n in self.nodes:
            a = n.attrs
            src = shapes[n.inputs[0]] if n.inputs else None
            if n.kind == "input":
                if a["channels"] != c:
                    raise ShapeError(f"input expects {a['channels']} channels, got {c}")
                shapes[n.name] = (c, h, w)
            elif n.kind == "conv":
                if src[0] != a["in_ch"]:
                    raise ShapeError(f"{n.name}: expects {a['in_ch']} channels, got {src[0]}")
                k, s, p = a["kernel"], a["stride"], a["padding"]
                ho, wo = (src[1] + 2 * p - k) // s + 1, (src[2] + 2 * p - k) // s + 1
                if ho < 1 or wo < 1:
                    raise ShapeError(f"{n.name}: spatial size collapses to {ho}x{wo}")
                shapes[n.name] = (a["out_ch"], ho, wo)
            elif n.kind == "bn":
                if src[0] != a["channels"]:
                    raise ShapeError(f"{n.name}: expects {a['channels']} channels, got {src[0]}")
                shapes[n.name] = src
            elif n.kind == "act":
                shapes[n.name] = src
            elif n.kind == "pool":
                if a["mode"] == "gavg":
                    shapes[n.name] = (src[0], 1, 1)
                else:
                    k, s = a["kernel"], a["stride"]
                    shapes[n.name] = (src[0], (src[1] - k) // s + 1, (src[2] - k) // s + 1)
            elif n.kind == "add":
                others = [shapes[i] for i in n.inputs]
                if any(o != others[0] for o in others):
                    raise ShapeError(f"{n.name}: add of mismatched shapes {others}")
                shapes[n.name] = others[0]
            elif n.kind == "flatten":
                shapes[n.name] = (int(np.prod(src)),)
            elif n.kind == "linear":
                if src != (a["in_f"],):
                    raise ShapeError(f"{n.name}: expects ({a['in_f']},), got {src}")
                shapes[n.name] = (a["out_f"],)
        return shapes

    # -- execution ---------------------------------------------------------

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != self.input_shape[0]:
            raise ShapeError(f"expected (N, {self.input_shape[0]}, H, W) input, got {tuple(x.shape)}")
        out: dict[str, torch.Tensor] = {}
        for n in self.nodes:
            a = n.attrs
            if n.kind == "input":
                y = x
            elif n.kind in ("conv", "bn", "linear"):
                y = self.layers[_key(n.name)](out[n.inputs[0]])
            elif n.kind == "act":
                y = F.relu6(out[n.inputs[0]]) if a["fn"] == "relu6" else F.relu(out[n.inputs[0]])
            elif n.kind == "pool":
                src = out[n.inputs[0]]
                if a["mode"] == "gavg":
                    y = src.mean(dim=(2, 3), keepdim=True)
                elif a["mode"] == "max":
                    y = F.max_pool2d(src, a["kernel"], a["stride"])
                else:
                    y = F.avg_pool2d(src, a["kernel"], a["stride"])
            elif n.kind == "add":
                y = out[n.inputs[0]]
                for other in n.inputs[1:]:
                    y = y + out[other]
            elif n.kind == "flatten":
                y = torch.flatten(out[n.inputs[0]], 1)
            out[n.name] = y
        return out[HEAD], out[self.nodes[-1].inputs[0]]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[1]

    # -- mutation ----------------------------------------------------------

    def extend_head(self, num_new: int, std: float = 0.01, generator: torch.Generator | None = None) -> "ModelGraph":
        """Append ``num_new`` output rows; existing rows are kept bit-identical."""
        if num_new < 0:
            raise ValueError("num_new must be >= 0")
        if num_new == 0:
            return self
        old = self.head
        in_f, n_old = old.in_features, self.num_classes
        new = nn.Linear(in_f, n_old + num_new, bias=old.bias is not None)
        with torch.no_grad():
            w = torch.empty(num_new, in_f, dtype=old.weight.dtype).normal_(0.0, std, generator=generator)
            new.weight.copy_(torch.cat([old.weight.detach(), w]))
            if old.bias is not None:
                new.bias.copy_(torch.cat([old.bias.detach(), torch.zeros(num_new, dtype=old.bias.dtype)]))
        new = new.to(old.weight.dtype)
        self.layers[_key(HEAD)] = new
        self.nodes[-1].attrs["out_f"] = n_old + num_new
        return self

    def clone(self) -> "ModelGraph":
        return copy.deepcopy(self)

    # -- (de)serialisation -------------------------------------------------

    def spec(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "nodes": [n.to_dict() for n in self.nodes],
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "ModelGraph":
        return cls([Node.from_dict(d) for d in spec["nodes"]], spec["arch"], spec["input_shape"])

    def param_name(self, node_name: str, param: str) -> str:
        return f"layers.{_key(node_name)}.{param}"

    def backbone_state(self) -> dict[str, torch.Tensor]:
        prefix = f"layers.{_key(HEAD)}."
        return {k: v for k, v in self.state_dict().items() if not k.startswith(prefix)}


def extend_head(model: ModelGraph, new_classes, head_classes=None, generator=None) -> ModelGraph:
    """Grow the head by ``len(new_classes)`` rows.

    ``head_classes`` lists the classes the head already covers; overlap with
    ``new_classes`` is a configuration error.
    """
    new_classes = list(new_classes)
    if head_classes is not None and set(head_classes) & set(new_classes):
        raise HeadOverlapError(f"classes {sorted(set(head_classes) & set(new_classes))} already in head")
    return model.extend_head(len(new_classes), generator=generator)


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------


class GraphBuilder:
    def __init__(self, in_channels: int = 3):
        self.nodes = [Node("input", "input", (), {"channels": in_channels})]
        self.channels = {"input": in_channels}

    def _add(self, node: Node, channels: int) -> str:
        self.nodes.append(node)
        self.channels[node.name] = channels
        return node.name

    def conv(self, name, x, out_ch, kernel=3, stride=1, padding=None, groups=1, bias=False) -> str:
        if padding is None:
            padding = (kernel - 1) // 2
        attrs = dict(
            in_ch=self.channels[x], out_ch=out_ch, kernel=kernel, stride=stride, padding=padding,
            groups=groups, bias=bias,
        )
        return self._add(Node(name, "conv", (x,), attrs), out_ch)

    def bn(self, name, x, eps=1e-5) -> str:
        return self._add(Node(name, "bn", (x,), {"channels": self.channels[x], "eps": eps}), self.channels[x])

    def act(self, name, x, fn="relu") -> str:
        return self._add(Node(name, "act", (x,), {"fn": fn}), self.channels[x])

    def pool(self, name, x, mode="max", kernel=2, stride=None) -> str:
        attrs = {"mode": mode, "kernel": kernel, "stride": stride or kernel}
        return self._add(Node(name, "pool", (x,), attrs), self.channels[x])

    def gavg(self, name, x) -> str:
        return self._add(Node(name, "pool", (x,), {"mode": "gavg"}), self.channels[x])

    def add(self, name, *xs) -> str:
        return self._add(Node(name, "add", tuple(xs), {}), self.channels[xs[0]])

    def flatten(self, name, x) -> str:
        return self._add(Node(name, "flatten", (x,), {}), self.channels[x])

    def linear(self, name, x, out_f, bias=True) -> str:
        attrs = {"in_f": self.channels[x], "out_f": out_f, "bias": bias}
        return self._add(Node(name, "linear", (x,), attrs), out_f)

    def build(self, arch: str, input_shape, num_classes: int = 0) -> ModelGraph:
        last = self.nodes[-1].name
        if self.nodes[-1].kind != "flatten":
            last = self.flatten("flatten", last)
        self.linear(HEAD, last, num_classes)
        model = ModelGraph(self.nodes, arch, input_shape)
        _init_weights(model)
        return model


def _init_weights(model: ModelGraph) -> None:
    for n in model.nodes:
        if n.kind == "conv":
            m = model.module(n.name)
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif n.kind == "bn":
            m = model.module(n.name)
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif n.kind == "linear" and n.attrs["out_f"] > 0:
            m = model.module(n.name)
            nn.init.normal_(m.weight, 0.0, 0.01)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# Channel groups and BN scale view
# ---------------------------------------------------------------------------


@dataclass
class ChannelGroup:
    """Channels created by one conv+BN pair and everything that must shrink with them.

    ``followers`` are depthwise convs and their BNs that carry the same
    channels; ``consumers`` are the convs/linears whose input dimension is
    sliced.
    """

    leader: str  # BN node
    conv: str
    followers: list[str] = field(default_factory=list)
    consumers: list[str] = field(default_factory=list)
    prunable: bool = True
    reason: str = ""


def _is_depthwise(n: Node) -> bool:
    a = n.attrs
    return n.kind == "conv" and a["groups"] > 1 and a["groups"] == a["in_ch"] == a["out_ch"]


def channel_groups(model: ModelGraph, include_stem: bool = False) -> dict[str, ChannelGroup]:
    by_name = {n.name: n for n in model.nodes}
    succ = model.successors()
    shapes = model.node_shapes()
    first_conv = next((n.name for n in model.nodes if n.kind == "conv"), None)
    groups: dict[str, ChannelGroup] = {}
    for n in model.nodes:
        if n.kind != "bn":
            continue
        src = by_name[n.inputs[0]]
        if src.kind != "conv" or src.attrs["groups"] != 1 or len(succ[src.name]) != 1:
            continue
        g = ChannelGroup(n.name, src.name)
        if src.name == first_conv and not include_stem:
            g.prunable, g.reason = False, "stem"
        stack = [n.name]
        while stack:
            cur = stack.pop()
            for s in succ[cur]:
                sn = by_name[s]
                if sn.kind in ("act", "pool"):
                    stack.append(s)
                elif sn.kind == "flatten":
                    if shapes[cur][1:] != (1, 1):
                        g.prunable, g.reason = False, "flatten of spatial map"
                    stack.append(s)
                elif sn.kind == "conv" and sn.attrs["groups"] == 1:
                    g.consumers.append(s)
                elif _is_depthwise(sn):
                    g.followers.append(s)
                    stack.append(s)
                elif sn.kind == "bn" and by_name[sn.inputs[0]].name in g.followers:
                    g.followers.append(s)
                    stack.append(s)
                elif sn.kind == "linear":
                    g.consumers.append(s)
                elif sn.kind == "add":
                    g.prunable, g.reason = False, "add-junction"
                else:
                    g.prunable, g.reason = False, f"unsupported consumer {s}"
        groups[n.name] = g
    return groups


@dataclass
class BNScaleView:
    entries: list[tuple[str, int, float, bool]]
    layers: list[str]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_prunable(self) -> int:
        return sum(1 for e in self.entries if e[3])

    def layer_sizes(self) -> dict[str, int]:
        sizes: dict[str, int] = {}
        for layer, *_ in self.entries:
            sizes[layer] = sizes.get(layer, 0) + 1
        return sizes


def prunable_scales(model: ModelGraph, include_stem: bool = False) -> BNScaleView:
    """All BN channels with |gamma| and whether global pruning may drop them."""
    bns = [n.name for n in model.nodes if n.kind == "bn"]
    if not bns:
        raise UnsupportedArchitectureError(f"{model.arch} has no batch-norm layers")
    groups = channel_groups(model, include_stem)
    entries = []
    for name in bns:
        gamma = model.module(name).weight.detach().abs().double().cpu().numpy()
        ok = name in groups and groups[name].prunable
        entries.extend((name, i, float(v), ok) for i, v in enumerate(gamma))
    return BNScaleView(entries, bns)


def prunable_gammas(model: ModelGraph, include_stem: bool = False) -> list[torch.Tensor]:
    """Scale parameters of the prunable BN layers, for the sparsity penalty."""
    groups = channel_groups(model, include_stem)
    return [model.module(g.leader).weight for g in groups.values() if g.prunable]
