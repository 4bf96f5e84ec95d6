import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from cilcompress.model import (
    GraphBuilder,
    ModelGraph,
    build_model,
    channel_groups,
    cost_report,
    extend_head,
    load_model,
    load_pretrained,
    prunable_scales,
    read_weights,
    save_weights,
)
from cilcompress.model.graph import HeadOverlapError, ShapeError, UnsupportedArchitectureError
from cilcompress.model.ncm import (
    DegenerateMeanError,
    MissingExemplarError,
    class_means_from_features,
    ncm_predict,
)
from cilcompress.model.weights import IncompatibleWeightsError, WeightsFormatError


def hook_cost(model: ModelGraph, shape):
    """Independent FLOP/param oracle: forward hooks on torch modules."""
    flops = []

    def conv_hook(m, inp, out):
        k = m.kernel_size[0] * m.kernel_size[1] * (m.in_channels // m.groups)
        flops.append(2 * k * out.numel())

    def lin_hook(m, inp, out):
        flops.append(2 * m.in_features * out.numel())

    hs = []
    for m in model.modules():
        if isinstance(m, torch.nn.Conv2d):
            hs.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, torch.nn.Linear):
            hs.append(m.register_forward_hook(lin_hook))
    model.eval()
    with torch.no_grad():
        model(torch.zeros(1, *shape))
    for h in hs:
        h.remove()
    params = sum(p.numel() for p in model.parameters())
    return params, sum(flops)


@pytest.mark.parametrize("arch,shape", [("toycnn", (3, 16, 16)), ("resnet18", (3, 32, 32)),
                                        ("mobilenetv2", (3, 32, 32)), ("resnet34", (3, 32, 32))])
def test_cost_matches_hook_oracle(arch, shape):
    model = build_model(arch, 10, shape)
    rep = cost_report(model)
    assert (rep.params, rep.flops) == hook_cost(model, shape)
    assert sum(lc.params for lc in rep.per_layer) == rep.params


def test_cost_hand_computed_tiny_graph():
    b = GraphBuilder(3)
    x = b.conv("c", "input", 4, kernel=3)  # 3*4*9 = 108 params, 16 positions at 4x4 in
    x = b.bn("b", x)
    x = b.gavg("g", x)
    m = b.build("tiny", (3, 4, 4), num_classes=2)
    rep = cost_report(m)
    # conv 108 + bn 8 + head 4*2+2
    assert rep.params == 108 + 8 + 10
    assert rep.flops == 2 * (108 * 16) + 2 * 8


def test_forward_returns_logits_and_features():
    m = build_model("toycnn", 5, (3, 16, 16))
    logits, feats = m(torch.randn(2, 3, 16, 16))
    assert logits.shape == (2, 5)
    assert feats.shape == (2, m.feature_dim)
    with pytest.raises(ShapeError):
        m(torch.randn(2, 1, 16, 16))


def test_extend_head_keeps_old_rows_and_zero_width_start():
    m = build_model("toycnn", 0, (3, 16, 16))
    assert m.num_classes == 0
    assert m(torch.randn(1, 3, 16, 16))[0].shape == (1, 0)
    extend_head(m, [0, 1, 2])
    w = m.head.weight.detach().clone()
    b = m.head.bias.detach().clone()
    extend_head(m, [3, 4], head_classes=[0, 1, 2], generator=torch.Generator().manual_seed(0))
    assert m.num_classes == 5
    assert torch.equal(m.head.weight[:3], w) and torch.equal(m.head.bias[:3], b)
    assert torch.all(m.head.bias[3:] == 0)
    with pytest.raises(HeadOverlapError):
        extend_head(m, [4, 5], head_classes=[0, 1, 2, 3, 4])


def test_spec_roundtrip_and_clone_independence():
    m = build_model("resnet18", 4, (3, 32, 32))
    m2 = ModelGraph.from_spec(m.spec())
    m2.load_state_dict(m.state_dict())
    x = torch.randn(2, 3, 32, 32)
    m.eval(), m2.eval()
    assert torch.equal(m(x)[0], m2(x)[0])
    c = m.clone()
    with torch.no_grad():
        c.head.weight.add_(1.0)
    assert not torch.equal(c.head.weight, m.head.weight)


def test_invalid_graphs_rejected():
    b = GraphBuilder(3)
    x = b.conv("c", "input", 4)
    with pytest.raises(ValueError):
        ModelGraph(b.nodes, "bad", (3, 8, 8))  # no head
    with pytest.raises(ValueError):
        build_model("vgg", 2, (3, 32, 32))


def test_channel_groups_resnet_and_mobilenet():
    r = build_model("resnet18", 2, (3, 32, 32))
    g = channel_groups(r)
    prunable = [k for k, v in g.items() if v.prunable]
    # only block-internal bn1 layers are prunable in a basic-block ResNet
    assert prunable and all(k.endswith("bn1") for k in prunable)
    assert not g["stem.bn"].prunable if "stem.bn" in g else True
    m = build_model("mobilenetv2", 2, (3, 32, 32))
    gm = channel_groups(m)
    expand = [v for v in gm.values() if v.prunable and v.followers]
    assert expand, "expansion groups should carry depthwise followers"
    for v in expand:
        kinds = {m.node(f).kind for f in v.followers}
        assert kinds == {"conv", "bn"}


def test_prunable_scales_requires_bn():
    b = GraphBuilder(3)
    x = b.conv("c", "input", 4)
    x = b.gavg("g", x)
    m = b.build("nobn", (3, 8, 8), 2)
    with pytest.raises(UnsupportedArchitectureError):
        prunable_scales(m)


def test_weights_roundtrip_and_checksum(tmp_path):
    m = build_model("toycnn", 3, (3, 16, 16))
    m.train()
    m(torch.randn(4, 3, 16, 16))  # populate running stats
    p = tmp_path / "m.weights"
    save_weights(m, p, {"note": "x"})
    spec, state, meta = read_weights(p)
    assert meta == {"note": "x"} and spec == m.spec()
    m2 = load_model(p)
    for k, v in m.state_dict().items():
        assert torch.equal(state[k], v) and torch.equal(m2.state_dict()[k], v)
    raw = bytearray(p.read_bytes())
    raw[100] ^= 0xFF
    bad = tmp_path / "bad.weights"
    bad.write_bytes(bytes(raw))
    with pytest.raises(WeightsFormatError):
        read_weights(bad)
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(WeightsFormatError):
        read_weights(tmp_path / "junk")


def test_load_pretrained_ignores_head_and_names_mismatch(tmp_path):
    src = build_model("toycnn", 7, (3, 16, 16))
    p = tmp_path / "src.weights"
    save_weights(src, p)
    dst = build_model("toycnn", 0, (3, 16, 16))
    load_pretrained(dst, p)
    assert torch.equal(dst.module("block0.conv").weight, src.module("block0.conv").weight)
    assert dst.num_classes == 0
    wide = build_model("toycnn", 0, (3, 16, 16), width=2)
    with pytest.raises(IncompatibleWeightsError, match="block0"):
        load_pretrained(wide, p)


def test_ncm_predicts_nearest_mean_and_breaks_ties_low():
    means = class_means_from_features({5: np.array([[1.0, 0.0]]), 2: np.array([[0.0, 2.0], [0.0, 1.0]])})
    assert means.classes.tolist() == [2, 5]
    pred = ncm_predict(np.array([[3.0, 0.1], [0.1, 3.0], [1.0, 1.0]]), means)
    assert pred.tolist() == [5, 2, 2]
    with pytest.raises(DegenerateMeanError):
        class_means_from_features({0: np.array([[1.0, 0.0], [-1.0, 0.0]])})
    with pytest.raises(MissingExemplarError):
        class_means_from_features({0: np.zeros((0, 2))})


@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 2**16))
def test_property_ncm_matches_bruteforce(k, dim, seed):
    rng = np.random.default_rng(seed)
    feats = {c: rng.standard_normal((3, dim)) + 3 * rng.standard_normal(dim) for c in range(k)}
    means = class_means_from_features(feats)
    q = rng.standard_normal((10, dim))
    pred = ncm_predict(q, means)
    for i, x in enumerate(q):
        xn = x / np.linalg.norm(x)
        best = min(range(k), key=lambda c: (float(np.sum((xn - means.means[c]) ** 2)), c))
        assert pred[i] == best
