"""Built-in backbones expressed as :class:`ModelGraph` constructors."""

from __future__ import annotations

from .graph import GraphBuilder, ModelGraph, UnsupportedArchitectureError


def toy_cnn(width: int = 16, num_classes: int = 0, input_shape=(3, 16, 16), num_blocks: int = 4) -> ModelGraph:
    """conv-bn-relu blocks with doubling width; 2x2 max-pool between blocks."""
    b = GraphBuilder(input_shape[0])
    x = "input"
    for i in range(num_blocks):
        ch = width * 2**i
        x = b.conv(f"block{i}.conv", x, ch, 3)
        x = b.bn(f"block{i}.bn", x)
        x = b.act(f"block{i}.relu", x)
        if i < num_blocks - 1:
            x = b.pool(f"block{i}.pool", x, "max", 2)
    x = b.gavg("gap", x)
    return b.build("toycnn", input_shape, num_classes)


def _basic_block(b: GraphBuilder, name: str, x: str, planes: int, stride: int) -> str:
    out = b.conv(f"{name}.conv1", x, planes, 3, stride)
    out = b.bn(f"{name}.bn1", out)
    out = b.act(f"{name}.relu1", out)
    out = b.conv(f"{name}.conv2", out, planes, 3, 1)
    out = b.bn(f"{name}.bn2", out)
    short = x
    if stride != 1 or b.channels[x] != planes:
        short = b.conv(f"{name}.down.conv", x, planes, 1, stride, padding=0)
        short = b.bn(f"{name}.down.bn", short)
    out = b.add(f"{name}.add", out, short)
    return b.act(f"{name}.relu2", out)


def resnet(layers=(3, 4, 6, 3), width: int = 64, num_classes: int = 0, input_shape=(3, 32, 32),
           arch: str = "resnet") -> ModelGraph:
    """ResNet with basic blocks and the CIFAR stem (3x3 conv, no max-pool)."""
    b = GraphBuilder(input_shape[0])
    x = b.conv("stem.conv", "input", width, 3, 1)
    x = b.bn("stem.bn", x)
    x = b.act("stem.relu", x)
    planes = width
    for li, n in enumerate(layers):
        planes = width * 2**li
        for bi in range(n):
            stride = 2 if (li > 0 and bi == 0) else 1
            x = _basic_block(b, f"layer{li + 1}.{bi}", x, planes, stride)
    x = b.gavg("gap", x)
    return b.build(arch, input_shape, num_classes)


def resnet34(num_classes: int = 0, input_shape=(3, 32, 32), width: int = 64) -> ModelGraph:
    return resnet((3, 4, 6, 3), width, num_classes, input_shape, "resnet34")


def resnet18(num_classes: int = 0, input_shape=(3, 32, 32), width: int = 64) -> ModelGraph:
    return resnet((2, 2, 2, 2), width, num_classes, input_shape, "resnet18")


def _make_divisible(v: float, divisor: int = 8, min_value: int | None = None) -> int:
    min_value = min_value or divisor
    new_v = max(min_value, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


MOBILENETV2_SETTING = (
    # expand ratio, channels, repeats, first stride
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def mobilenetv2(width_mult: float = 1.0, num_classes: int = 0, input_shape=(3, 32, 32)) -> ModelGraph:
    """MobileNetV2 with the ImageNet stride layout (stride-2 stem)."""
    b = GraphBuilder(input_shape[0])
    in_ch = _make_divisible(32 * width_mult)
    last_ch = _make_divisible(1280 * max(1.0, width_mult))
    x = b.conv("stem.conv", "input", in_ch, 3, 2)
    x = b.bn("stem.bn", x)
    x = b.act("stem.relu", x, "relu6")
    idx = 0
    for t, c, n, s in MOBILENETV2_SETTING:
        out_ch = _make_divisible(c * width_mult)
        for i in range(n):
            stride = s if i == 0 else 1
            name = f"block{idx}"
            hidden = int(round(b.channels[x] * t))
            y = x
            if t != 1:
                y = b.conv(f"{name}.expand.conv", y, hidden, 1, padding=0)
                y = b.bn(f"{name}.expand.bn", y)
                y = b.act(f"{name}.expand.relu", y, "relu6")
            y = b.conv(f"{name}.dw.conv", y, hidden, 3, stride, groups=hidden)
            y = b.bn(f"{name}.dw.bn", y)
            y = b.act(f"{name}.dw.relu", y, "relu6")
            y = b.conv(f"{name}.project.conv", y, out_ch, 1, padding=0)
            y = b.bn(f"{name}.project.bn", y)
            if stride == 1 and b.channels[x] == out_ch:
                y = b.add(f"{name}.add", y, x)
            x = y
            idx += 1
    x = b.conv("last.conv", x, last_ch, 1, padding=0)
    x = b.bn("last.bn", x)
    x = b.act("last.relu", x, "relu6")
    x = b.gavg("gap", x)
    arch = "mobilenetv2" if width_mult == 1.0 else f"mobilenetv2_x{width_mult:g}"
    return b.build(arch, input_shape, num_classes)


ARCHITECTURES = {
    "toycnn": toy_cnn,
    "resnet18": resnet18,
    "resnet34": resnet34,
    "mobilenetv2": mobilenetv2,
}


def build_model(arch: str, num_classes: int = 0, input_shape=(3, 32, 32), width: float = 1.0) -> ModelGraph:
    """Construct a built-in architecture; ``width`` scales channel counts."""
    if arch == "toycnn":
        return toy_cnn(int(round(16 * width)), num_classes, input_shape)
    if arch in ("resnet18", "resnet34"):
        return ARCHITECTURES[arch](num_classes, input_shape, int(round(64 * width)))
    if arch.startswith("mobilenetv2"):
        return mobilenetv2(width, num_classes, input_shape)
    raise UnsupportedArchitectureError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
