"""Graph builders for the CIFAR ResNet family, NewNet and WideResNet.

Node ids follow ``stage{s}.block{b}.<layer>``; the last node of every
block is ``stage{s}.block{b}.out``, which :func:`stage_outputs` relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import LayerNode, NetworkGraph

__all__ = [
    "StageSpec",
    "build_resnet",
    "build_newnet",
    "build_wideresnet",
    "build_arch",
    "stage_outputs",
    "ARCH_NAMES",
]


@dataclass(frozen=True)
class StageSpec:
    blocks_per_stage: int
    stage_channels: tuple[int, ...]
    combine_mode: str = "add"
    reduce_at_stage_entry: tuple[bool, ...] = (False, True, True)

    def __post_init__(self):
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be positive")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage channel counts must be positive")
        if len(self.reduce_at_stage_entry) != len(self.stage_channels):
            raise ValueError("need one reduce flag per stage")
        if self.reduce_at_stage_entry and self.reduce_at_stage_entry[0]:
            raise ValueError("the first stage runs at stride 1")
        if self.combine_mode not in ("add", "max"):
            raise ValueError(f"combine_mode must be 'add' or 'max', got {self.combine_mode!r}")


class _GraphBuilder:
    def __init__(self, name: str, classes: int):
        self.name = name
        self.classes = classes
        self.nodes: list[LayerNode] = []
        self.edges: list[tuple[str, str, int]] = []

    def add(self, node_id: str, kind: str, inputs=(), **attrs) -> str:
        self.nodes.append(LayerNode(node_id, kind, attrs))
        for slot, src in enumerate(inputs):
            self.edges.append((src, node_id, slot))
        return node_id

    def conv(self, node_id, x, cin, cout, kernel, stride=1):
        return self.add(node_id, "conv", [x], in_channels=cin, out_channels=cout,
                        kernel=kernel, stride=stride, pad=kernel // 2)

    def conv_bn(self, prefix, x, cin, cout, kernel, stride=1):
        c = self.conv(f"{prefix}.conv", x, cin, cout, kernel, stride)
        return self.add(f"{prefix}.bn", "bn", [c], channels=cout)

    def graph(self) -> NetworkGraph:
        g = NetworkGraph(self.name, self.classes, self.nodes, self.edges)
        g.validate()
        return g


def _check_positive(**kw):
    for k, v in kw.items():
        if not isinstance(v, int) or v < 1:
            raise ValueError(f"{k} must be a positive integer, got {v!r}")


def _post_act_block(b: _GraphBuilder, p: str, x: str, cin: int, cout: int, stride: int, mode: str) -> str:
    """conv-BN-ReLU-conv-BN, combined with the shortcut, then ReLU."""
    h = b.conv(f"{p}.conv1", x, cin, cout, 3, stride)
    h = b.add(f"{p}.bn1", "bn", [h], channels=cout)
    h = b.add(f"{p}.relu1", "relu", [h])
    h = b.conv(f"{p}.conv2", h, cout, cout, 3, 1)
    h = b.add(f"{p}.bn2", "bn", [h], channels=cout)
    sc = x
    if stride != 1 or cin != cout:
        sc = b.conv_bn(f"{p}.shortcut", x, cin, cout, 1, stride)
    h = b.add(f"{p}.combine", "combine", [h, sc], mode=mode)
    return b.add(f"{p}.out", "relu", [h])


def _post_act_body(b: _GraphBuilder, spec: StageSpec, input_size: int) -> str:
    x = b.add("input", "input", shape=[3, input_size, input_size])
    c0 = spec.stage_channels[0]
    x = b.conv_bn("stem", x, 3, c0, 3)
    x = b.add("stem.relu", "relu", [x])
    cin = c0
    for s, (cout, reduce) in enumerate(zip(spec.stage_channels, spec.reduce_at_stage_entry), start=1):
        for j in range(spec.blocks_per_stage):
            stride = 2 if (j == 0 and reduce) else 1
            x = _post_act_block(b, f"stage{s}.block{j}", x, cin, cout, stride, spec.combine_mode)
            cin = cout
    return x


def _gap_head(b: _GraphBuilder, x: str, width: int, classes: int) -> None:
    x = b.add("head.gap", "global_avg_pool", [x])
    x = b.add("head.linear", "linear", [x], in_features=width, out_features=classes)
    b.add("output", "output", [x])


def build_resnet(
    n: int,
    classes: int,
    width_mult: int = 1,
    combine: str = "add",
    *,
    base_width: int = 16,
    input_size: int = 32,
    stages: int = 3,
) -> NetworkGraph:
    """CIFAR ResNet-(6n+2) with projection shortcuts on reducing blocks.

    ``width_mult=2`` doubles every stage's channel count.  ``stages`` other
    than 3 is only meant for tests (e.g. a single-stage net with no
    spatial reduction).
    """
    _check_positive(n=n, classes=classes, width_mult=width_mult, base_width=base_width,
                    input_size=input_size, stages=stages)
    chans = tuple(base_width * width_mult * 2**s for s in range(stages))
    spec = StageSpec(n, chans, combine, (False,) + (True,) * (stages - 1))
    name = f"resnet{6 * n + 2}" + (f"x{width_mult}" if width_mult > 1 else "") + ("-max" if combine == "max" else "")
    b = _GraphBuilder(name, classes)
    x = _post_act_body(b, spec, input_size)
    _gap_head(b, x, chans[-1], classes)
    return b.graph()


def build_newnet(
    classes: int,
    width_mult: int = 1,
    pool_mode: str = "channel_mean",
    combine: str = "add",
    *,
    base_width: int = 32,
    input_size: int = 32,
    blocks_per_stage: int = 2,
) -> NetworkGraph:
    """Two blocks per stage at doubled ResNet widths, every stage tapped.

    Each stage output is pooled (``pool_mode``), flattened and concatenated
    in stage order with the global-average-pooled head features, which come
    last, before the classifier.
    """
    from .transform import add_taps

    _check_positive(classes=classes, width_mult=width_mult, base_width=base_width,
                    input_size=input_size, blocks_per_stage=blocks_per_stage)
    chans = tuple(base_width * width_mult * 2**s for s in range(3))
    spec = StageSpec(blocks_per_stage, chans, combine)
    name = "newnet" + (f"x{width_mult}" if width_mult > 1 else "") + ("-max" if combine == "max" else "")
    b = _GraphBuilder(name, classes)
    x = _post_act_body(b, spec, input_size)
    _gap_head(b, x, chans[-1], classes)
    g = b.graph()
    return add_taps(g, stage_outputs(g), pool_mode)


def build_wideresnet(
    depth: int = 28,
    widen: int = 10,
    classes: int = 100,
    combine: str = "add",
    *,
    base_width: int = 16,
    input_size: int = 32,
) -> NetworkGraph:
    """Pre-activation WRN-depth-widen (BN-ReLU-conv ordering)."""
    if combine not in ("add", "max"):
        raise ValueError(f"combine must be 'add' or 'max', got {combine!r}")
    _check_positive(depth=depth, widen=widen, classes=classes, base_width=base_width, input_size=input_size)
    if (depth - 4) % 6:
        raise ValueError(f"WideResNet depth must satisfy (depth - 4) % 6 == 0, got {depth}")
    n = (depth - 4) // 6
    chans = [base_width * widen * 2**s for s in range(3)]
    b = _GraphBuilder(f"wrn{depth}-{widen}" + ("-max" if combine == "max" else ""), classes)
    x = b.add("input", "input", shape=[3, input_size, input_size])
    x = b.conv("stem.conv", x, 3, base_width, 3)
    cin = base_width
    for s, cout in enumerate(chans, start=1):
        for j in range(n):
            p = f"stage{s}.block{j}"
            stride = 2 if (j == 0 and s > 1) else 1
            a = b.add(f"{p}.bn1", "bn", [x], channels=cin)
            a = b.add(f"{p}.relu1", "relu", [a])
            h = b.conv(f"{p}.conv1", a, cin, cout, 3, stride)
            h = b.add(f"{p}.bn2", "bn", [h], channels=cout)
            h = b.add(f"{p}.relu2", "relu", [h])
            h = b.conv(f"{p}.conv2", h, cout, cout, 3, 1)
            sc = x if (cin == cout and stride == 1) else b.conv(f"{p}.shortcut.conv", a, cin, cout, 1, stride)
            x = b.add(f"{p}.out", "combine", [h, sc], mode=combine)
            cin = cout
    x = b.add("head.bn", "bn", [x], channels=cin)
    x = b.add("head.relu", "relu", [x])
    _gap_head(b, x, cin, classes)
    return b.graph()


def stage_outputs(g: NetworkGraph) -> list[str]:
    """Ids of each stage's final block output, in stage order."""
    last: dict[int, tuple[int, str]] = {}
    for n in g.nodes:
        parts = n.id.split(".")
        if len(parts) == 3 and parts[0].startswith("stage") and parts[1].startswith("block") and parts[2] == "out":
            s, j = int(parts[0][5:]), int(parts[1][5:])
            if s not in last or j > last[s][0]:
                last[s] = (j, n.id)
    return [last[s][1] for s in sorted(last)]


ARCH_NAMES = ("resnet20", "resnet32", "resnet44", "resnet56", "resnet110", "newnet", "wrn28-10")


def build_arch(
    arch: str,
    classes: int,
    width_mult: int = 1,
    combine: str = "add",
    pool_mode: str = "channel_mean",
    **kw,
) -> NetworkGraph:
    """Build by name from :data:`ARCH_NAMES` (``resnet{6n+2}`` in general)."""
    if arch == "newnet":
        return build_newnet(classes, width_mult, pool_mode, combine, **kw)
    if arch.startswith("wrn"):
        try:
            depth, widen = (int(v) for v in arch[3:].split("-"))
        except ValueError:
            raise ValueError(f"unknown architecture {arch!r}; valid choices: {', '.join(ARCH_NAMES)}") from None
        return build_wideresnet(depth, widen * width_mult, classes, combine, **kw)
    if arch.startswith("resnet") and arch[6:].isdigit() and (int(arch[6:]) - 2) % 6 == 0 and int(arch[6:]) > 2:
        return build_resnet((int(arch[6:]) - 2) // 6, classes, width_mult, combine, **kw)
    raise ValueError(f"unknown architecture {arch!r}; valid choices: {', '.join(ARCH_NAMES)}")
