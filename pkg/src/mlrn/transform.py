"""Multi-level feature forwarding as a graph rewrite.

The activation entering every spatially-reducing residual block is
pooled, flattened and concatenated with the network's pooled head
features in front of a widened classifier.  Concatenation order is fixed:
taps by topological position of the tapped node, original head features
last.  Classifier weights depend on that order, so it must not change.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import GraphError, LayerNode, NetworkGraph, infer_shapes

__all__ = [
    "POOL_MODES",
    "TransformError",
    "TapPoint",
    "find_reduction_points",
    "find_taps",
    "classifier_layout",
    "add_taps",
    "apply_multilevel_transform",
]

POOL_MODES = ("channel_mean", "per_channel_gap")


class TransformError(GraphError):
    """The graph cannot be rewritten (no reduction, unrecognised head)."""


@dataclass(frozen=True)
class TapPoint:
    node_id: str
    width: int
    pool_mode: str


@dataclass(frozen=True)
class _Head:
    linear: str
    concat: str | None
    features: str  # global_avg_pool node feeding the classifier
    taps: tuple[tuple[str, str, str], ...]  # (entry, pool_mode, flatten_id)


def _check_pool_mode(pool_mode: str) -> None:
    if pool_mode not in POOL_MODES:
        raise ValueError(f"pool_mode must be one of {POOL_MODES}, got {pool_mode!r}")


def _tap_width(shape: tuple[int, ...], pool_mode: str) -> int:
    _, c, h, w = shape
    return h * w if pool_mode == "channel_mean" else c


def _head(g: NetworkGraph) -> _Head:
    (lin,) = g.inputs_of(g.output_node.id) or (None,)
    if lin is None or g.node(lin).kind != "linear":
        raise TransformError("head not recognizable: output is not fed by a linear layer")
    (feat,) = g.inputs_of(lin)
    kind = g.node(feat).kind
    if kind == "global_avg_pool":
        return _Head(lin, None, feat, ())
    if kind != "concat":
        raise TransformError(f"head not recognizable: classifier fed by {kind!r}")
    parts = g.inputs_of(feat)
    if g.node(parts[-1]).kind != "global_avg_pool":
        raise TransformError("head not recognizable: last concat input is not global_avg_pool")
    taps = []
    for f in parts[:-1]:
        pool = g.inputs_of(f)
        if g.node(f).kind != "flatten" or len(pool) != 1 or g.node(pool[0]).kind not in POOL_MODES:
            raise TransformError(f"head not recognizable: concat input {f!r} is not a pooled tap")
        taps.append((g.inputs_of(pool[0])[0], g.node(pool[0]).kind, f))
    return _Head(lin, feat, parts[-1], tuple(taps))


def find_reduction_points(g: NetworkGraph) -> list[str]:
    """Activations entering residual blocks that shrink the spatial size.

    A residual block is identified by its ``combine`` node; its entry is
    the latest common ancestor of the branch and shortcut inputs.
    """
    shapes = infer_shapes(g)
    pos = {nid: i for i, nid in enumerate(g.topo_order())}
    found: list[str] = []
    for nid in sorted((n.id for n in g.nodes_of_kind("combine")), key=pos.get):
        a, b = g.inputs_of(nid)
        common = g.ancestors(a) & g.ancestors(b)
        entry = max(common, key=pos.get)
        if len(shapes[entry]) != 4 or entry in found:
            continue
        if shapes[nid][2] < shapes[entry][2] or shapes[nid][3] < shapes[entry][3]:
            found.append(entry)
    return found


def find_taps(g: NetworkGraph) -> list[TapPoint]:
    shapes = infer_shapes(g)
    return [TapPoint(e, _tap_width(shapes[e], m), m) for e, m, _ in _head(g).taps]


def classifier_layout(g: NetworkGraph) -> list[tuple[tuple[str, str], int]]:
    """Column segments of the final linear layer, in order.

    Each entry is ``(key, width)``; keys are ``(pool_mode, node_id)`` for
    taps and ``("head", gap_node_id)`` for the original pooled features.
    """
    shapes = infer_shapes(g)
    head = _head(g)
    layout = [((m, e), _tap_width(shapes[e], m)) for e, m, _ in head.taps]
    layout.append((("head", head.features), shapes[head.features][1]))
    return layout


def add_taps(g: NetworkGraph, entries, pool_mode: str = "channel_mean") -> NetworkGraph:
    """Return a copy of ``g`` with pooled taps on ``entries``.

    Taps already present (same node, same pool mode) are kept as they are,
    which makes the rewrite idempotent.
    """
    _check_pool_mode(pool_mode)
    head = _head(g)
    shapes = infer_shapes(g)
    pos = {nid: i for i, nid in enumerate(g.topo_order())}
    for e in entries:
        if e not in g or len(shapes[e]) != 4:
            raise TransformError(f"cannot tap {e!r}: not a 4-D activation in the graph")

    existing = {(e, m): f for e, m, f in head.taps}
    new_nodes: list[LayerNode] = []
    new_edges: list[tuple[str, str, int]] = []
    taps = [(pos[e], i, e, m, f) for i, (e, m, f) in enumerate(head.taps)]
    for e in entries:
        if (e, pool_mode) in existing:
            continue
        pool_id = f"tap.{pool_mode}.{e}"
        flat_id = f"{pool_id}.flatten"
        new_nodes += [LayerNode(pool_id, pool_mode, {}), LayerNode(flat_id, "flatten", {})]
        new_edges += [(e, pool_id, 0), (pool_id, flat_id, 0)]
        existing[(e, pool_mode)] = flat_id
        taps.append((pos[e], len(taps), e, pool_mode, flat_id))
    taps.sort()

    lin = g.node(head.linear)
    width = sum(_tap_width(shapes[e], m) for _, _, e, m, _ in taps) + shapes[head.features][1]
    concat_id = head.concat or "head.concat"
    dropped = {concat_id, head.linear, g.output_node.id}
    nodes = [n for n in g.nodes if n.id not in dropped] + new_nodes
    nodes += [
        LayerNode(concat_id, "concat", {}),
        LayerNode(lin.id, "linear", {**lin.attrs, "in_features": width}),
        g.output_node,
    ]
    edges = [e for e in g.edges if e[1] not in (concat_id, head.linear)] + new_edges
    sources = [f for *_, f in taps] + [head.features]
    edges += [(src, concat_id, slot) for slot, src in enumerate(sources)]
    edges.append((concat_id, lin.id, 0))
    out = NetworkGraph(g.name, g.class_count, nodes, edges)
    out.validate()
    return out


def apply_multilevel_transform(g: NetworkGraph, pool_mode: str = "channel_mean") -> NetworkGraph:
    """Tap every spatially-reducing residual block and widen the classifier."""
    _check_pool_mode(pool_mode)
    _head(g)
    entries = find_reduction_points(g)
    if not entries:
        raise TransformError("no spatial reduction found")
    out = add_taps(g, entries, pool_mode)
    if not out.name.endswith("+ml"):
        out.name = g.name + "+ml"
    return out
