"""Architecture graphs: layer nodes, validation, shape inference, JSON I/O.

A :class:`NetworkGraph` is a DAG of :class:`LayerNode` objects joined by
``(src, dst, slot)`` edges.  Graphs are treated as immutable values;
builders and rewrites return new graphs.

JSON layout::

    {"name": "resnet32", "class_count": 100,
     "nodes": [{"id": "input", "kind": "input", "shape": [3, 32, 32]}, ...],
     "edges": [["input", "stem.conv", 0], ...]}

Node attributes per kind (``?`` marks optional, with default):

=================  =========================================================
kind               attributes
=================  =========================================================
input              shape [C, H, W]
conv               in_channels, out_channels, kernel, stride, pad, bias? false
bn                 channels, eps? 1e-5, momentum? 0.1
relu               --
combine            mode ("add" | "max"); slot 0 = branch, slot 1 = shortcut
channel_mean       --   ([N,C,H,W] -> [N,1,H,W])
per_channel_gap    --   ([N,C,H,W] -> [N,C])
global_avg_pool    --   ([N,C,H,W] -> [N,C])
flatten            --   ([N,...] -> [N,D])
concat             --   (feature axis 1; any number of slots)
linear             in_features, out_features, bias? true
output             --
=================  =========================================================
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

__all__ = [
    "NODE_KINDS",
    "GraphError",
    "GraphFormatError",
    "ShapeError",
    "LayerNode",
    "NetworkGraph",
    "infer_shapes",
    "count_params",
    "param_breakdown",
    "serialize_graph",
    "deserialize_graph",
    "save_graph",
    "load_graph",
]


class GraphError(ValueError):
    """Structural problem with a network graph."""


class GraphFormatError(GraphError):
    """Malformed JSON graph spec."""


class ShapeError(GraphError):
    """Inconsistent tensor shapes between connected nodes."""


# kind -> (required attrs, optional attrs with defaults, arity; None = variadic)
NODE_KINDS: dict[str, tuple[tuple[str, ...], dict, int | None]] = {
    "input": (("shape",), {}, 0),
    "conv": (("in_channels", "out_channels", "kernel", "stride", "pad"), {"bias": False}, 1),
    "bn": (("channels",), {"eps": 1e-5, "momentum": 0.1}, 1),
    "relu": ((), {}, 1),
    "combine": (("mode",), {}, 2),
    "channel_mean": ((), {}, 1),
    "per_channel_gap": ((), {}, 1),
    "global_avg_pool": ((), {}, 1),
    "flatten": ((), {}, 1),
    "concat": ((), {}, None),
    "linear": (("in_features", "out_features"), {"bias": True}, 1),
    "output": ((), {}, 1),
}


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    attrs: dict = field(default_factory=dict)

    def __getitem__(self, key):
        if key in self.attrs:
            return self.attrs[key]
        return NODE_KINDS[self.kind][1][key]

    def get(self, key, default=None):
        try:
            return self[key]
        except KeyError:
            return default


@dataclass
class NetworkGraph:
    name: str
    class_count: int
    nodes: list[LayerNode]
    edges: list[tuple[str, str, int]]

    def __post_init__(self):
        self.edges = [tuple(e) for e in self.edges]
        self._index = {n.id: i for i, n in enumerate(self.nodes)}
        if len(self._index) != len(self.nodes):
            seen = set()
            dup = next(n.id for n in self.nodes if n.id in seen or seen.add(n.id))
            raise GraphError(f"duplicate node id {dup!r}")
        self._ins: dict[str, list[tuple[int, str]]] = {}
        self._outs: dict[str, list[str]] = {}
        for src, dst, slot in self.edges:
            self._ins.setdefault(dst, []).append((slot, src))
            self._outs.setdefault(src, []).append(dst)

    def __eq__(self, other):
        if not isinstance(other, NetworkGraph):
            return NotImplemented
        return (
            self.name == other.name
            and self.class_count == other.class_count
            and self.nodes == other.nodes
            and self.edges == other.edges
        )

    def node(self, node_id: str) -> LayerNode:
        try:
            return self.nodes[self._index[node_id]]
        except KeyError:
            raise GraphError(f"no node with id {node_id!r}") from None

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def inputs_of(self, node_id: str) -> list[str]:
        return [src for _, src in sorted(self._ins.get(node_id, ()))]

    def consumers_of(self, node_id: str) -> list[str]:
        return list(self._outs.get(node_id, ()))

    def nodes_of_kind(self, *kinds: str) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind in kinds]

    @property
    def input_node(self) -> LayerNode:
        return self.nodes_of_kind("input")[0]

    @property
    def output_node(self) -> LayerNode:
        return self.nodes_of_kind("output")[0]

    def topo_order(self) -> list[str]:
        """Kahn's algorithm, breaking ties by position in ``nodes``."""
        indeg = {n.id: 0 for n in self.nodes}
        succ: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for src, dst, _ in self.edges:
            indeg[dst] += 1
            succ[src].append(dst)
        heap = [self._index[i] for i, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            nid = self.nodes[heapq.heappop(heap)].id
            order.append(nid)
            for d in succ[nid]:
                indeg[d] -= 1
                if indeg[d] == 0:
                    heapq.heappush(heap, self._index[d])
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return order

    def ancestors(self, node_id: str) -> set[str]:
        """All nodes with a path to ``node_id``, including itself."""
        seen = {node_id}
        stack = [node_id]
        while stack:
            for src in self.inputs_of(stack.pop()):
                if src not in seen:
                    seen.add(src)
                    stack.append(src)
        return seen

    def validate(self) -> dict[str, tuple[int, ...]]:
        """Check structure and shapes; returns the inferred shapes."""
        for n in self.nodes:
            _check_attrs(n)
        ids = set(self._index)
        for src, dst, slot in self.edges:
            if src not in ids or dst not in ids:
                raise GraphError(f"edge {src!r} -> {dst!r} references an unknown node")
        for kind in ("input", "output"):
            count = len(self.nodes_of_kind(kind))
            if count != 1:
                raise GraphError(f"graph needs exactly one {kind} node, found {count}")
        for n in self.nodes:
            slots = sorted(slot for slot, _ in self._ins.get(n.id, ()))
            arity = NODE_KINDS[n.kind][2]
            if arity is None:
                if not slots:
                    raise GraphError(f"node {n.id!r} ({n.kind}) has no inputs")
            elif len(slots) != arity:
                raise GraphError(f"node {n.id!r} ({n.kind}) takes {arity} inputs, got {len(slots)}")
            if slots != list(range(len(slots))):
                raise GraphError(f"node {n.id!r} has non-contiguous input slots {slots}")
        self.topo_order()
        down = _reach(self.input_node.id, lambda i: self.consumers_of(i))
        up = _reach(self.output_node.id, lambda i: self.inputs_of(i))
        stray = [n.id for n in self.nodes if n.id not in down or n.id not in up]
        if stray:
            raise GraphError(f"nodes not on an input-to-output path: {stray}")
        return infer_shapes(self)


def _reach(start: str, step) -> set[str]:
    seen = {start}
    stack = [start]
    while stack:
        for nxt in step(stack.pop()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def _check_attrs(n: LayerNode) -> None:
    if n.kind not in NODE_KINDS:
        raise GraphFormatError(f"unknown node kind {n.kind!r} (node {n.id!r})")
    required, optional, _ = NODE_KINDS[n.kind]
    missing = [a for a in required if a not in n.attrs]
    if missing:
        raise GraphFormatError(f"node {n.id!r} ({n.kind}) missing attributes {missing}")
    extra = [a for a in n.attrs if a not in required and a not in optional]
    if extra:
        raise GraphFormatError(f"node {n.id!r} ({n.kind}) has unknown attributes {extra}")
    if n.kind == "combine" and n.attrs["mode"] not in ("add", "max"):
        raise GraphFormatError(f"node {n.id!r}: combine mode must be 'add' or 'max'")


def infer_shapes(g: NetworkGraph, input_shape=None) -> dict[str, tuple[int, ...]]:
    """Propagate shapes from the input node; keys are node ids.

    ``input_shape`` is ``(N, C, H, W)``; defaults to batch 1 and the input
    node's declared ``shape``.
    """
    shapes: dict[str, tuple[int, ...]] = {}
    for nid in g.topo_order():
        n = g.node(nid)
        ins = [shapes[s] for s in g.inputs_of(nid)]
        shapes[nid] = _node_shape(n, ins, input_shape)
    return shapes


def _node_shape(n: LayerNode, ins: list[tuple[int, ...]], input_shape) -> tuple[int, ...]:
    def fail(msg):
        raise ShapeError(f"node {n.id!r} ({n.kind}): {msg}")

    def need_4d():
        if len(ins[0]) != 4:
            fail(f"expects a 4-D input, got {ins[0]}")
        return ins[0]

    k = n.kind
    if k == "input":
        declared = tuple(n["shape"])
        if input_shape is None:
            return (1,) + declared
        input_shape = tuple(input_shape)
        if len(input_shape) != 4 or input_shape[1] != declared[0]:
            fail(f"input shape {input_shape} incompatible with declared {declared}")
        return input_shape
    if k == "conv":
        nb, c, h, w = need_4d()
        if c != n["in_channels"]:
            fail(f"expects {n['in_channels']} channels, got {c}")
        kk, s, p = n["kernel"], n["stride"], n["pad"]
        if s < 1:
            fail("stride must be positive")
        if kk > h + 2 * p or kk > w + 2 * p:
            fail(f"kernel {kk} exceeds padded input {h + 2 * p}x{w + 2 * p}")
        return (nb, n["out_channels"], (h + 2 * p - kk) // s + 1, (w + 2 * p - kk) // s + 1)
    if k == "bn":
        if need_4d()[1] != n["channels"]:
            fail(f"expects {n['channels']} channels, got {ins[0][1]}")
        return ins[0]
    if k in ("relu", "output"):
        return ins[0]
    if k == "combine":
        if ins[0] != ins[1]:
            fail(f"input shapes differ: {ins[0]} vs {ins[1]}")
        return ins[0]
    if k == "channel_mean":
        nb, _, h, w = need_4d()
        return (nb, 1, h, w)
    if k in ("per_channel_gap", "global_avg_pool"):
        nb, c, _, _ = need_4d()
        return (nb, c)
    if k == "flatten":
        return (ins[0][0], math.prod(ins[0][1:]))
    if k == "concat":
        ref = ins[0]
        for s in ins[1:]:
            if len(s) != len(ref) or s[0] != ref[0] or s[2:] != ref[2:]:
                fail(f"inputs disagree off the feature axis: {s} vs {ref}")
        return (ref[0], sum(s[1] for s in ins)) + ref[2:]
    if k == "linear":
        if len(ins[0]) != 2:
            fail(f"expects a 2-D input, got {ins[0]}")
        if ins[0][1] != n["in_features"]:
            fail(f"expects {n['in_features']} features, got {ins[0][1]}")
        return (ins[0][0], n["out_features"])
    raise GraphFormatError(f"unknown node kind {k!r} (node {n.id!r})")


def param_breakdown(g: NetworkGraph) -> dict[str, tuple[int, int]]:
    """Per-node ``(learnable, buffers)`` counts for parameterized nodes."""
    out = {}
    for n in g.nodes:
        if n.kind == "conv":
            cnt = n["out_channels"] * n["in_channels"] * n["kernel"] ** 2
            out[n.id] = (cnt + (n["out_channels"] if n["bias"] else 0), 0)
        elif n.kind == "linear":
            cnt = n["out_features"] * n["in_features"]
            out[n.id] = (cnt + (n["out_features"] if n["bias"] else 0), 0)
        elif n.kind == "bn":
            out[n.id] = (2 * n["channels"], 2 * n["channels"])
    return out


def count_params(g: NetworkGraph) -> int:
    """Total learnable parameters (BN running statistics excluded)."""
    return sum(learn for learn, _ in param_breakdown(g).values())


def serialize_graph(g: NetworkGraph) -> str:
    nodes = []
    for n in g.nodes:
        d = {"id": n.id, "kind": n.kind}
        d.update({k: n.attrs[k] for k in sorted(n.attrs)})
        nodes.append(d)
    doc = {
        "name": g.name,
        "class_count": g.class_count,
        "nodes": nodes,
        "edges": [list(e) for e in g.edges],
    }
    return json.dumps(doc, indent=1) + "\n"


def deserialize_graph(text: str) -> NetworkGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"graph spec is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise GraphFormatError("graph spec must be a JSON object")
    for key in ("name", "class_count", "nodes", "edges"):
        if key not in doc:
            raise GraphFormatError(f"graph spec missing top-level key {key!r}")
    nodes = []
    for raw in doc["nodes"]:
        if not isinstance(raw, dict) or "id" not in raw or "kind" not in raw:
            raise GraphFormatError(f"node entry needs 'id' and 'kind': {raw!r}")
        attrs = {k: v for k, v in raw.items() if k not in ("id", "kind")}
        if "shape" in attrs:
            attrs["shape"] = list(attrs["shape"])
        node = LayerNode(str(raw["id"]), str(raw["kind"]), attrs)
        _check_attrs(node)
        nodes.append(node)
    edges = []
    for e in doc["edges"]:
        if not (isinstance(e, list) and len(e) == 3 and isinstance(e[2], int)):
            raise GraphFormatError(f"edge must be [src, dst, slot], got {e!r}")
        edges.append((str(e[0]), str(e[1]), e[2]))
    g = NetworkGraph(str(doc["name"]), int(doc["class_count"]), nodes, edges)
    g.validate()
    return g


def save_graph(g: NetworkGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_graph(g))


def load_graph(path) -> NetworkGraph:
    with open(path, encoding="utf-8") as fh:
        return deserialize_graph(fh.read())
