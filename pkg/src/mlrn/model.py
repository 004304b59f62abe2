"""Parameterized, executable network built from a :class:`NetworkGraph`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .graph import NetworkGraph
from .tensor import BatchNormState, Tensor
from .transform import classifier_layout

__all__ = ["Model", "resolve_dtype"]


def resolve_dtype(precision) -> np.dtype:
    mapping = {"single": np.float32, "float32": np.float32, "double": np.float64, "float64": np.float64}
    if isinstance(precision, str):
        try:
            return np.dtype(mapping[precision])
        except KeyError:
            raise ValueError(f"precision must be 'single' or 'double', got {precision!r}") from None
    return np.dtype(precision)


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Model:
    """Weights, BN state and a forward pass for one graph.

    Parameters are held per node id: ``params[node_id]`` maps ``"weight"``
    / ``"bias"`` to tensors for conv and linear nodes; ``bn[node_id]`` holds
    a :class:`BatchNormState`.  Parameter order (for optimizers and
    checkpoints) follows the graph's node list.
    """

    def __init__(self, graph: NetworkGraph, seed: int = 0, dtype="single"):
        self.graph = graph
        self.dtype = resolve_dtype(dtype)
        self.shapes = graph.validate()
        self.order = graph.topo_order()
        self._inputs = {nid: graph.inputs_of(nid) for nid in self.order}
        self.params: dict[str, dict[str, Tensor]] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(seed)
        for n in graph.nodes:
            if n.kind == "conv":
                k, c, ks = n["out_channels"], n["in_channels"], n["kernel"]
                p = {"weight": Tensor(_he(rng, (k, c, ks, ks), c * ks * ks, self.dtype), requires_grad=True)}
                if n["bias"]:
                    p["bias"] = Tensor(np.zeros(k, self.dtype), requires_grad=True)
                self.params[n.id] = p
            elif n.kind == "linear":
                m, d = n["out_features"], n["in_features"]
                p = {"weight": Tensor(_he(rng, (m, d), d, self.dtype), requires_grad=True)}
                if n["bias"]:
                    p["bias"] = Tensor(np.zeros(m, self.dtype), requires_grad=True)
                self.params[n.id] = p
            elif n.kind == "bn":
                self.bn[n.id] = BatchNormState.create(n["channels"], self.dtype, n["eps"], n["momentum"])
        self.training = True

    # -- state -------------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        out = []
        for n in self.graph.nodes:
            if n.id in self.params:
                out.extend(self.params[n.id].values())
            elif n.id in self.bn:
                out.extend((self.bn[n.id].gamma, self.bn[n.id].beta))
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for n in self.graph.nodes:
            if n.id in self.params:
                out.extend((f"{n.id}.{k}", t) for k, t in self.params[n.id].items())
            elif n.id in self.bn:
                out.extend(((f"{n.id}.gamma", self.bn[n.id].gamma), (f"{n.id}.beta", self.bn[n.id].beta)))
        return out

    def buffers(self) -> list[np.ndarray]:
        out = []
        for n in self.graph.nodes:
            if n.id in self.bn:
                out.extend((self.bn[n.id].running_mean, self.bn[n.id].running_var))
        return out

    def train(self, mode: bool = True) -> "Model":
        self.training = mode
        for st in self.bn.values():
            st.mode = "train" if mode else "eval"
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def copy(self) -> "Model":
        other = Model.__new__(Model)
        other.__dict__.update(self.__dict__)
        other.params = {k: {n: Tensor(t.data.copy(), True) for n, t in d.items()} for k, d in self.params.items()}
        other.bn = {
            k: BatchNormState(Tensor(s.gamma.data.copy(), True), Tensor(s.beta.data.copy(), True),
                              s.running_mean.copy(), s.running_var.copy(), s.eps, s.momentum, s.mode)
            for k, s in self.bn.items()
        }
        return other

    # -- forward -----------------------------------------------------------

    def _run(self, x, stop_at: str | None = None) -> dict[str, Tensor]:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        acts: dict[str, Tensor] = {}
        for nid in self.order:
            n = self.graph.node(nid)
            ins = [acts[s] for s in self._inputs[nid]]
            k = n.kind
            if k == "input":
                if x.ndim != 4 or x.shape[1:] != tuple(n["shape"]):
                    raise ValueError(f"expected input of shape (N, {', '.join(map(str, n['shape']))}), got {x.shape}")
                out = x
            elif k == "conv":
                p = self.params[nid]
                out = T.conv2d(ins[0], p["weight"], p.get("bias"), n["stride"], n["pad"])
            elif k == "bn":
                out = T.batchnorm2d(ins[0], self.bn[nid])
            elif k == "relu":
                out = T.relu(ins[0])
            elif k == "combine":
                out = T.combine(ins[0], ins[1], n["mode"])
            elif k == "channel_mean":
                out = T.channel_mean(ins[0])
            elif k == "per_channel_gap":
                out = T.per_channel_gap(ins[0])
            elif k == "global_avg_pool":
                out = T.global_avg_pool(ins[0])
            elif k == "flatten":
                out = T.flatten(ins[0])
            elif k == "concat":
                out = ins[0] if len(ins) == 1 else T.concat(ins)
            elif k == "linear":
                p = self.params[nid]
                out = T.linear(ins[0], p["weight"], p.get("bias"))
            else:  # output
                out = ins[0]
            acts[nid] = out
            if nid == stop_at:
                break
        return acts

    def __call__(self, x) -> Tensor:
        return self._run(x)[self.graph.output_node.id]

    forward = __call__

    def features(self, x) -> Tensor:
        """Input to the final classifier (concatenated taps + head)."""
        lin = self.graph.inputs_of(self.graph.output_node.id)[0]
        feat = self.graph.inputs_of(lin)[0]
        return self._run(x, stop_at=feat)[feat]

    def activations(self, x) -> dict[str, Tensor]:
        return self._run(x)

    def predict_logits(self, x, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits without recording; restores the previous mode."""
        was = self.training
        self.eval()
        try:
            x = np.asarray(x)
            outs = [self(x[i : i + batch_size].astype(self.dtype, copy=False)).data for i in range(0, len(x), batch_size)]
        finally:
            self.train(was)
        return np.concatenate(outs) if outs else np.zeros((0, self.graph.class_count), self.dtype)

    # -- rewriting ---------------------------------------------------------

    def graft(self, graph: NetworkGraph, new_columns: str = "zero", seed: int = 0) -> "Model":
        """Move weights onto a rewritten graph (e.g. after the multi-level transform).

        Layers whose node id and shape match are copied.  The classifier
        keeps its columns for feature segments present in both graphs;
        columns for new segments are zeroed (``"zero"``: the grafted model
        initially computes the same logits) or He-initialized (``"he"``).
        """
        if new_columns not in ("zero", "he"):
            raise ValueError("new_columns must be 'zero' or 'he'")
        other = Model(graph, seed=seed, dtype=self.dtype)
        for nid, p in other.params.items():
            old = self.params.get(nid)
            if old is None:
                continue
            for name, t in p.items():
                if name in old and old[name].shape == t.shape:
                    t.data[...] = old[name].data
        for nid, st in other.bn.items():
            old = self.bn.get(nid)
            if old is not None and old.channels == st.channels:
                st.gamma.data[...] = old.gamma.data
                st.beta.data[...] = old.beta.data
                st.running_mean[...] = old.running_mean
                st.running_var[...] = old.running_var
        lin = graph.inputs_of(graph.output_node.id)[0]
        if lin in self.params and self.params[lin]["weight"].shape != other.params[lin]["weight"].shape:
            old_w = self.params[lin]["weight"].data
            new_w = other.params[lin]["weight"].data
            old_cols, off = {}, 0
            for key, width in classifier_layout(self.graph):
                old_cols[key] = (off, width)
                off += width
            off = 0
            for key, width in classifier_layout(graph):
                if key in old_cols and old_cols[key][1] == width:
                    s = old_cols[key][0]
                    new_w[:, off : off + width] = old_w[:, s : s + width]
                elif new_columns == "zero":
                    new_w[:, off : off + width] = 0
                off += width
            if "bias" in self.params[lin] and "bias" in other.params[lin]:
                other.params[lin]["bias"].data[...] = self.params[lin]["bias"].data
        other.train(self.training)
        return other
