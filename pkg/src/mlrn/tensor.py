"""Tensors, layer operations and a tape for reverse-mode differentiation.

Every operation takes and returns :class:`Tensor` objects.  When a
:class:`Tape` is active and at least one input requires a gradient, the
operation is recorded together with whatever it needs for its backward
rule.  :func:`backward` replays the tape in reverse.

Backward rules live in :data:`BACKWARD_RULES`, keyed by op name, so a rule
can be swapped out (this is how the gradient-check harness is tested
against a deliberately broken rule).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "BatchNormState",
    "BACKWARD_RULES",
    "conv2d",
    "batchnorm2d",
    "relu",
    "combine",
    "channel_mean",
    "global_avg_pool",
    "per_channel_gap",
    "flatten",
    "concat",
    "linear",
    "softmax_cross_entropy",
    "sum_all",
    "backward",
    "sgd_momentum_step",
]


class Tensor:
    """N-dimensional array with an optional gradient slot.

    ``data`` is a C-contiguous numpy array; its flat view is the row-major
    value vector.  ``grad`` is ``None`` until a backward pass reaches the
    tensor, then an array of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


class Record(NamedTuple):
    op: str
    out: Tensor
    inputs: tuple
    ctx: dict


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded
    on this tape::

        with Tape() as tape:
            loss = softmax_cross_entropy(model(x), y)
        backward(loss, tape)
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def _emit(op: str, data: np.ndarray, inputs: Sequence, ctx: dict | None = None) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: non-finite values in output")
    out = Tensor(data)
    if _ACTIVE and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].records.append(Record(op, out, tuple(inputs), ctx or {}))
    return out


# ----------------------------------------------------------------- convolution


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Columns of shape (C*kh*kw, N*Ho*Wo), channel-major."""
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    xc = x.transpose(1, 0, 2, 3)
    if pad:
        xc = np.pad(xc, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return np.ascontiguousarray(out[:, :, pad : pad + h, pad : pad + w].transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be positive, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d pad must be non-negative, got {pad}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {k} output channels")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    cols = _im2col(x.data, kh, kw, stride, pad)
    out = weight.data.reshape(k, -1) @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, dict(cols=cols, stride=stride, pad=pad))


def _conv2d_backward(ctx, g, inputs):
    x, weight = inputs[0], inputs[1]
    k, c, kh, kw = weight.shape
    gk = g.transpose(1, 0, 2, 3).reshape(k, -1)
    gw = (gk @ ctx["cols"].T).reshape(weight.shape) if weight.requires_grad else None
    gx = None
    if x.requires_grad:
        gcols = weight.data.reshape(k, -1).T @ gk
        gx = _col2im(gcols, x.shape, kh, kw, ctx["stride"], ctx["pad"])
    grads = [gx, gw]
    if len(inputs) == 3:
        grads.append(gk.sum(axis=1))
    return grads


# ------------------------------------------------------------------ batchnorm


@dataclass
class BatchNormState:
    """Learnable affine parameters and running statistics of one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def __post_init__(self):
        c = self.gamma.shape[0]
        if any(v.shape != (c,) for v in (self.beta.data, self.running_mean, self.running_var)):
            raise ValueError("BatchNormState vectors must all have one entry per channel")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"BatchNorm momentum must lie in (0, 1), got {self.momentum}")
        if not self.eps > 0:
            raise ValueError(f"BatchNorm eps must be positive, got {self.eps}")
        if not np.all(self.running_var > 0):
            raise ValueError("BatchNorm running_var must be strictly positive")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"BatchNorm mode must be 'train' or 'eval', got {self.mode!r}")


def batchnorm2d(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with the biased batch variance and folds the
    batch statistics into the running estimates (the running variance
    uses the unbiased estimate).  Eval mode uses the running statistics.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ValueError(f"batchnorm2d channel mismatch: input has {c}, state has {state.channels}")
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)
    if state.mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm2d in train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean[:] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[:] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma * xhat + beta
    ctx = dict(xhat=xhat, inv_std=inv_std, train=state.mode == "train")
    return _emit("batchnorm2d", out.astype(x.dtype, copy=False), (x, state.gamma, state.beta), ctx)


def _batchnorm2d_backward(ctx, g, inputs):
    x, gamma, _ = inputs
    xhat, inv_std = ctx["xhat"], ctx["inv_std"]
    c = gamma.shape[0]
    dbeta = g.sum(axis=(0, 2, 3))
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    gx = None
    if x.requires_grad:
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        if ctx["train"]:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv_std.reshape(1, c, 1, 1) / m * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std.reshape(1, c, 1, 1)
    return [gx, dgamma, dbeta]


# ------------------------------------------------------------ elementwise ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", x.data * mask, (x,), dict(mask=mask))


def _relu_backward(ctx, g, inputs):
    return [g * ctx["mask"]]


def combine(a: Tensor, b: Tensor, mode: str = "add") -> Tensor:
    """Merge a residual branch with its shortcut by sum or elementwise max.

    In max mode the gradient flows to the larger input; ties go to ``a``.
    """
    if a.shape != b.shape:
        raise ValueError(f"combine shape mismatch: {a.shape} vs {b.shape}")
    if mode == "add":
        return _emit("combine_add", a.data + b.data, (a, b))
    if mode == "max":
        pick_a = a.data >= b.data
        return _emit("combine_max", np.where(pick_a, a.data, b.data), (a, b), dict(pick_a=pick_a))
    raise ValueError(f"combine mode must be 'add' or 'max', got {mode!r}")


def _combine_add_backward(ctx, g, inputs):
    return [g, g]


def _combine_max_backward(ctx, g, inputs):
    pick_a = ctx["pick_a"]
    return [g * pick_a, g * ~pick_a]


# -------------------------------------------------------------------- pooling


def channel_mean(x: Tensor) -> Tensor:
    """Average over the channel axis: [N, C, H, W] -> [N, 1, H, W]."""
    if x.ndim != 4:
        raise ValueError(f"channel_mean expects 4-D input, got shape {x.shape}")
    return _emit("channel_mean", x.data.mean(axis=1, keepdims=True), (x,), dict(c=x.shape[1]))


def _channel_mean_backward(ctx, g, inputs):
    shape = inputs[0].shape
    return [np.broadcast_to(g / ctx["c"], shape).copy()]


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects 4-D input, got shape {x.shape}")
    return _emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,))


def _global_avg_pool_backward(ctx, g, inputs):
    n, c, h, w = inputs[0].shape
    return [np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy()]


def per_channel_gap(x: Tensor) -> Tensor:
    """Same contract as :func:`global_avg_pool`; used for per-channel taps."""
    return global_avg_pool(x)


def flatten(x: Tensor) -> Tensor:
    n = x.shape[0]
    return _emit("flatten", x.data.reshape(n, -1), (x,))


def _reshape_backward(ctx, g, inputs):
    return [g.reshape(inputs[0].shape)]


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one input")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ValueError(f"concat shape mismatch off axis {axis}: {t.shape} vs {ref}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit("concat", out, tensors, dict(sizes=sizes, axis=axis))


def _concat_backward(ctx, g, inputs):
    splits = np.cumsum(ctx["sizes"])[:-1]
    return [np.ascontiguousarray(p) for p in np.split(g, splits, axis=ctx["axis"])]


# --------------------------------------------------------------------- linear


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight of shape [M, D]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear inner dimension mismatch: input {x.shape[1]}, weight {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", out, inputs)


def _linear_backward(ctx, g, inputs):
    x, weight = inputs[0], inputs[1]
    grads = [g @ weight.data if x.requires_grad else None, g.T @ x.data if weight.requires_grad else None]
    if len(inputs) == 3:
        grads.append(g.sum(axis=0))
    return grads


# ----------------------------------------------------------------------- loss


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects [N, M] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, m = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"got {labels.shape[0]} labels for {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[np.arange(n), labels])
    probs = np.exp(z - lse[:, None])
    return _emit("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), dict(probs=probs, labels=labels))


def _softmax_cross_entropy_backward(ctx, g, inputs):
    probs, labels = ctx["probs"], ctx["labels"]
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return [d * (g / n)]


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum_all", np.asarray(x.data.sum(), dtype=x.dtype), (x,))


def _sum_all_backward(ctx, g, inputs):
    return [np.full(inputs[0].shape, g, dtype=inputs[0].dtype)]


BACKWARD_RULES: dict[str, Callable] = {
    "conv2d": _conv2d_backward,
    "batchnorm2d": _batchnorm2d_backward,
    "relu": _relu_backward,
    "combine_add": _combine_add_backward,
    "combine_max": _combine_max_backward,
    "channel_mean": _channel_mean_backward,
    "global_avg_pool": _global_avg_pool_backward,
    "flatten": _reshape_backward,
    "concat": _concat_backward,
    "linear": _linear_backward,
    "softmax_cross_entropy": _softmax_cross_entropy_backward,
    "sum_all": _sum_all_backward,
}


# ------------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Gradients accumulate: a leaf that already carries a gradient (for
    instance from an earlier backward pass) has the new one added to it.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss was not produced under a tape from tensors requiring gradients")
    # Intermediate grads are scoped to this pass; leaves keep accumulating.
    for r in tape.records:
        r.out.grad = None
    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        grads = BACKWARD_RULES[rec.op](rec.ctx, g, rec.inputs)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gi, dtype=t.dtype, copy=True).reshape(t.shape)
            else:
                t.grad = t.grad + gi.reshape(t.shape)


def sgd_momentum_step(
    params: Sequence[Tensor],
    velocities: Sequence[np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """One in-place SGD step with heavy-ball momentum; clears gradients.

    ``v <- momentum * v + grad + weight_decay * p`` then ``p <- p - lr * v``.
    """
    if len(params) != len(velocities):
        raise ValueError("params and velocities must pair up one-to-one")
    for p, v in zip(params, velocities):
        if v.shape != p.shape:
            raise ValueError(f"velocity shape {v.shape} does not match parameter shape {p.shape}")
        g = p.grad if p.grad is not None else 0.0
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
        p.grad = None
