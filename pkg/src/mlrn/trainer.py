"""Training engine: schedule, loops, metrics, checkpoints and gradient checks."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .builders import build_arch
from .data import Dataset, batches, load_cifar
from .graph import NetworkGraph, count_params, deserialize_graph, load_graph, serialize_graph
from .model import Model, resolve_dtype
from .transform import apply_multilevel_transform

__all__ = [
    "TrainConfig",
    "ConfigError",
    "MetricsRow",
    "Checkpoint",
    "CheckpointError",
    "TrainingDiverged",
    "GradcheckReport",
    "METRICS_HEADER",
    "lr_schedule",
    "build_model",
    "train",
    "fit",
    "train_epoch",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "gradcheck",
    "read_metrics",
]

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc", "wall_seconds")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Full description of one experiment; mirrored by the key=value config file."""

    arch: str = "resnet20"
    classes: int = 0  # 0: taken from the dataset
    width_mult: int = 1
    combine: str = "add"
    graph_spec: str = ""  # JSON graph file; overrides arch when set
    transform: bool = False
    pool_mode: str = "channel_mean"
    dataset: str = "cifar10"
    data_path: str = ""
    train_limit: int = 0
    test_limit: int = 0
    epochs: int = 400
    batch_size: int = 10
    lr0: float = 0.01
    lr_decay_factor: float = 0.1
    lr_step_epochs: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    output_dir: str = "runs/default"
    precision: str = "single"
    eval_every: int = 0  # 0: every epoch up to 100 epochs, else every 5
    save_every: int = 0
    augment: bool = True
    normalize: bool = True
    wall_clock: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        for name in ("lr0", "lr_decay_factor", "lr_step_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.combine not in ("add", "max"):
            raise ConfigError("combine must be 'add' or 'max'")
        if self.pool_mode not in ("channel_mean", "per_channel_gap"):
            raise ConfigError("pool_mode must be 'channel_mean' or 'per_channel_gap'")
        if self.dataset not in ("cifar10", "cifar100"):
            raise ConfigError("dataset must be 'cifar10' or 'cifar100'")
        resolve_dtype(self.precision)

    @property
    def eval_period(self) -> int:
        if self.eval_every > 0:
            return self.eval_every
        return 1 if self.epochs <= 100 else 5

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def parse_value(cls, key: str, value: str):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        value = value.strip()
        try:
            if kind == "bool":
                low = value.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if kind == "int":
                return int(value)
            if kind == "float":
                return float(value)
        except ValueError:
            raise ConfigError(f"bad value for {key} ({kind}): {value!r}") from None
        return value

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = cls.parse_value(key.strip(), value)
        for k, v in (overrides or {}).items():
            if k not in cls.keys():
                raise ConfigError(f"unknown config key {k!r}")
            values[k] = cls.parse_value(k, v) if isinstance(v, str) else v
        return cls(**values)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), overrides)

    def to_text(self) -> str:
        out = []
        for k in self.keys():
            v = getattr(self, k)
            out.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"


@dataclass
class MetricsRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    wall_seconds: float

    def csv_fields(self) -> list[str]:
        return [str(self.epoch), repr(self.lr), f"{self.train_loss:.8f}", f"{self.train_acc:.6f}",
                f"{self.test_loss:.8f}", f"{self.test_acc:.6f}", f"{self.wall_seconds:.3f}"]


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRow(int(r["epoch"]), *(float(r[k]) for k in METRICS_HEADER[1:])) for r in reader]


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: ``lr0 * decay ** (epoch // step)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_step_epochs)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MLRN"
VERSION = 1


@dataclass
class Checkpoint:
    graph: NetworkGraph
    params: np.ndarray
    velocities: np.ndarray | None
    bn_stats: np.ndarray
    epoch: int = 0
    state: dict = field(default_factory=dict)  # rng state, best accuracy, config

    @classmethod
    def from_model(cls, model: Model, velocities=None, epoch: int = 0, state: dict | None = None) -> "Checkpoint":
        params = np.concatenate([p.data.ravel() for p in model.parameters()]) if model.parameters() else np.zeros(0)
        vel = None if velocities is None else np.concatenate([v.ravel() for v in velocities])
        bufs = model.buffers()
        bn = np.concatenate([b.ravel() for b in bufs]) if bufs else np.zeros(0, model.dtype)
        return cls(model.graph, params.astype(model.dtype), vel, bn.astype(model.dtype), epoch, dict(state or {}))


def _unflatten(flat: np.ndarray, targets) -> None:
    off = 0
    for t in targets:
        t[...] = flat[off : off + t.size].reshape(t.shape)
        off += t.size


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[Model, list[np.ndarray] | None]:
    model = Model(ckpt.graph, dtype=ckpt.params.dtype)
    params = model.parameters()
    _unflatten(ckpt.params, [p.data for p in params])
    _unflatten(ckpt.bn_stats, model.buffers())
    vel = None
    if ckpt.velocities is not None:
        vel = [np.zeros_like(p.data) for p in params]
        _unflatten(ckpt.velocities, vel)
    return model, vel


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout (little-endian)::

        "MLRN" u32 version  u64 len  graph JSON
        u32 scalar bytes (4|8)
        u64 n  params[n]   u64 n  velocities[n]   u64 n  bn running mean/var[n]
        u64 epoch  u64 len  state JSON (RNG state and bookkeeping)
    """
    dt = np.dtype(ckpt.params.dtype).newbyteorder("<")
    spec = serialize_graph(ckpt.graph).encode()
    state = json.dumps(ckpt.state, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<IQ", VERSION, len(spec)) + spec)
    buf.write(struct.pack("<I", dt.itemsize))
    for arr in (ckpt.params, ckpt.velocities if ckpt.velocities is not None else np.zeros(0), ckpt.bn_stats):
        buf.write(struct.pack("<Q", arr.size))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    buf.write(struct.pack("<QQ", ckpt.epoch, len(state)) + state)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint (needed {pos + n} bytes, have {len(raw)})")
        out = raw[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, spec_len = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    graph = deserialize_graph(take(spec_len).decode())
    (width,) = struct.unpack("<I", take(4))
    if width not in (4, 8):
        raise CheckpointError(f"{path}: bad scalar width {width}")
    dt = np.dtype(f"<f{width}")
    arrays = []
    for _ in range(3):
        (n,) = struct.unpack("<Q", take(8))
        arrays.append(np.frombuffer(take(n * width), dtype=dt).astype(dt.newbyteorder("=")))
    epoch, state_len = struct.unpack("<QQ", take(16))
    state = json.loads(take(state_len).decode())
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    params, vel, bn = arrays
    expected = count_params(graph)
    if params.size != expected:
        raise CheckpointError(f"{path}: {params.size} parameters stored, graph has {expected}")
    if vel.size not in (0, expected):
        raise CheckpointError(f"{path}: {vel.size} velocities for {expected} parameters")
    n_bn = 2 * sum(n["channels"] for n in graph.nodes_of_kind("bn"))
    if bn.size != n_bn:
        raise CheckpointError(f"{path}: {bn.size} BN statistics stored, graph has {n_bn}")
    return Checkpoint(graph, params, vel if vel.size else None, bn, int(epoch), state)


# ------------------------------------------------------------------ evaluation


def _logits_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)[0]
    if isinstance(model, Model):
        return model.predict_logits
    return model


def evaluate(model, ds: Dataset, batch_size: int = 500, normalized: bool = True) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy; BN in eval mode, no augmentation.

    ``model`` may be a :class:`Model`, a :class:`Checkpoint`, a checkpoint
    path, or any callable mapping an image batch to logits.  Argmax ties
    resolve to the lowest class index.
    """
    fn = _logits_fn(model)
    dtype = getattr(getattr(model, "dtype", None), "type", np.float32)
    total_loss, correct = 0.0, 0
    for x, y in batches(ds, batch_size, shuffle=False, augment=False, normalized=normalized, dtype=dtype):
        logits = np.asarray(fn(x), dtype=np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        total_loss += float(np.sum(lse - z[np.arange(len(y)), y]))
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    n = len(ds)
    return total_loss / n, correct / n


# -------------------------------------------------------------------- training


def build_model(cfg: TrainConfig, classes: int) -> Model:
    if cfg.graph_spec:
        graph = load_graph(cfg.graph_spec)
    else:
        graph = build_arch(cfg.arch, classes, cfg.width_mult, cfg.combine, cfg.pool_mode)
    if cfg.transform:
        graph = apply_multilevel_transform(graph, cfg.pool_mode)
    if graph.class_count != classes:
        raise ConfigError(f"graph has {graph.class_count} classes, dataset needs {classes}")
    return Model(graph, seed=cfg.seed, dtype=cfg.precision)


def _load_data(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    path = cfg.data_path or None
    tr = load_cifar(path, cfg.dataset, "train").subset(cfg.train_limit)
    te = load_cifar(path, cfg.dataset, "test").subset(cfg.test_limit)
    return tr, te


def train(cfg: TrainConfig, train_ds: Dataset | None = None, test_ds: Dataset | None = None,
          resume=None) -> MetricsRow:
    """Run the configured experiment, writing ``metrics.csv`` and checkpoints.

    Output directory contents: ``config.cfg``, ``metrics.csv``,
    ``best.ckpt`` (highest test accuracy, earliest on ties), ``last.ckpt``
    and ``epoch{N}.ckpt`` every ``save_every`` epochs.  ``resume`` is a
    checkpoint (or path) to continue from.
    """
    if train_ds is None or test_ds is None:
        tr, te = _load_data(cfg)
        train_ds, test_ds = train_ds or tr, test_ds or te
    classes = cfg.classes or train_ds.class_count
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        model, velocities = model_from_checkpoint(ckpt)
        if velocities is None:
            velocities = [np.zeros_like(p.data) for p in model.parameters()]
        state, start = ckpt.state, ckpt.epoch
    else:
        model = build_model(cfg, classes)
        velocities = [np.zeros_like(p.data) for p in model.parameters()]
        state, start = {}, 0
    return fit(model, velocities, cfg, train_ds, test_ds, state, start_epoch=start)


def train_epoch(model: Model, velocities, ds: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                epoch: int) -> tuple[float, float]:
    """One shuffled (optionally augmented) pass of SGD; returns running loss and accuracy."""
    lr = lr_schedule(epoch, cfg)
    params = model.parameters()
    model.train()
    loss_sum, correct, seen = 0.0, 0, 0
    for b, (x, y) in enumerate(batches(ds, cfg.batch_size, rng, True, cfg.augment, cfg.normalize, model.dtype.type)):
        try:
            with T.Tape() as tape:
                logits = model(x)
                loss = T.softmax_cross_entropy(logits, y)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"non-finite forward pass at epoch {epoch}, batch {b}, lr {lr}: {exc}") from None
        T.backward(loss, tape)
        T.sgd_momentum_step(params, velocities, lr, cfg.momentum, cfg.weight_decay)
        loss_sum += float(loss.data) * len(y)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
        seen += len(y)
    return loss_sum / seen, correct / seen


def fit(model: Model, velocities, cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset | None,
        state: dict | None = None, start_epoch: int = 0, out_dir=None) -> MetricsRow:
    state = dict(state or {})
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    rng = np.random.default_rng([cfg.seed, 1])
    if "rng" in state:
        rng.bit_generator.state = state["rng"]
    best_acc = state.get("best_acc", -1.0)
    metrics_path = out / "metrics.csv"
    if start_epoch == 0 or not metrics_path.exists():
        metrics_path.write_text(",".join(METRICS_HEADER) + "\n")
    else:
        # resuming in place: drop rows the resumed run will rewrite
        lines = metrics_path.read_text().splitlines(keepends=True)
        metrics_path.write_text("".join(lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= start_epoch]))
    t0 = time.perf_counter()
    row = None

    def snapshot(epoch: int) -> Checkpoint:
        st = {"rng": rng.bit_generator.state, "best_acc": best_acc, "best_epoch": state.get("best_epoch")}
        return Checkpoint.from_model(model, velocities, epoch, st)

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        train_loss, train_acc = train_epoch(model, velocities, train_ds, cfg, rng, epoch)
        done = epoch + 1
        if done % cfg.eval_period == 0 or done == cfg.epochs:
            test_loss, test_acc = evaluate(model, test_ds, normalized=cfg.normalize) if test_ds is not None else (float("nan"), float("nan"))
            wall = time.perf_counter() - t0 if cfg.wall_clock else 0.0
            row = MetricsRow(done, lr, train_loss, train_acc, test_loss, test_acc, wall)
            with open(metrics_path, "a") as fh:
                fh.write(",".join(row.csv_fields()) + "\n")
            log.info("epoch %d lr %.2g train %.4f/%.4f test %.4f/%.4f", done, lr, row.train_loss,
                     row.train_acc, test_loss, test_acc)
            if test_acc > best_acc:
                best_acc = test_acc
                state["best_epoch"] = done
                save_checkpoint(snapshot(done), out / "best.ckpt")
        if cfg.save_every and done % cfg.save_every == 0:
            save_checkpoint(snapshot(done), out / f"epoch{done}.ckpt")
    save_checkpoint(snapshot(cfg.epochs), out / "last.ckpt")
    return row


# ------------------------------------------------------------------ gradcheck


@dataclass
class GradcheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: str
    per_tensor: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:g}) "
                f"over {self.checked} coordinates; worst at {self.worst}")


def _rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(
    arch: str = "resnet20",
    tolerance: float = 1e-4,
    *,
    transform: bool = False,
    pool_mode: str = "channel_mean",
    combine: str = "add",
    graph: NetworkGraph | None = None,
    classes: int = 5,
    batch: int = 2,
    input_size: int = 8,
    base_width: int | None = None,
    samples_per_tensor: int = 6,
    h: float = 1e-5,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradcheckReport:
    """Compare backprop gradients of a tiny model with central differences.

    A narrow instance of ``arch`` on ``input_size`` inputs is built in double
    precision (BN in train mode).  For the input and every parameter
    tensor, ``samples_per_tensor`` random coordinates are checked.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if graph is None:
        if base_width is None:
            base_width = 4 if arch == "newnet" else 2
        graph = build_arch(arch, classes, 1, combine, pool_mode, base_width=base_width, input_size=input_size)
        if transform:
            graph = apply_multilevel_transform(graph, pool_mode)
    rng = np.random.default_rng(seed)
    model = Model(graph, seed=seed, dtype="double").train()
    for st in model.bn.values():
        st.gamma.data[...] = rng.uniform(0.5, 1.5, st.channels)
        st.beta.data[...] = rng.normal(0, 0.1, st.channels)
    shape = (batch,) + tuple(graph.input_node["shape"])
    x = T.Tensor(rng.standard_normal(shape), requires_grad=True)
    y = rng.integers(0, graph.class_count, size=batch)

    def loss_value() -> float:
        return float(T.softmax_cross_entropy(model(x), y).data)

    model.zero_grad()
    with T.Tape() as tape:
        loss = T.softmax_cross_entropy(model(x), y)
    T.backward(loss, tape)

    named = [("input", x)] + model.named_parameters()
    per_tensor: dict[str, float] = {}
    worst, worst_at, checked = 0.0, "", 0
    for name, t in named:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        idx = rng.choice(t.size, size=min(samples_per_tensor, t.size), replace=False)
        errs = []
        for i in idx:
            orig = t.data.flat[i]
            t.data.flat[i] = orig + h
            up = loss_value()
            t.data.flat[i] = orig - h
            down = loss_value()
            t.data.flat[i] = orig
            numeric = (up - down) / (2 * h)
            e = _rel_error(float(analytic.flat[i]), numeric, floor)
            errs.append(e)
            if e > worst:
                worst, worst_at = e, f"{name}[{int(i)}]"
        checked += len(idx)
        per_tensor[name] = max(errs)
    return GradcheckReport(worst, tolerance, checked, worst_at or "-", per_tensor)
