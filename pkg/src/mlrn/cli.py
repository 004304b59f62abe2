"""Command-line entry point: ``mlrn <summary|transform|train|eval|gradcheck|plot>``.

Exit codes: 0 success, 1 check failed or training diverged, 2 usage
error, 3 I/O error, 4 transform precondition not met, 5 invalid input
(graph spec, config or checkpoint).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .builders import ARCH_NAMES, build_arch, stage_outputs
from .data import DataFormatError, load_cifar
from .graph import GraphError, infer_shapes, load_graph, param_breakdown, save_graph
from .transform import POOL_MODES, TransformError, apply_multilevel_transform, classifier_layout
from .trainer import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    gradcheck,
    read_metrics,
    train,
)

EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_TRANSFORM, EXIT_INVALID = 1, 2, 3, 4, 5
DATA_ENV = "MLRN_DATA"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_arch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=ARCH_NAMES, default="resnet32")
    p.add_argument("--spec", help="JSON graph spec to use instead of --arch")
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--width-mult", type=int, default=1)
    p.add_argument("--combine", choices=("add", "max"), default="add")
    p.add_argument("--pool", choices=POOL_MODES, default="channel_mean")
    p.add_argument("--transform", action="store_true", help="apply the multi-level transform")


def _graph_from_args(args):
    g = load_graph(args.spec) if args.spec else build_arch(args.arch, args.classes, args.width_mult, args.combine, args.pool)
    if args.transform:
        g = apply_multilevel_transform(g, args.pool)
    return g


def cmd_summary(args) -> int:
    g = _graph_from_args(args)
    shapes = infer_shapes(g)
    counts = param_breakdown(g)
    print(f"network {g.name}  classes {g.class_count}")
    print("\nstage outputs:")
    for i, nid in enumerate(stage_outputs(g), 1):
        print(f"  stage {i}: {'x'.join(map(str, shapes[nid][1:]))}  ({nid})")
    print(f"\n{'node':<44} {'kind':<16} {'output':<14} {'params':>10}")
    for n in g.nodes:
        learn = counts.get(n.id, (0, 0))[0]
        print(f"{n.id:<44} {n.kind:<16} {'x'.join(map(str, shapes[n.id][1:])):<14} {learn:>10}")
    total = sum(v[0] for v in counts.values())
    buffers = sum(v[1] for v in counts.values())
    lin = g.inputs_of(g.output_node.id)[0]
    print(f"\nclassifier input width: {g.node(lin)['in_features']}")
    try:
        segs = classifier_layout(g)
        print("classifier segments: " + " + ".join(f"{w} ({k[0]})" for k, w in segs))
    except TransformError:
        pass
    print(f"total learnable parameters: {total}")
    print(f"BN running statistics (not learnable): {buffers}")
    if args.save_spec:
        save_graph(g, args.save_spec)
        print(f"wrote {args.save_spec}")
    return 0


def cmd_transform(args) -> int:
    g = load_graph(args.input)
    out = apply_multilevel_transform(g, args.pool)
    save_graph(out, args.output)
    added = len(out.nodes) - len(g.nodes)
    lin = out.inputs_of(out.output_node.id)[0]
    print(f"{g.name} -> {out.name}: {added} nodes added, classifier input width "
          f"{g.node(lin)['in_features']} -> {out.node(lin)['in_features']}")
    return 0


_TRAIN_KEYS = TrainConfig.keys()


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in _TRAIN_KEYS if getattr(args, k, None) is not None}
    if args.config:
        cfg = TrainConfig.from_file(args.config, overrides)
    else:
        cfg = TrainConfig.from_text("", overrides)
    if not cfg.data_path and os.environ.get(DATA_ENV):
        cfg.data_path = os.environ[DATA_ENV]
    row = train(cfg, resume=args.resume)
    print(f"final epoch {row.epoch}: train_loss {row.train_loss:.4f} train_acc {row.train_acc:.4f} "
          f"test_loss {row.test_loss:.4f} test_acc {row.test_acc:.4f}")
    print(f"outputs in {cfg.output_dir}")
    return 0


def cmd_eval(args) -> int:
    path = args.path or os.environ.get(DATA_ENV)
    if not path:
        raise FileNotFoundError(f"no dataset location: pass --path or set {DATA_ENV}")
    ds = load_cifar(path, args.data, args.split).subset(args.limit)
    loss, acc = evaluate(args.checkpoint, ds, normalized=not args.no_normalize)
    print(f"loss {loss:.6f} accuracy {acc:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck(args.arch, args.tol, transform=args.transform, pool_mode=args.pool,
                       combine=args.combine, samples_per_tensor=args.samples, seed=args.seed)
    print(report)
    return 0 if report.passed else EXIT_FAIL


def cmd_plot(args) -> int:
    from .plot import render_svg

    Path(args.out).write_text(render_svg(read_metrics(args.metrics)), encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlrn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("summary", help="per-stage shapes and parameter counts")
    _add_arch_flags(p)
    p.add_argument("--save-spec", help="also write the graph spec JSON here")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("transform", help="apply the multi-level transform to a graph spec file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--pool", choices=POOL_MODES, default="channel_mean")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("train", help="run a training experiment")
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--resume", help="checkpoint to continue from")
    for key in _TRAIN_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", choices=("cifar10", "cifar100"), default="cifar10")
    p.add_argument("--path", help=f"dataset directory (default: ${DATA_ENV})")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    p.add_argument("--arch", choices=ARCH_NAMES, default="resnet20")
    p.add_argument("--combine", choices=("add", "max"), default="add")
    p.add_argument("--pool", choices=POOL_MODES, default="channel_mean")
    p.add_argument("--transform", action="store_true")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=6, help="coordinates checked per tensor")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="SVG loss/accuracy curves from a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TransformError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRANSFORM
    except (GraphError, ConfigError, CheckpointError, DataFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
