# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""The l2sa command line.

Run "python3 -m l2sa <command> --help" for the flags of each command.
Every flag may also be given in a config file passed with --config,
one "key = value" per line with the long flag name as the key.  Flags
on the command line take precedence over the config file, which takes
precedence over the built-in defaults.

Exit codes: 0 success, 1 engine error, 2 usage or configuration error,
3 dataset error, 4 checkpoint error, 5 failed gradient check.
"""

__all__ = ['main', 'build_parser', 'read_config', 'EXIT_CODES']

import os
import sys
import logging
import argparse
from collections import OrderedDict

from paranoid.exceptions import VerifyError

from .settings import Settings
from .exceptions import (EngineError, ConfigError, DatasetError, CheckpointError,
                         GradCheckFailure, DivergenceError, GraphError)
from .model import MODELS, build_model, count_parameters, init_parameters, parameter_table
from .checkpoint import read_checkpoint
from .data import load_directory, synth_dataset, split, read_manifest, write_image_tree, summary
from .train import TrainConfig, train, evaluate, run_ablation
from .gradcheck import FRAGMENTS, certify
from .benchmark import benchmark_inference
from ._version import __version__

logger = logging.getLogger(__name__)

# Most specific first
EXIT_CODES = OrderedDict([
    (ConfigError, 2),
    (DatasetError, 3),
    (CheckpointError, 4),
    (GradCheckFailure, 5),
    (EngineError, 1)])

def _boolean(text):
    if isinstance(text, bool):
        return text
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError("expected true or false, got %r" % text)

def _integers(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected a comma separated list of integers, got %r" % text)

def _fractions(text):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected three comma separated fractions, got %r" % text)
    if len(values) != 3 or min(values) < 0 or abs(sum(values) - 1) > 1e-9:
        raise argparse.ArgumentTypeError("fractions must be three non-negative numbers summing to 1")
    return values

def _common(p):
    g = p.add_argument_group("general")
    g.add_argument("--config", default=None, help="key = value file supplying defaults for any flag")
    g.add_argument("--precision", default="f32", choices=["f32", "f64"], help="element type")
    g.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    g.add_argument("--workers", type=int, default=1, help="threads for image loading and repeats")
    g.add_argument("--verify", type=_boolean, default=True,
                   help="check entry and exit conditions at runtime")
    g.add_argument("--out", default="runs", help="output directory")

def _data(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", default="dir", choices=["dir", "synthetic"],
                   help="read images from --data-root, or generate them")
    g.add_argument("--data-root", default=None, help="directory with one subdirectory per class")
    g.add_argument("--image-size", type=int, default=None,
                   help="side of the square input (default 256, or 64 for synthetic data)")
    g.add_argument("--per-class", type=int, default=12, help="synthetic images per class")
    g.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic images")
    g.add_argument("--fractions", type=_fractions, default=(.7, .1, .2), help="train,val,test fractions")
    g.add_argument("--split-seed", type=int, default=0, help="seed of the train/val/test shuffle")
    g.add_argument("--manifest", default=None, help="split manifest to reuse instead of splitting")

def _model(p, model=True):
    g = p.add_argument_group("model")
    if model:
        g.add_argument("--model", default="l2sa", choices=list(MODELS))
    g.add_argument("--sab-kernels", type=_integers, default=None,
                   help="l2-SAB kernel per attention site (default: the backbone kernels)")
    g.add_argument("--skips", type=_boolean, default=True, help="multiplicative skip connections A, B, C")
    g.add_argument("--cbam-kernel", type=int, default=7, help="CBAM spatial attention kernel")
    g.add_argument("--channels", type=_integers, default=None, help="backbone channels per stage")
    g.add_argument("--kernels", type=_integers, default=None, help="backbone kernels per stage")
    g.add_argument("--pools", type=_integers, default=None, help="max pooling factor per stage")
    g.add_argument("--head", type=int, default=None, help="width of the hidden dense layer")

def _training(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=50)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--lr", type=float, default=0.01, help="Adam learning rate")
    g.add_argument("--adam-epsilon", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0, help="seed of the first repeat")
    g.add_argument("--repeats", type=int, default=1, help="independent runs; the best is kept")

def build_parser():
    """The argument parser, and a dict of its subcommand parsers."""
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="l2sa", formatter_class=fmt,
                                     description="l2-normalized spatial attention networks")
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    commands = OrderedDict()
    def command(name, help, *groups):
        p = sub.add_parser(name, help=help, formatter_class=fmt)
        for g in groups:
            g(p)
        _common(p)
        commands[name] = p
        return p
    command("train", "train a model, repeated over seeds", _data, _model, _training)
    p = command("eval", "evaluate a checkpoint on one split", _data)
    p.add_argument("--checkpoint", default=None, help="checkpoint file to evaluate")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--batch-size", type=int, default=64)
    p = command("gradcheck", "certify gradients by central differences")
    p.add_argument("--module", default="all", help="one of %s, or all" % ", ".join(FRAGMENTS))
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--instances", type=int, default=20, help="random shapes per module")
    p.add_argument("--samples", type=int, default=20, help="coordinates checked per block")
    p = command("bench", "time inference", _model)
    p.add_argument("--checkpoint", default=None, help="benchmark this checkpoint instead of --model")
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    command("split", "split a dataset and write its manifest", _data)
    p = command("synth", "write a synthetic dataset as an image directory")
    p.add_argument("--per-class", type=int, default=12)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--data-seed", type=int, default=0)
    p = command("params", "parameter counts beside the published figures")
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--classes", type=int, default=3)
    command("ablate", "train l2-SA with and without skip connections", _data,
            lambda p : _model(p, model=False), _training)
    return parser, commands

def read_config(path):
    """Read a flat "key = value" file into an ordered dict keyed by
    argument destination (dashes become underscores)."""
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError("Cannot read config file %s: %s" % (path, e.strerror))
    values = OrderedDict()
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("%s:%i: expected 'key = value', got %r" % (path, n, line))
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("%s:%i: missing key" % (path, n))
        values[key.lstrip("-").replace("-", "_")] = value
    return values

def _apply_config(args, argv, parser, commands):
    values = read_config(args.config)
    values.pop("config", None)
    known = {a.dest for c in commands.values() for a in c._actions}
    unknown = [k for k in values if k not in known]
    if unknown:
        raise ConfigError("%s: unknown keys %s" % (args.config, ", ".join(unknown)))
    command = commands[args.command]
    own = {a.dest for a in command._actions}
    command.set_defaults(**{k : v for k,v in values.items() if k in own})
    return parser.parse_args(argv)

def _image_size(args):
    if args.image_size is not None:
        return args.image_size
    return 64 if args.dataset == "synthetic" else 256

def _read_dataset(args, size=None):
    """The unsplit dataset named by the flags."""
    size = size or _image_size(args)
    if args.dataset == "synthetic":
        ds = synth_dataset(3, args.per_class, args.data_seed, size)
    elif args.dataset == "dir":
        if args.data_root is None:
            raise ConfigError("--data-root is required with --dataset dir")
        ds = load_directory(args.data_root, size=size, workers=args.workers)
    else:
        raise ConfigError("--dataset must be dir or synthetic, got %s" % args.dataset)
    return ds

def _load_dataset(args, size=None):
    """The dataset named by the flags, split by --manifest or by
    --fractions and --split-seed."""
    ds = _read_dataset(args, size)
    if args.manifest is not None:
        if os.path.exists(args.manifest):
            return read_manifest(args.manifest, ds)
        os.makedirs(os.path.dirname(args.manifest) or ".", exist_ok=True)
    return split(ds, args.fractions, args.split_seed, args.manifest)

def _model_options(args, dataset_shape, classes):
    return dict(input_shape=tuple(dataset_shape), classes=classes,
                sab_kernels=args.sab_kernels, skips_enabled=args.skips,
                K=args.cbam_kernel, channels=args.channels, kernels=args.kernels,
                pools=args.pools, head=args.head)

def _build_graph(name, options):
    """Build a model from command line options; an inconsistent network
    is a configuration error."""
    try:
        return build_model(name, **options)
    except GraphError as e:
        raise ConfigError("Invalid network options: %s" % e)

def _train_config(args):
    try:
        return TrainConfig(args.lr, args.adam_epsilon, batch_size=args.batch_size,
                           epochs=args.epochs, seed=args.seed, repeats=args.repeats)
    except Exception as e:
        raise ConfigError("Invalid training settings: %s" % str(e).split("\n")[0])

def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(text + "\n")

def cli_train(args):
    dataset = _load_dataset(args)
    graph = _build_graph(args.model, _model_options(args, dataset.input_shape(),
                                                    len(dataset.class_names)))
    cfg = _train_config(args)
    print("Training %s (%i parameters) on %s" % (graph.name, count_parameters(graph), summary(dataset)))
    report = train(graph, dataset, cfg, args.out, graph.name)
    print(report.to_kv())
    if report.best is None:
        raise DivergenceError("All %i runs diverged" % len(report.runs))
    print("Run directory: %s" % os.path.join(args.out, graph.name))
    return 0

def cli_eval(args):
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    ckpt = read_checkpoint(args.checkpoint)
    dataset = _load_dataset(args, ckpt.graph.input_shape[2])
    metrics = evaluate(ckpt.graph, ckpt.params, dataset,
                       None if args.split == "all" else args.split, args.batch_size)
    text = metrics.to_kv()
    _write(os.path.join(args.out, "eval_%s.kv" % args.split), text)
    print("%s on %s split:" % (args.checkpoint, args.split))
    print(text)
    return 0

def cli_gradcheck(args):
    Settings.set(precision='f64')
    names = None if args.module == "all" else [n.strip() for n in args.module.split(",")]
    reports = certify(names, args.instances, args.tolerance, args.samples)
    _write(os.path.join(args.out, "gradcheck.txt"), "\n\n".join(r.to_table() for r in reports))
    _write(os.path.join(args.out, "gradcheck.kv"), "\n".join(r.to_kv() for r in reports))
    failed = []
    print("%-20s %9s %14s %9s %7s" % ("module", "instances", "max_rel_error", "excluded", "status"))
    for name in OrderedDict.fromkeys(r.fragment for r in reports):
        rs = [r for r in reports if r.fragment == name]
        ok = all(r.passed for r in rs)
        if not ok:
            failed.append(name)
        print("%-20s %9i %14.3e %9i %7s" % (name, len(rs), max(r.max_error for r in rs),
                                            sum(r.excluded for r in rs), "pass" if ok else "FAIL"))
    if failed:
        raise GradCheckFailure("Gradient check failed for %s" % ", ".join(failed))
    return 0

def cli_bench(args):
    if args.checkpoint is not None:
        ckpt = read_checkpoint(args.checkpoint)
        graph, params = ckpt.graph, ckpt.params.astype(Settings.dtype())
    else:
        options = _model_options(args, (3, args.image_size, args.image_size), args.classes)
        graph = _build_graph(args.model, options)
        params = init_parameters(graph, args.seed)
    report = benchmark_inference(graph, params, args.iterations, args.warmup,
                                 args.batch_size, seed=args.seed)
    text = "model = %s\n%s" % (graph.name, report.to_kv())
    _write(os.path.join(args.out, "bench_%s.kv" % graph.name), text)
    print(text)
    return 0

def cli_split(args):
    manifest = args.manifest or os.path.join(args.out, "split.tsv")
    os.makedirs(os.path.dirname(manifest) or ".", exist_ok=True)
    dataset = split(_read_dataset(args), args.fractions, args.split_seed, manifest)
    print(summary(dataset))
    print("Manifest: %s" % manifest)
    return 0

def cli_synth(args):
    dataset = synth_dataset(3, args.per_class, args.data_seed, args.image_size)
    write_image_tree(dataset, args.out)
    print("Wrote %i images to %s: %s" % (len(dataset), args.out, summary(dataset)))
    return 0

def cli_params(args):
    rows = parameter_table((3, args.image_size, args.image_size), args.classes)
    print("%-14s %12s %12s %12s" % ("model", "parameters", "published", "difference"))
    for name, n, published, delta in rows:
        print("%-14s %12i %12i %+12i" % (name, n, published, delta))
    return 0

def cli_ablate(args):
    dataset = _load_dataset(args)
    cfg = _train_config(args)
    options = _model_options(args, dataset.input_shape(), len(dataset.class_names))
    options.pop("skips_enabled")
    options.pop("K")
    _build_graph("l2sa", options)
    reports, table = run_ablation(dataset, cfg, args.out, **options)
    _write(os.path.join(args.out, "ablation.txt"), table)
    print(table)
    return 0

COMMANDS = {"train" : cli_train, "eval" : cli_eval, "gradcheck" : cli_gradcheck,
            "bench" : cli_bench, "split" : cli_split, "synth" : cli_synth,
            "params" : cli_params, "ablate" : cli_ablate}

def _configure(args):
    try:
        Settings.set(precision=args.precision, log_level=args.log_level,
                     workers=args.workers, verify=args.verify)
    except ValueError as e:
        raise ConfigError(str(e))
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")

def main(argv=None):
    """Run one command and return its exit code."""
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config is not None:
            args = _apply_config(args, argv, parser, commands)
        _configure(args)
        return COMMANDS[args.command](args)
    except EngineError as e:
        code = next(c for cls,c in EXIT_CODES.items() if isinstance(e, cls))
        logger.debug("Command failed", exc_info=True)
        print("l2sa: error: %s" % e, file=sys.stderr)
        return code
    except VerifyError as e:
        print("l2sa: error: %s" % str(e).split("\n")[0], file=sys.stderr)
        return 1
