"""Command-line entry point: ``signsal {train,saliency,benchmark,report}``.

Settings come from flags, optionally seeded by an INI-style ``key = value``
file given with ``--config``; flags win. The effective settings of every run
are written to ``run_config.ini`` in its output directory.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Split, compute_stats, ensure_dir, export_image, load_cifar10, synthetic_dataset
from .deletion import (COLORS, DEFAULT_FRACTIONS, DEFAULT_PAIRS, INACTIVE_ORDERS, MapSet,
                       run_benchmark, subsample, write_auc_summary, write_curve_csv)
from .errors import ConfigError, FormatError, ShapeError
from .report import build_report
from .saliency import (KINDS, SCORES, compute_gradient_cube, make_map, normalize_for_display,
                       read_map_archive, write_map_archive)

log = logging.getLogger("signsal")

BOOL_KEYS = {"per_class", "strict_sign"}


class CliError(Exception):
    """Reported to stderr; the process exits with status 2."""


# -- argument parsing ---------------------------------------------------------

def _csv_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from exc


def _pairs(text: str) -> tuple[tuple[str, str], ...]:
    out = []
    for item in text.split(","):
        kind, _, color = item.strip().partition(":")
        if kind not in KINDS or color not in COLORS:
            raise argparse.ArgumentTypeError(f"bad kind:color pair {item!r}")
        out.append((kind, color))
    return tuple(out)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI-style key = value settings file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=False, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=sorted(nn.ARCHITECTURES), default="basic-cnn")
    p.add_argument("--data", type=Path, help="directory holding the CIFAR-10 binary batches")
    p.add_argument("--synthetic", type=int, metavar="N",
                   help="use N synthetic training images instead of CIFAR-10")
    p.add_argument("--num-classes", type=int, default=10, help="synthetic data only")
    p.add_argument("--image-size", type=int, default=32, help="synthetic data only")


def _add_maps(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, required=False)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--score", choices=SCORES, default="logit",
                   help="differentiate logits (default) or softmax probabilities")
    p.add_argument("--strict-sign", action="store_true",
                   help="sign-filter active/inactive maps")
    p.add_argument("--batch-size", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="signsal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    _add_data(p)
    p.add_argument("--epochs", type=int, default=nn.EPOCHS)
    p.add_argument("--lr", type=float, default=nn.LEARNING_RATE)
    p.add_argument("--batch-size", type=int, default=nn.BATCH_SIZE)
    p.add_argument("--weight-decay", type=float, default=nn.WEIGHT_DECAY)

    p = sub.add_parser("saliency", help="export images and their five saliency maps")
    _add_common(p)
    _add_data(p)
    _add_maps(p)
    p.add_argument("--ids", type=_csv_ints, help="comma-separated image ids")
    p.add_argument("--per-class", action="store_true",
                   help="one random correctly classified image per class")
    p.add_argument("--kinds", type=lambda s: tuple(s.split(",")), default=KINDS)

    p = sub.add_parser("benchmark", help="run black/white deletion curves")
    _add_common(p)
    _add_data(p)
    _add_maps(p)
    p.add_argument("--pairs", type=_pairs, default=DEFAULT_PAIRS,
                   help="comma-separated kind:color pairs")
    p.add_argument("--fractions", type=_csv_floats, default=DEFAULT_FRACTIONS)
    p.add_argument("--subset", type=int, help="seeded subsample size")
    p.add_argument("--inactive-order", choices=INACTIVE_ORDERS, default="ascending")
    p.add_argument("--maps", type=Path, help="map archive from 'saliency' to use instead of recomputing")

    p = sub.add_parser("report", help="collate run outputs into a markdown report")
    _add_common(p)
    p.add_argument("--train-dir", type=Path)
    p.add_argument("--saliency-dir", type=Path)
    p.add_argument("--bench-dir", type=Path)
    return parser


def _read_config_file(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    text = path.read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise CliError(f"cannot parse config file {path}: {exc}") from exc
    values = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            values[key.replace("-", "_")] = value
    return values


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    file_values = _read_config_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions} - {"help", "config"}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise CliError(f"unknown config keys for '{args.command}': {', '.join(unknown)}")
    defaults = {}
    for key, value in file_values.items():
        if key in BOOL_KEYS or key == "verbose":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise CliError(f"config key {key} must be a boolean, got {value!r}")
            defaults[key] = value.lower() in ("true", "1", "yes")
        else:
            defaults[key] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- helpers ------------------------------------------------------------------

def _effective_config(args: argparse.Namespace) -> str:
    lines = ["[run]"]
    for key, value in sorted(vars(args).items()):
        if key in ("config", "verbose"):
            continue
        if isinstance(value, tuple):
            value = ",".join(":".join(v) if isinstance(v, tuple) else str(v) for v in value)
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"


def _require_out(args) -> Path:
    if args.out is None:
        raise CliError("--out is required")
    out = ensure_dir(args.out)
    (out / "run_config.ini").write_text(_effective_config(args))
    return out


def _load_splits(args, names=("train", "test")) -> dict[str, Split]:
    """Load the named splits from CIFAR-10 or the synthetic generator."""
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise CliError("--synthetic needs a positive image count")
        shape = (3, args.image_size, args.image_size)
        sizes = {"train": args.synthetic, "test": max(args.synthetic // 2, 1)}
        seeds = {"train": args.seed, "test": args.seed + 1}
        return {n: synthetic_dataset(sizes[n], args.num_classes, seeds[n], shape) for n in names}
    if args.data is None:
        raise CliError("no dataset given: pass --data DIR or --synthetic N")
    if not Path(args.data).is_dir():
        raise CliError(f"dataset directory not found: {args.data}")
    try:
        return dict(zip(names, load_cifar10(args.data, names)))
    except (FileNotFoundError, FormatError) as exc:
        raise CliError(str(exc)) from exc


def _model_config(args, split: Split) -> nn.ModelConfig:
    try:
        return nn.ARCHITECTURES[args.arch](split.images.shape[1:], split.num_classes)
    except ConfigError as exc:
        raise CliError(f"invalid model configuration: {exc}") from exc


def _load_model(args, split: Split):
    if args.checkpoint is None or not Path(args.checkpoint).is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    try:
        store, stats = load_checkpoint(args.checkpoint, _model_config(args, split))
    except (ConfigError, FormatError) as exc:
        raise CliError(str(exc)) from exc
    return store, stats


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    if args.epochs < 0 or args.batch_size < 1 or args.lr <= 0:
        raise CliError("epochs must be >= 0, batch size >= 1 and lr > 0")
    splits = _load_splits(args)
    out = _require_out(args)
    train_split, test_split = splits["train"], splits["test"]
    config = _model_config(args, train_split)
    try:
        stats = compute_stats(train_split)
    except ConfigError as exc:
        raise CliError(str(exc)) from exc
    store = nn.build_model(config, args.seed)

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "test_acc"])

        def on_epoch(e: nn.EpochLog):
            writer.writerow([e.epoch, f"{e.train_loss:.6f}", f"{e.train_acc:.6f}", f"{e.test_acc:.6f}"])
            fh.flush()

        store, _ = nn.train(store, train_split, args.epochs, args.batch_size, args.lr, args.seed,
                            test=test_split, stats=stats, weight_decay=args.weight_decay,
                            on_epoch=on_epoch)
    save_checkpoint(out / "checkpoint.bin", store, stats)
    acc = nn.evaluate_accuracy(store, test_split, stats)
    print(f"final test accuracy: {acc:.4f}")
    return 0


def _select_per_class(store, stats, split: Split, seed: int, batch_size: int) -> list[int]:
    preds = nn.predicted_classes(nn.logits_for(store, split.images, stats, batch_size))
    correct = preds == split.labels
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(split.num_classes):
        candidates = np.flatnonzero(correct & (split.labels == c))
        if len(candidates) == 0:
            raise CliError(f"no correctly classified example of class {c}")
        chosen.append(int(split.ids[rng.choice(candidates)]))
    return chosen


def cmd_saliency(args) -> int:
    unknown = [k for k in args.kinds if k not in KINDS]
    if unknown:
        raise CliError(f"unknown map kinds: {', '.join(unknown)}")
    split = _load_splits(args, (args.split,))[args.split]
    store, stats = _load_model(args, split)
    if args.per_class:
        ids = _select_per_class(store, stats, split, args.seed, args.batch_size)
    elif args.ids:
        ids = list(args.ids)
    else:
        raise CliError("pass --ids or --per-class")
    out = _require_out(args)

    archive = []
    for image_id in ids:
        try:
            idx = split.index_of(image_id)
        except KeyError:
            raise CliError(f"image id {image_id} out of range for the {args.split} split") from None
        raw = split.images[idx]
        x = stats.apply(raw[None])[0] if stats is not None else raw
        cube = compute_gradient_cube(store, x, image_id, args.score)
        export_image(raw, out / f"{image_id}_image.ppm")
        for kind in args.kinds:
            m = make_map(cube, kind, args.strict_sign)
            export_image(normalize_for_display(m), out / f"{image_id}_{kind}.pgm")
            archive.append(m)
    write_map_archive(out / "maps.smap", archive)
    print(f"exported {len(ids)} image(s) to {out}")
    return 0


def _mapset_from_archive(path: Path, store, stats, split: Split, batch_size: int) -> MapSet:
    try:
        records = read_map_archive(path)
    except (FormatError, OSError) as exc:
        raise CliError(str(exc)) from exc
    by_key = {(m.kind, m.image_id): m.values for m in records}
    kinds = sorted({m.kind for m in records})
    maps = {}
    for kind in kinds:
        try:
            maps[kind] = np.stack([by_key[(kind, int(i))] for i in split.ids])
        except KeyError as exc:
            raise CliError(f"map archive lacks a {kind} map for image {exc.args[0][1]}") from None
    preds = nn.predicted_classes(nn.logits_for(store, split.images, stats, batch_size))
    return MapSet(split.ids.copy(), preds, maps)


def cmd_benchmark(args) -> int:
    split = _load_splits(args, (args.split,))[args.split]
    store, stats = _load_model(args, split)
    fractions = np.asarray(args.fractions, dtype=np.float64)
    if len(fractions) == 0 or fractions[0] != 0 or np.any(np.diff(fractions) <= 0) or fractions[-1] > 1:
        raise CliError("--fractions must be strictly increasing in [0, 1] and start at 0")
    if args.subset is not None and args.subset < 1:
        raise CliError("--subset must be positive")
    split = subsample(split, args.subset, args.seed)
    out = _require_out(args)
    maps = None
    if args.maps is not None:
        maps = _mapset_from_archive(args.maps, store, stats, split, args.batch_size)
    curves = run_benchmark(store, split, args.pairs, fractions, stats=stats, score=args.score,
                           strict=args.strict_sign, inactive_order=args.inactive_order,
                           batch_size=args.batch_size, maps=maps)
    for c in curves:
        write_curve_csv(out / f"curve_{c.kind}_{c.color}.csv", c)
    write_auc_summary(out / "auc_summary.csv", curves)
    for c in curves:
        print(f"{c.color:5s} {c.kind:8s} auc {c.auc:.4f}  mean eligible fraction {c.mean_eligible_fraction:.4f}")
    return 0


def cmd_report(args) -> int:
    text, missing = build_report(args.train_dir, args.saliency_dir, args.bench_dir)
    out = _require_out(args)
    (out / "report.md").write_text(text)
    print(text)
    if missing:
        print(f"report written with missing sections: {', '.join(missing)}", file=sys.stderr)
    return 0


COMMANDS = {"train": cmd_train, "saliency": cmd_saliency, "benchmark": cmd_benchmark, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ShapeError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
