"""Command-line surface: dataset generation plus the three experiment
protocols (model comparison, label propagation, generalization), along
with standalone prediction and evaluation.

Every command is reproducible: a config file (key=value lines, '#'
comments) plus flags (flags win) and a master seed determine all output
bytes. The master seed is stretched into independent split /
initialization / training subseeds, so the two architectures of the
comparison experiment train on the identical split with identical batch
orders.

The propagation experiment holds the SGD-update budget constant across
splits: --epochs is measured in epochs of the fully annotated 80/20
reference protocol, and sparser splits train correspondingly more
epochs, so split comparisons vary only the annotation budget.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 training divergence, 5 file I/O error.
"""

import argparse
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from dilseg import data, metrics, net, train
from dilseg.errors import (
    ConfigError,
    DatasetError,
    DegenerateDataError,
    DivergenceError,
    LabelError,
    ModelIOError,
    PixmapError,
    SchemaError,
    ShapeError,
    SplitError,
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything an experiment run depends on; every field has a default."""

    data: str = ""
    out: str = ""
    seed: int = 0
    variant: str = net.VARIANT_DILATED
    split: float = 0.8
    epochs: int = 60
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    base_channels: int = 8


_CONFIG_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config_file(path):
    """key=value lines into a dict with ExperimentConfig field types."""
    out = {}
    try:
        with open(path, encoding="ascii") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for ln, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        kind = _CONFIG_TYPES[key]
        try:
            if kind is int or kind == "int":
                out[key] = int(value)
            elif kind is float or kind == "float":
                out[key] = float(value)
            else:
                out[key] = value
        except ValueError as exc:
            raise ConfigError(f"{path}:{ln}: bad value for {key}: {value!r}") from exc
    return out


def resolve_config(args, **command_defaults):
    """Defaults < config file < command line, as an ExperimentConfig."""
    cfg = replace(ExperimentConfig(), **command_defaults)
    if getattr(args, "config", None):
        cfg = replace(cfg, **parse_config_file(args.config))
    overrides = {
        name: getattr(args, name)
        for name in _CONFIG_TYPES
        if getattr(args, name, None) is not None
    }
    cfg = replace(cfg, **overrides)
    if cfg.variant not in (net.VARIANT_STANDARD, net.VARIANT_DILATED):
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    return cfg


def subseeds(master):
    """Master seed -> (split_seed, net_seed, train_seed), independent streams."""
    state = np.random.SeedSequence(master).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def _require(cfg, *names):
    for name in names:
        if not getattr(cfg, name):
            raise ConfigError(f"missing required setting {name!r} (flag --{name})")


def _write_text(path, text):
    data._atomic_write(path, text.encode("ascii"))


def _predict_labels_for(network, image):
    return np.asarray(network.forward(image).data.argmax(axis=0), dtype=np.int64)


def _evaluate_sides(network, subsets):
    reports = {}
    for side, subset in subsets.items():
        preds = [_predict_labels_for(network, img) for _, img, _ in subset]
        truths = [lab for _, _, lab in subset]
        reports[side] = metrics.dsc_report(preds, truths)
    return reports


def _train_variant(variant, train_items, cfg, net_seed, train_seed):
    builders = {
        net.VARIANT_STANDARD: net.build_standard_fcn,
        net.VARIANT_DILATED: net.build_dilated_fcn,
    }
    network = builders[variant](
        num_classes=data.NUM_CLASSES, base_channels=cfg.base_channels, seed=net_seed
    )
    hp = train.HyperParams(
        learning_rate=cfg.lr,
        momentum=cfg.momentum,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=train_seed,
    )
    pairs = [(img, lab) for _, img, lab in train_items]
    return train.train(network, pairs, hp)


def cmd_generate(args):
    params = data.PhantomParams(
        image_size=args.size,
        n_slices=args.slices,
        seed=args.seed,
        scale=args.scale,
        jitter=args.jitter,
        noise=args.noise,
        distribution_shift=args.shift,
    )
    out_dir = args.out_dir
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not args.force:
        raise ConfigError(
            f"output directory {out_dir} is not empty; pass --force to overwrite"
        )
    dataset = data.generate_phantom(params)
    data.write_dataset(dataset, out_dir)
    print(f"wrote {params.n_slices} slices ({params.image_size}x{params.image_size}) "
          f"to {out_dir}")
    return 0


def cmd_compare(args):
    cfg = resolve_config(args, split=0.8)
    _require(cfg, "data", "out")
    dataset = data.load_dataset(cfg.data)
    split_seed, net_seed, train_seed = subseeds(cfg.seed)
    train_items, test_items = train.split_dataset(
        dataset, train.SplitSpec(cfg.split, seed=split_seed)
    )
    os.makedirs(cfg.out, exist_ok=True)
    columns = []
    test_reports = {}
    for variant in (net.VARIANT_STANDARD, net.VARIANT_DILATED):
        network, log = _train_variant(variant, train_items, cfg, net_seed, train_seed)
        net.save_model(network, os.path.join(cfg.out, f"{variant}.dseg"))
        train.write_loss_log(os.path.join(cfg.out, f"loss_{variant}.csv"), log)
        reports = _evaluate_sides(
            network, {"train": train_items, "test": test_items}
        )
        columns.append((f"train_{variant}", reports["train"]))
        columns.append((f"test_{variant}", reports["test"]))
        test_reports[variant] = reports["test"]
    comparison = metrics.make_comparison(
        columns,
        test_reports[net.VARIANT_STANDARD],
        test_reports[net.VARIANT_DILATED],
    )
    _write_text(os.path.join(cfg.out, "comparison.csv"),
                metrics.render_comparison_csv(comparison))
    text = metrics.render_comparison_text(comparison)
    _write_text(os.path.join(cfg.out, "comparison.txt"), text)
    print(text, end="")
    return 0


def _write_predictions(out_dir, network, items, with_overlays=True):
    pred_dir = os.path.join(out_dir, "pred")
    overlay_dir = os.path.join(out_dir, "overlays")
    os.makedirs(pred_dir, exist_ok=True)
    if with_overlays:
        os.makedirs(overlay_dir, exist_ok=True)
    preds = []
    for slice_id, image, _ in items:
        pred = _predict_labels_for(network, image)
        preds.append(pred)
        data.save_labels(pred, os.path.join(pred_dir, f"slice_{slice_id}.pgm"))
        if with_overlays:
            data.save_image(data.overlay(image, pred),
                            os.path.join(overlay_dir, f"slice_{slice_id}.ppm"))
    return preds


_REFERENCE_TRAIN_FRACTION = 0.8


def _budget_epochs(n_total, n_train, cfg):
    """Epochs giving this split the update budget of the reference split.

    Label propagation varies the annotation budget, not the optimization
    budget: every split trains for as many SGD updates as cfg.epochs
    epochs perform on the fully annotated reference (80/20) protocol.
    With an epoch-count budget a sparse split would get proportionally
    fewer updates and the comparison would conflate the two budgets.
    """
    ref_train = int(round(_REFERENCE_TRAIN_FRACTION * n_total))
    ref_batches = max(1, -(-ref_train // cfg.batch_size))
    batches = max(1, -(-n_train // cfg.batch_size))
    return max(1, -(-cfg.epochs * ref_batches // batches))


def cmd_propagate(args):
    cfg = resolve_config(args, split=0.2)
    _require(cfg, "data", "out")
    dataset = data.load_dataset(cfg.data)
    split_seed, net_seed, train_seed = subseeds(cfg.seed)
    train_items, test_items = train.split_dataset(
        dataset, train.SplitSpec(cfg.split, seed=split_seed)
    )
    os.makedirs(cfg.out, exist_ok=True)
    epochs = _budget_epochs(len(dataset), len(train_items), cfg)
    print(f"training {cfg.variant} on {len(train_items)}/{len(dataset)} slices "
          f"for {epochs} epochs (reference-budget {cfg.epochs})")
    cfg = replace(cfg, epochs=epochs)
    network, log = _train_variant(cfg.variant, train_items, cfg, net_seed, train_seed)
    net.save_model(network, os.path.join(cfg.out, f"{cfg.variant}.dseg"))
    train.write_loss_log(os.path.join(cfg.out, f"loss_{cfg.variant}.csv"), log)
    preds = _write_predictions(cfg.out, network, test_items)
    report = metrics.dsc_report(preds, [lab for _, _, lab in test_items])
    _write_text(os.path.join(cfg.out, "report.csv"), metrics.render_report_csv(report))
    text = metrics.render_report_text(report)
    _write_text(os.path.join(cfg.out, "report.txt"), text)
    print(text, end="")
    return 0


def cmd_generalize(args):
    cfg = resolve_config(args)
    _require(cfg, "data", "out")
    if not args.model:
        raise ConfigError("missing required setting 'model' (flag --model)")
    network = net.load_model(args.model)
    dataset = data.load_dataset(cfg.data)
    for slice_id, image, _ in dataset:
        if image.shape[0] != network.in_channels or image.shape[1] % 8 or image.shape[2] % 8:
            raise SchemaError(
                f"slice {slice_id} shape {image.shape} is incompatible with the model"
            )
    os.makedirs(cfg.out, exist_ok=True)
    preds = _write_predictions(cfg.out, network, dataset)
    report = metrics.dsc_report(preds, [lab for _, _, lab in dataset])
    _write_text(os.path.join(cfg.out, "report.csv"), metrics.render_report_csv(report))
    text = metrics.render_report_text(report)
    _write_text(os.path.join(cfg.out, "report.txt"), text)
    print(text, end="")
    return 0


def cmd_predict(args):
    network = net.load_model(args.model)
    image = data.load_image(args.image)
    h, w = image.shape[1], image.shape[2]
    if h % 8 or w % 8:
        size = min(h - h % 8, w - w % 8)
        if not args.auto_crop:
            raise ShapeError(
                f"image is {h}x{w}; extents must be divisible by 8 "
                f"(use --auto-crop to crop to {size}x{size})"
            )
        image = data.crop_center(image, size)
    pred = _predict_labels_for(network, image)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    data.save_labels(pred, os.path.join(args.out, f"{stem}_pred.pgm"))
    data.save_image(data.overlay(image, pred),
                    os.path.join(args.out, f"{stem}_overlay.ppm"))
    print(f"wrote {stem}_pred.pgm and {stem}_overlay.ppm to {args.out}")
    return 0


def cmd_evaluate(args):
    names = sorted(n for n in os.listdir(args.pred) if n.endswith(".pgm"))
    if not names:
        raise DatasetError(f"no .pgm predictions in {args.pred}")
    preds, truths = [], []
    for name in names:
        truth_path = os.path.join(args.truth, name)
        if not os.path.exists(truth_path):
            raise DatasetError(f"no matching truth for {name} in {args.truth}")
        preds.append(data.load_labels(os.path.join(args.pred, name)))
        truths.append(data.load_labels(truth_path))
    report = metrics.dsc_report(preds, truths, ignore_absent=args.ignore_absent)
    text = metrics.render_report_text(report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_text(os.path.join(args.out, "report.csv"),
                    metrics.render_report_csv(report))
        _write_text(os.path.join(args.out, "report.txt"), text)
    print(text, end="")
    return 0


def _add_experiment_flags(sub):
    sub.add_argument("--config", help="key=value config file; flags override it")
    sub.add_argument("--data", help="dataset directory (with manifest.csv)")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--seed", type=int, help="master seed (default 0)")
    sub.add_argument("--split", type=float, help="train fraction")
    sub.add_argument("--epochs", type=int, help="training epochs (default 60)")
    sub.add_argument("--lr", type=float, help="learning rate (default 0.01)")
    sub.add_argument("--momentum", type=float, help="SGD momentum (default 0.9)")
    sub.add_argument("--batch-size", dest="batch_size", type=int,
                     help="mini-batch size (default 4)")
    sub.add_argument("--base-channels", dest="base_channels", type=int,
                     help="first-layer channel count (default 8)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dilseg",
        description="Standard vs dilated fully convolutional segmentation, CPU only.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("generate", help="write a synthetic phantom dataset")
    phantom = data.PhantomParams()  # flag defaults stay in lockstep with the dataclass
    gen.add_argument("out_dir")
    gen.add_argument("--slices", type=int, default=phantom.n_slices)
    gen.add_argument("--size", type=int, default=phantom.image_size)
    gen.add_argument("--seed", type=int, default=phantom.seed)
    gen.add_argument("--scale", type=float, default=phantom.scale)
    gen.add_argument("--jitter", type=float, default=phantom.jitter)
    gen.add_argument("--noise", type=float, default=phantom.noise)
    gen.add_argument("--shift", action="store_true",
                     help="distribution-shifted variant (rescaled, recolored)")
    gen.add_argument("--force", action="store_true",
                     help="allow writing into a non-empty directory")
    gen.set_defaults(func=cmd_generate)

    cmp_ = commands.add_parser(
        "compare", help="train both variants on one split, report side by side"
    )
    _add_experiment_flags(cmp_)
    cmp_.set_defaults(func=cmd_compare)

    prop = commands.add_parser(
        "propagate", help="train on a slice subset, predict the remaining slices"
    )
    _add_experiment_flags(prop)
    prop.add_argument("--variant", choices=[net.VARIANT_STANDARD, net.VARIANT_DILATED])
    prop.set_defaults(func=cmd_propagate)

    gener = commands.add_parser(
        "generalize", help="run a trained model on a second (shifted) dataset"
    )
    _add_experiment_flags(gener)
    gener.add_argument("--model", help="trained .dseg model file")
    gener.set_defaults(func=cmd_generalize)

    pred = commands.add_parser("predict", help="label a single image")
    pred.add_argument("--model", required=True)
    pred.add_argument("--image", required=True)
    pred.add_argument("--out", required=True)
    pred.add_argument("--auto-crop", dest="auto_crop", action="store_true")
    pred.set_defaults(func=cmd_predict)

    ev = commands.add_parser(
        "evaluate", help="DSC report for matching .pgm files in two directories"
    )
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--out")
    ev.add_argument("--ignore-absent", dest="ignore_absent", action="store_true",
                    help="exclude classes absent from both sides")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SplitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, LabelError, ShapeError, SchemaError, DegenerateDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (PixmapError, ModelIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
