"""Command-line interface: ``cosimnet <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical divergence.
Any subcommand accepts ``--config FILE`` with ``key=value`` lines; keys are
flag names (``lr-head`` or ``lr_head``) and explicit flags win over the file.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from PIL import Image

from .data import (
    ImagePair,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    read_image,
    save_dataset,
    split_dataset,
    write_mask,
)
from .encoder import EncoderConfig, init_encoder
from .errors import DataError, DivergenceError, InvalidArgument
from .evalsuite import write_pr_csv
from .losses import COSINE, L2_CONTRASTIVE, TCL, LossConfig
from .metric import to_uint8
from .pipeline import (
    FCN_METRICS,
    METRIC,
    FINE_TUNE_LEARNING_RATES,
    InferenceConfig,
    RunHistory,
    TrainConfig,
    choose_thresholds,
    contrast_analysis,
    evaluate_model,
    export_features,
    infer,
    load_model,
    save_model,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

LOSS_NAMES = {"l2": L2_CONTRASTIVE, "cos": COSINE, "tcl": TCL}
MODE_NAMES = {"metric": METRIC, "fcn": FCN_METRICS}

log = logging.getLogger("cosimnet")


class UsageError(Exception):
    pass


def float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cosimnet", description="Siamese change detection with learned metrics.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="key=value file; explicit flags override it")
        return p

    p = command("synth", "generate a synthetic pair dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=320)
    p.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    p.add_argument("--p-change", type=float, default=0.8)
    p.add_argument("--rotation", type=float, default=0.0, help="max |rotation| in degrees")
    p.add_argument("--zoom", type=float, default=1.0, help="max zoom; sampled from [1, ZOOM]")
    p.add_argument("--zoom-min", type=float, default=1.0)
    p.add_argument("--translation", type=float, default=0.0, help="max |shift| in pixels")
    p.add_argument("--brightness", type=float, default=0.1)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--shadow", type=float, default=0.3)
    p.add_argument("--objects", type=int, nargs=2, default=(3, 6), metavar=("MIN", "MAX"))
    p.add_argument("--object-size", type=int, nargs=2, default=(12, 28), metavar=("MIN", "MAX"))

    p = command("train", "train a model on a pair dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--loss", choices=sorted(LOSS_NAMES), default="l2")
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--betas", type=float_list, default=(1.0, 1.0, 1.0))
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-head", type=float, default=None)
    p.add_argument("--fine-tune-lr", action="store_true", help="use the fine-tuning rates 1e-7 / 1e-8")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--wd", type=float, default=5e-5)
    p.add_argument("--mode", choices=sorted(MODE_NAMES), default="metric")
    p.add_argument("--lambda", dest="lam", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="hold out this share for per-epoch F and threshold selection")
    p.add_argument("--history", type=Path)

    p = command("infer", "change map and mask for one image pair")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--t0", type=Path, required=True)
    p.add_argument("--t1", type=Path, required=True)
    p.add_argument("--out-map", type=Path, required=True)
    p.add_argument("--out-mask", type=Path)
    p.add_argument("--thresholds", type=float_list)

    p = command("eval", "score a checkpoint on a pair dataset")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--pr-csv", type=Path)
    p.add_argument("--n-thresholds", type=int, default=101)
    p.add_argument("--threshold", type=float, help="fixed threshold instead of the best PR point")

    p = command("contrast", "contrast table from training histories")
    p.add_argument("--history", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)

    p = command("export-features", "sampled per-location features as CSV")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--level", type=int, default=3, help="feature level, 1 = shallowest")
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    return parser


def read_config_file(path: Path) -> dict[str, str]:
    values = {}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` fill in flags not given explicitly."""
    commands = parser._subparsers._group_actions[0].choices
    cmd_pos = next((i for i, a in enumerate(argv) if a in commands), None)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv[cmd_pos + 1:] if cmd_pos is not None else [])
    if cmd_pos is None or known.config is None:
        return parser.parse_args(argv)
    command = argv[cmd_pos]
    actions = {a.dest: a for a in commands[command]._actions}
    file_argv = []
    for key, value in read_config_file(known.config).items():
        dest = "lam" if key == "lambda" else key
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise UsageError(f"{known.config}: unknown key {key!r} for {command}")
        flag = action.option_strings[-1]
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes"):
                file_argv.append(flag)
        else:
            file_argv += [flag, *value.split()]
    # file values first, so repeated explicit flags take precedence
    return parser.parse_args(argv[:cmd_pos + 1] + file_argv + argv[cmd_pos + 1:])


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    cfg = SynthConfig(size=tuple(args.size), count=args.count, objects=tuple(args.objects),
                      object_size=tuple(args.object_size), p_change=args.p_change,
                      brightness=args.brightness, noise=args.noise, shadow=args.shadow,
                      rotation=args.rotation, zoom=(args.zoom_min, args.zoom),
                      translation=args.translation, seed=args.seed)
    ds = generate_synthetic(cfg)
    save_dataset(ds, args.out)
    log.info("wrote %d pairs to %s", len(ds), args.out)


def cmd_train(args) -> None:
    ds = load_dataset(args.data)
    if not len(ds):
        raise DataError(f"no image pairs found under {args.data}")
    if args.val_fraction:
        ds = split_dataset(ds, 1.0 - args.val_fraction, args.seed)
    loss = LossConfig(margin=args.margin, tau=args.tau, betas=args.betas, lam=args.lam,
                      loss_kind=LOSS_NAMES[args.loss])
    rates = {}
    if args.fine_tune_lr:
        rates = dict(lr=FINE_TUNE_LEARNING_RATES["backbone"], lr_head=FINE_TUNE_LEARNING_RATES["head"])
    if args.lr is not None:
        rates["lr"] = args.lr
    if args.lr_head is not None:
        rates["lr_head"] = args.lr_head
    cfg = TrainConfig.for_loss(loss, epochs=args.epochs, batch_size=args.batch, momentum=args.momentum,
                               weight_decay=args.wd, mode=MODE_NAMES[args.mode], seed=args.seed, **rates)
    h, w = ds.items[0].pair.size
    for item in ds.items:
        if item.pair.size != (h, w):
            raise DataError(f"{item.identifier}: size {item.pair.size} differs from {(h, w)}")
    encoder = init_encoder(EncoderConfig(in_channels=ds.items[0].pair.t0.shape[0], seed=args.seed))
    result = train(encoder, ds, cfg)
    pick_from = ds.subset("test") or ds.subset("train")
    result.model.thresholds = choose_thresholds(result.model, pick_from)
    save_model(result.model, args.out)
    if args.history:
        result.history.to_csv(args.history)
    log.info("saved %s (thresholds %s)", args.out, ", ".join(f"{t:.2f}" for t in result.model.thresholds))


def cmd_infer(args) -> None:
    model = load_model(args.ckpt)
    pair = ImagePair(read_image(args.t0), read_image(args.t1), args.t0.stem)
    icfg = InferenceConfig(args.thresholds if args.thresholds else model.thresholds)
    res = infer(model, pair, icfg)
    Image.fromarray(to_uint8(res.fused.values.data), "L").save(args.out_map)
    if args.out_mask:
        write_mask(args.out_mask, res.prediction)


def cmd_eval(args) -> None:
    model = load_model(args.ckpt)
    ds = load_dataset(args.data)
    if not len(ds):
        raise DataError(f"no image pairs found under {args.data}")
    report = evaluate_model(model, ds.items, args.threshold, args.n_thresholds)
    report.to_json(args.report)
    if args.pr_csv:
        write_pr_csv(report.pr_points, args.pr_csv)
    log.info("F %.4f at threshold %.2f (best F %.4f at %.2f)", report.f_score, report.threshold,
             report.best_f, report.best_threshold)


def cmd_contrast(args) -> None:
    histories = []
    for path in args.history:
        try:
            histories.append(RunHistory.from_csv(path))
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read history {path}: {exc}") from None
    contrast_analysis(*histories).to_csv(args.out)


def cmd_export(args) -> None:
    model = load_model(args.ckpt)
    ds = load_dataset(args.data)
    export_features(model, ds.items, args.level - 1, args.samples, args.seed, args.out)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "contrast": cmd_contrast,
    "export-features": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"cosimnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"cosimnet: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (InvalidArgument, UsageError) as exc:
        print(f"cosimnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"cosimnet: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"cosimnet: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
