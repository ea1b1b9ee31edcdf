"""Command-line front end: generate, train, adapt, evaluate, report.

Every run writes a resolved-config snapshot next to its outputs so an
experiment is reproducible from the snapshot alone. Exit codes are stable:
0 ok, 2 configuration, 3 I/O, 4 divergence, 5 incompatibility.
"""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import adaptation, dataio, metrics, training
from .codec import CodecConfig, ConfigError, HybridCodec, parse_gamma

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_INCOMPATIBLE = 5


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def read_config_file(path):
    """Plain key = value lines; '#' starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}", EXIT_IO) from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {lineno}: expected key = value",
                           EXIT_CONFIG)
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def write_snapshot(out_dir, args, names):
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{name} = {getattr(args, name)}" for name in sorted(names)]
    (out_dir / "config_resolved.txt").write_text("\n".join(lines) + "\n")


def parse_aug_epochs(text, epochs):
    """'a..b' inclusive epoch range; empty/off disables augmentation."""
    if not text or text in ("off", "none"):
        return frozenset()
    try:
        lo, hi = text.split("..")
        return frozenset(range(int(lo), int(hi) + 1))
    except ValueError as exc:
        raise CliError(f"bad --aug-epochs {text!r}, expected a..b",
                       EXIT_CONFIG) from exc


def load_dataset(path):
    try:
        return dataio.ingest_external(path)
    except FileNotFoundError as exc:
        raise CliError(f"missing dataset {path}", EXIT_IO) from exc
    except dataio.FormatError as exc:
        raise CliError(f"unreadable dataset {path}: {exc}", EXIT_IO) from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    out = Path(args.out)
    write_snapshot(out, args, ("per_class", "seed", "profile_set",
                               "surrogate", "surrogate_count"))
    try:
        if args.surrogate:
            cfg = dataio.SurrogateConfig(count=args.surrogate_count,
                                         seed=args.seed)
            target = dataio.surrogate_target(cfg)
            dataio.write_csid(out / "surrogate.csid", target)
            print(f"wrote {out / 'surrogate.csid'} ({len(target)} samples)")
        else:
            cfg = dataio.GenConfig(per_class_count=args.per_class,
                                   seed=args.seed,
                                   profiles=tuple(args.profile_set))
            train, test = dataio.build_dataset(cfg)
            dataio.write_csid(out / "train.csid", train)
            dataio.write_csid(out / "test.csid", test)
            print(f"wrote {out / 'train.csid'} ({len(train)}) and "
                  f"{out / 'test.csid'} ({len(test)})")
    except (ValueError, ConfigError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    return EXIT_OK


def cmd_train(args):
    gamma = _parse_rate(args.gamma)
    out = Path(args.out)
    write_snapshot(out, args, ("gamma", "epochs", "batch_size", "lr",
                               "lambda_rug", "aug_epochs", "seed",
                               "train_data", "test_data"))
    train_set = load_dataset(args.train_data)
    test_set = load_dataset(args.test_data)
    try:
        cfg = training.TrainConfig(
            gamma=gamma, epochs=args.epochs, batch_size=args.batch_size,
            lr=args.lr, lambda_rug=args.lambda_rug,
            epoch_aug_set=parse_aug_epochs(args.aug_epochs, args.epochs),
            seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc

    def progress(epoch, report):
        print(f"epoch {epoch:4d}  test {report.nmse_db:8.3f} dB  "
              f"of1 {report.of1:.3f}", flush=True)

    try:
        best, reports, _ = training.fit(train_set, test_set, cfg,
                                        progress=progress)
    except training.TrainingDiverged as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    training.save_checkpoint(out / "checkpoint.bin", best)
    (out / "reports.json").write_text(metrics.reports_to_json(reports))
    (out / "reports.csv").write_text(metrics.reports_to_csv(reports))
    print(f"best epoch {best.epoch}; wrote {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_adapt(args):
    out = Path(args.out)
    write_snapshot(out, args, ("mode", "budget", "epochs", "tau_ct",
                               "lambda_adv", "lambda_rug_hda", "seed",
                               "checkpoint", "source_train", "source_test",
                               "target", "gamma"))
    try:
        ckpt = training.load_checkpoint(args.checkpoint)
    except (training.CheckpointError, OSError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}", EXIT_IO) from exc
    if args.gamma is not None:
        requested = _parse_rate(args.gamma)
        if requested != ckpt.gamma:
            print(f"checkpoint rate {ckpt.gamma} != requested {requested}",
                  file=sys.stderr)
            return EXIT_INCOMPATIBLE
    source_train = load_dataset(args.source_train)
    source_test = load_dataset(args.source_test)
    target = load_dataset(args.target)
    if args.budget > len(target):
        raise CliError(
            f"budget {args.budget} exceeds target size {len(target)}",
            EXIT_CONFIG)
    try:
        cfg = adaptation.DaConfig(
            mode=args.mode, tau_ct=args.tau_ct, lambda_adv=args.lambda_adv,
            lambda_rug_hda=args.lambda_rug_hda, epochs=args.epochs,
            budget=args.budget, seed=args.seed)
    except adaptation.AdaptError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc

    def progress(epoch, report):
        print(f"epoch {epoch:3d}  target {report.nmse_db:8.3f} dB  "
              f"rho {report.rho:.3f}  source of1 {report.of1:.3f}", flush=True)

    try:
        adapted, reports, _ = adaptation.adapt(
            ckpt, source_train, source_test, target, cfg, progress=progress)
    except training.TrainingDiverged as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except adaptation.AdaptError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    training.save_checkpoint(out / "adapted.bin", adapted)
    (out / "adapt_reports.json").write_text(metrics.reports_to_json(reports))
    (out / "adapt_reports.csv").write_text(metrics.reports_to_csv(reports))
    print(f"wrote {out / 'adapted.bin'}")
    return EXIT_OK


def cmd_eval(args):
    out = Path(args.out)
    write_snapshot(out, args, ("checkpoint", "data", "plot", "json", "csv"))
    try:
        ckpt = training.load_checkpoint(args.checkpoint)
    except (training.CheckpointError, OSError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}", EXIT_IO) from exc
    dataset = load_dataset(args.data)
    codec = HybridCodec(CodecConfig(), seed=0)
    try:
        ckpt.apply_to(codec)
    except training.CheckpointError as exc:
        print(f"checkpoint incompatible with the codec: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    report, _, logits = training.evaluate(codec, dataset, ckpt.gamma)
    if args.json:
        (out / "report.json").write_text(report.to_json())
    if args.csv:
        (out / "report.csv").write_text(
            metrics.reports_to_csv([report]))
    print(report.to_json())
    if args.plot == "f_dmb":
        if not dataset.labeled:
            raise CliError("f_dmb plots need a labeled dataset", EXIT_CONFIG)
        paths = plot_class_prior_maps(codec, dataset, logits, out)
        for p in paths:
            print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# SVG heatmaps


_VIRIDIS = ((68, 1, 84), (59, 82, 139), (33, 145, 140),
            (94, 201, 98), (253, 231, 37))


def _colour(v):
    v = min(max(float(v), 0.0), 1.0) * (len(_VIRIDIS) - 1)
    i = min(int(v), len(_VIRIDIS) - 2)
    t = v - i
    a, b = _VIRIDIS[i], _VIRIDIS[i + 1]
    return tuple(round(a[c] + t * (b[c] - a[c])) for c in range(3))


def heatmap_svg(grid, cell=12):
    """Deterministic standalone SVG for a 2-D array."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    span = hi - lo if hi > lo else 1.0
    h, w = grid.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'width="{w * cell}" height="{h * cell}">']
    for i in range(h):
        for j in range(w):
            r, g, b = _colour((grid[i, j] - lo) / span)
            parts.append(
                f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" '
                f'height="{cell}" fill="rgb({r},{g},{b})"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def plot_class_prior_maps(codec, dataset, logits, out_dir):
    """Per-class average of the decoder's rank-1 delay/angle prior map."""
    from . import engine as eg
    out_paths = []
    dp = dataset.labels[:, :5].argmax(axis=1)
    for c, name in enumerate("ABCDE"):
        idx = np.flatnonzero(dp == c)
        if len(idx) == 0:
            continue
        grids = codec.decoder.prior(
            eg.constant(logits[idx].astype(np.float32)))
        mean_map = grids.data.mean(axis=0)
        path = Path(out_dir) / f"f_dmb_cdl_{name.lower()}.svg"
        path.write_text(heatmap_svg(mean_map))
        out_paths.append(path)
    return out_paths


# ---------------------------------------------------------------------------
# argument plumbing


def _parse_rate(text):
    try:
        return parse_gamma(text)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc


def build_parser():
    parser = argparse.ArgumentParser(
        prog="csicodec",
        description="hybrid CSI feedback codec experiments")
    parser.add_argument("--config", help="key = value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate CSID datasets")
    gen.add_argument("--per-class", type=int, default=10, dest="per_class")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--profile-set", default="ABCDE", dest="profile_set")
    gen.add_argument("--surrogate", action="store_true")
    gen.add_argument("--surrogate-count", type=int, default=2000,
                     dest="surrogate_count")
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="offline training")
    train.add_argument("--gamma", default="1/4")
    train.add_argument("--epochs", type=int, default=100)
    train.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--lambda-rug", type=float, default=1e-3,
                       dest="lambda_rug")
    train.add_argument("--aug-epochs", default="70..100", dest="aug_epochs")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--train-data", required=True, dest="train_data")
    train.add_argument("--test-data", required=True, dest="test_data")
    train.add_argument("--out", required=True)
    train.set_defaults(func=cmd_train)

    adapt = sub.add_parser("adapt", help="domain adaptation")
    adapt.add_argument("--mode", choices=adaptation.MODES, default="da_h")
    adapt.add_argument("--checkpoint", required=True)
    adapt.add_argument("--source-train", required=True, dest="source_train")
    adapt.add_argument("--source-test", required=True, dest="source_test")
    adapt.add_argument("--target", required=True)
    adapt.add_argument("--budget", type=int, default=2000)
    adapt.add_argument("--epochs", type=int, default=40)
    adapt.add_argument("--tau-ct", type=float, default=0.9, dest="tau_ct")
    adapt.add_argument("--lambda-adv", type=float, default=1e-2,
                       dest="lambda_adv")
    adapt.add_argument("--lambda-rug-hda", type=float, default=1e-3,
                       dest="lambda_rug_hda")
    adapt.add_argument("--gamma", default=None)
    adapt.add_argument("--seed", type=int, default=0)
    adapt.add_argument("--out", required=True)
    adapt.set_defaults(func=cmd_adapt)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--json", action="store_true")
    ev.add_argument("--csv", action="store_true")
    ev.add_argument("--plot", choices=["f_dmb"], default=None)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args, _ = parser.parse_known_args(argv)
    if args.config:
        try:
            file_vals = read_config_file(args.config)
        except CliError as exc:
            print(str(exc), file=sys.stderr)
            return exc.code
        coerced = {}
        for key, value in file_vals.items():
            coerced[key] = value
        parser.set_defaults(**coerced)
        args = parser.parse_args(argv)
    else:
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
