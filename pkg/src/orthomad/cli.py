"""Command-line entry point: ``orthomad {gen,train,eval,det,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import metrics, synthdata
from .model import ConfigError, ModelConfig, load_model
from .objective import check_loss_gradients
from .trainer import TrainConfig, TrainingDiverged, evaluate, train
from .weights import FormatError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="orthomad", description="Morphing-attack detection with orthogonal identity heads.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate the synthetic morph dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--identities", type=int, default=40)
    g.add_argument("--per-id", type=int, default=10)
    g.add_argument("--morphs", type=int, default=300)
    g.add_argument("--split", type=float, default=0.75)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--noise", type=float, default=0.03)
    g.add_argument("--blend", type=float, default=0.5)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--alpha", type=float, default=100.0)
    t.add_argument("--lr", type=_positive_float, default=1e-5)
    t.add_argument("--batch", type=_positive_int, default=16)
    t.add_argument("--epochs", type=_positive_int, default=30)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--embed-dim", type=_positive_int, default=32)
    t.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    t.add_argument("--no-flip", action="store_true", help="disable horizontal-flip augmentation")
    t.add_argument("--normalize-reg", action="store_true", help="use cosine instead of raw inner product")
    t.add_argument("--precision", choices=["float32", "float64"], default="float32")

    e = sub.add_parser("eval", help="score a split and compute metrics")
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", choices=list(synthdata.SPLITS), default="test")
    e.add_argument("--scores", required=True, type=Path)
    e.add_argument("--report", required=True, type=Path)

    d = sub.add_parser("det", help="export a DET curve from a score file")
    d.add_argument("--scores", required=True, type=Path)
    d.add_argument("--out", required=True, type=Path)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=_positive_float, default=1e-4)
    c.add_argument("--step", type=_positive_float, default=1e-5)
    c.add_argument("--samples", type=_positive_int, default=200)
    c.add_argument("--alpha", type=float, default=100.0)
    return p


def cmd_gen(args) -> int:
    try:
        synthdata.validate_generation_args(args.identities, args.per_id, args.morphs, args.split,
                                           args.size, args.noise, args.blend)
    except synthdata.DataConfigError as exc:
        raise UsageError(str(exc)) from None
    manifest = synthdata.generate_dataset(args.out, args.seed, args.identities, args.per_id,
                                          args.morphs, args.split, args.size, args.noise, args.blend)
    for split in synthdata.SPLITS:
        recs = manifest.split(split)
        n_bf = sum(r.label == synthdata.BONA_FIDE for r in recs)
        print(f"{split}: {n_bf} bona fide, {len(recs) - n_bf} attacks, "
              f"{len(manifest.identities(split))} identities")
    print(f"wrote {len(manifest.records)} images to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = TrainConfig(alpha=args.alpha, learning_rate=args.lr, batch_size=args.batch,
                         epochs=args.epochs, seed=args.seed, optimizer=args.optimizer,
                         flip_augment=not args.no_flip, normalize_reg=args.normalize_reg,
                         precision=args.precision)
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = synthdata.load_manifest(args.data)
    try:
        model_config = ModelConfig(input_size=manifest.size, embed_dim=args.embed_dim)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    result = train(config, model_config, manifest, args.out)
    fl = result.final_loss
    print(f"final step: bce {fl['bce']:.6f}  reg {fl['reg']:.6g}  alpha {fl['alpha']:g}  "
          f"total {fl['total']:.6f}")
    print(f"best epoch {result.best_epoch}; checkpoints and train_log.csv in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, params = load_model(args.model)
    manifest = synthdata.load_manifest(args.data)
    scores = evaluate(params, manifest, args.split)
    report = metrics.compute_report(scores)
    metrics.write_scores(args.scores, scores)
    metrics.write_report(args.report, report)
    print(f"{args.split}: {report.n_bona_fide} bona fide, {report.n_attack} attacks")
    print(report.summary())
    return EXIT_OK


def cmd_det(args) -> int:
    scores = metrics.read_scores(args.scores)
    points = metrics.det_curve(scores)
    metrics.write_det(args.out, points)
    print(f"wrote {len(points)} DET points to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = check_loss_gradients(seed=args.seed, tolerance=args.tolerance, step=args.step,
                                  n_samples=args.samples, alpha=args.alpha)
    print(f"max relative error {report.max_rel_error:.3e}")
    print(report.summary())
    if not report.passed:
        print(f"gradient check failed at tolerance {args.tolerance:g}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "det": cmd_det,
            "gradcheck": cmd_gradcheck}

RUNTIME_ERRORS = (OSError, FormatError, metrics.ScoreFileError, TrainingDiverged,
                  ArithmeticError, ValueError)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"orthomad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"orthomad {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"orthomad {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
