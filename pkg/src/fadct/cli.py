"""Command-line interface.

Subcommands: train, eval, inspect-dct, gen-synth, gradcheck. Every failure
prints a single `error: ...` line on stderr and exits with a documented
code: 2 config error, 3 data error, 4 numeric abort, 5 checkpoint format
error, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import engine as E
from .checkpoint import FormatError, load_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .data import (DataError, SynthSpec, generate_synth, load_corpus, read_ppm,
                   resize_bilinear, write_corpus, write_ppm)
from .engine import Tensor
from .model import PipelineModel, build_model
from .rng import Rng
from .training import NumericError, evaluate, train

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_FORMAT = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _load_model_from_checkpoint(path) -> tuple[PipelineModel, RunConfig]:
    snapshot, tensors = load_checkpoint(path)
    cfg = parse_config(snapshot, source=str(path))
    model = build_model(cfg, Rng(cfg.seed))
    try:
        model.load_state_dict(tensors)
    except KeyError as exc:
        raise FormatError(f"{path}: {exc.args[0]}") from None
    return model, cfg


def _resolve_classes(cfg: RunConfig, class_map: dict) -> RunConfig:
    if cfg.num_classes == 0:
        return cfg.with_values(num_classes=len(class_map))
    if cfg.num_classes != len(class_map):
        raise ConfigError(f"config says num_classes={cfg.num_classes} but the "
                          f"corpus has {len(class_map)} classes")
    return cfg


def cmd_train(args) -> int:
    cfg = parse_config(Path(args.config).read_text(), overrides=args.set,
                       source=args.config)
    if not cfg.train_dir:
        raise ConfigError("config key train_dir is required for training")
    train_samples, class_map, skipped = load_corpus(cfg.train_dir, cfg.image_size)
    if skipped:
        print(f"warning: skipped {skipped} unreadable file(s)", file=sys.stderr)
    val_samples = []
    if cfg.val_dir:
        val_samples, val_map, _ = load_corpus(cfg.val_dir, cfg.image_size)
        if val_map != class_map:
            raise DataError(f"train/val class maps differ: {sorted(class_map)} "
                            f"vs {sorted(val_map)}")
    cfg = _resolve_classes(cfg, class_map)
    model = build_model(cfg, Rng(cfg.seed))
    result = train(model, train_samples, val_samples, cfg, args.out)
    last = result.metrics[-1]
    print(f"trained {cfg.variant} for {len(result.metrics)} epoch(s)"
          + (" (early stop)" if result.stopped_early else ""))
    print(f"final train loss: {last['train_loss']:.6f}")
    if result.best_epoch >= 0:
        print(f"best val accuracy: {result.best_val_acc:.6f} at epoch {result.best_epoch}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoints: {result.last_checkpoint} {result.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = _load_model_from_checkpoint(args.checkpoint)
    samples, class_map, skipped = load_corpus(args.data, cfg.image_size)
    if skipped:
        print(f"warning: skipped {skipped} unreadable file(s)", file=sys.stderr)
    if len(class_map) != cfg.num_classes:
        raise DataError(f"checkpoint expects {cfg.num_classes} classes, corpus "
                        f"has {len(class_map)}")
    rng = Rng(cfg.seed).derive("eval") if cfg.predictive_mode == "mc" else None
    result = evaluate(model, samples, cfg.batch_size,
                      mode=cfg.predictive_mode, rng=rng)
    names = {idx: name for name, idx in class_map.items()}
    print(f"accuracy: {result.accuracy!r}")
    for c, acc in result.per_class.items():
        print(f"class {names[c]}: {acc!r}")
    print(f"mean_ce: {result.mean_ce!r}")
    if model.bayes_head:
        print(f"mean_predictive_entropy: {result.mean_entropy!r}")
    return EXIT_OK


def compute_inspection(model: PipelineModel, pixels: np.ndarray) -> dict:
    """Float band reconstructions, masks, and cutoffs for one image.

    The returned band arrays are the raw (unclamped) reconstructions; they
    sum to the input exactly up to roundoff. The PPM files written by
    inspect-dct clamp to [0, 1] for display.
    """
    with E.no_grad():
        bands = model.band_images(Tensor(pixels[None, :, :, :]))
        masks = model.masks()
    c1, c2 = model.cutoff_values()
    return {
        "bands": {name: band.data[0] for name, band in zip(("low", "mid", "high"), bands)},
        "masks": {name: mask.data for name, mask in zip(("low", "mid", "high"), masks)},
        "c1": c1,
        "c2": c2,
    }


def cmd_inspect_dct(args) -> int:
    model, cfg = _load_model_from_checkpoint(args.checkpoint)
    if not model.uses_bands:
        raise ConfigError(f"checkpoint variant {cfg.variant!r} has no frequency "
                          f"partition to inspect")
    pixels = np.clip(resize_bilinear(read_ppm(args.image), cfg.image_size,
                                     cfg.image_size), 0.0, 1.0)
    info = compute_inspection(model, pixels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, band in info["bands"].items():
        write_ppm(out / f"band_{name}.ppm", band)
    for name, mask in info["masks"].items():
        write_ppm(out / f"mask_{name}.ppm", np.repeat(mask[None, :, :], 3, axis=0))
    (out / "cutoffs.txt").write_text(f"c1 = {info['c1']!r}\nc2 = {info['c2']!r}\n")
    print(f"c1: {info['c1']!r}")
    print(f"c2: {info['c2']!r}")
    print(f"wrote band/mask images to {out}")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    spec = parse_synth_spec(Path(args.spec).read_text(), source=args.spec)
    splits = generate_synth(spec)
    write_corpus(splits, spec, args.out)
    counts = ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    print(f"wrote synthetic corpus to {args.out} ({counts})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import REL_TOL, run_full_suite
    op_results, pipe_results, ok = run_full_suite(seed=args.seed, cases=args.cases)
    for name in sorted(op_results):
        err = op_results[name]
        print(f"{name:16s} worst_rel={err:.3e}  {'pass' if err < REL_TOL else 'FAIL'}")
    worst_name, worst = max(pipe_results.items(), key=lambda kv: kv[1])
    print(f"{'pipeline':16s} worst_rel={worst:.3e}  "
          f"{'pass' if worst < REL_TOL else 'FAIL'} ({worst_name})")
    print(f"{'all checks passed' if ok else 'FAILURES detected'}")
    return EXIT_OK if ok else EXIT_ERROR


def parse_synth_spec(text: str, source: str = "<spec>") -> SynthSpec:
    """Flat key = value synthetic-corpus spec; intervals as a:b,c:d pairs."""
    known = {"intervals", "image_size", "amplitude", "noise_std",
             "train_per_class", "val_per_class", "test_per_class", "seed"}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown synth spec key {key!r}")
        values[key] = raw
    kwargs = {}
    try:
        if "intervals" in values:
            pairs = []
            for token in values.pop("intervals").split(","):
                a, b = token.split(":")
                pairs.append((float(a), float(b)))
            kwargs["intervals"] = tuple(pairs)
        for key in ("image_size", "train_per_class", "val_per_class",
                    "test_per_class", "seed"):
            if key in values:
                kwargs[key] = int(values.pop(key))
        for key in ("amplitude", "noise_std"):
            if key in values:
                kwargs[key] = float(values.pop(key))
    except ValueError as exc:
        raise ConfigError(f"{source}: malformed value ({exc})") from None
    try:
        return SynthSpec(**kwargs)
    except DataError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def build_parser() -> _Parser:
    parser = _Parser(prog="fadct", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect-dct", help="export band images and masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inspect_dct)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op "
                                         "and the end-to-end pipeline")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--cases", type=int, default=10)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
