"""``stegsense`` command line: data generation, training, evaluation and diagnostics."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import RunConfig, load_config, parse_config
from .data import (
    TEXTURES, DataError, EmbedSpec, PGMError, derive_seed, build_split, embed_lsb_matching, list_covers,
    load_pairs, read_manifest, read_pgm, synthesize_cover, write_pgm, write_position_log,
)
from .diagnostics import diagnose, export_features, export_residuals
from .filterbank import format_filters
from .network import ConfigError, init_model
from .trainer import CheckpointError, check_config_echo, evaluate, fit, read_checkpoint, restore

EXIT_CONFIG = 2
EXIT_DATA = 3
THREADS_ENV = "STEGSENSE_THREADS"


@contextmanager
def _threads(deterministic: bool):
    """Deterministic mode pins BLAS to one thread; otherwise STEGSENSE_THREADS decides."""
    if deterministic:
        n = 1
    else:
        raw = os.environ.get(THREADS_ENV, "")
        try:
            n = int(raw) if raw else None
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n is None:
        yield
        return
    with threadpool_limits(limits=n):
        yield


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _payload(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"payload must be in (0, 1] bpp, got {v}")
    return v


def _checkpoint_config(path) -> tuple[RunConfig, object]:
    ckpt = read_checkpoint(path)
    return parse_config(ckpt.config_text), ckpt


def _load_model(path):
    cfg, ckpt = _checkpoint_config(path)
    model = init_model(cfg.network(), cfg.seed)
    restore(model, ckpt, params_only=True)
    return cfg, model


def _split_pairs(cfg: RunConfig, part: str):
    split = read_manifest(Path(cfg.out_dir) / "manifest.tsv", cfg.ratios, cfg.data_seed)
    pairs = split.part(part)
    if not pairs:
        raise DataError(f"the {part} split is empty")
    return load_pairs(pairs)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_covers(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    w, h = args.size
    for i in range(args.count):
        name = f"cover_{i:05d}.pgm"
        write_pgm(synthesize_cover(w, h, derive_seed(args.seed, i), args.texture), out / name)
        print(name)
    return 0


def cmd_embed(args) -> int:
    covers = list_covers(args.covers)
    if not covers:
        raise DataError(f"no .pgm covers in {args.covers}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for idx, path in enumerate(covers):
        spec = EmbedSpec(args.payload, derive_seed(args.seed, idx))
        cover = read_pgm(path)
        stego, positions = embed_lsb_matching(cover, spec, return_log=True)
        write_pgm(stego, out / path.name)
        if args.audit:
            write_position_log(positions, out / (path.stem + ".log"))
        print(f"{path.name}\t{spec.n_secret(cover.shape[1], cover.shape[0])}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    with _threads(cfg.deterministic or args.deterministic):
        split = build_split(cfg.cover_dir, cfg.payload, cfg.out_dir, cfg.ratios, cfg.data_seed)
        train = load_pairs(split.train)
        if not split.val:
            raise DataError("the val split is empty; raise split_val")
        val = load_pairs(split.val)
        model = init_model(cfg.network(), cfg.seed)
        state = None
        if args.resume:
            ckpt = read_checkpoint(args.resume)
            try:
                check_config_echo(cfg.to_text(), ckpt.config_text, ignore=("epochs",))
            except CheckpointError as exc:
                raise ConfigError(str(exc)) from None
            state = restore(model, ckpt)
        elif cfg.init_from:
            restore(model, read_checkpoint(cfg.init_from), params_only=True)
        state = fit(model, train, val, cfg.loss(), cfg.optim(), state, cfg.out_dir, cfg.to_text())
    print(f"epochs={state.epoch}")
    print(f"best_val_acc={state.best_val_acc!r}")
    print(f"best_epoch={state.best_epoch}")
    print(f"proj_resets={state.proj_resets}")
    return 0


def cmd_eval(args) -> int:
    cfg, model = _load_model(args.ckpt)
    with _threads(cfg.deterministic or args.deterministic):
        covers, stegos = _split_pairs(cfg, args.split)
        result = evaluate(model, covers, stegos)
    for key in ("accuracy", "loss", "false_alarm", "miss", "n"):
        print(f"{key}={result[key]!r}")
    return 0


def cmd_diagnose(args) -> int:
    cfg, model = _load_model(args.ckpt)
    with _threads(cfg.deterministic or args.deterministic):
        covers, stegos = _split_pairs(cfg, "test")
        if args.pairs > len(covers):
            raise DataError(f"asked for {args.pairs} pairs but the test split has {len(covers)}")
        covers, stegos = covers[:args.pairs], stegos[:args.pairs]
        out = Path(args.out) if args.out else Path(cfg.out_dir) / "white_dots.csv"
        report = diagnose(model, covers, stegos, out)
        if args.residuals:
            export_residuals(covers[0], model.bank, args.residuals)
        if args.features:
            export_features(model, covers, stegos, args.features)
    print(f"pos_fraction={report.pos_fraction!r}")
    print(f"neg_fraction={report.neg_fraction!r}")
    print(f"pairs_used={report.n_used}")
    print(f"pairs_degenerate={report.n_degenerate}")
    print(f"report={out}")
    return 0


def cmd_export_filters(args) -> int:
    _, model = _load_model(args.ckpt)
    text = format_filters(model.bank)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stegsense",
        description="Train and inspect a constrained-filter CNN steganalysis detector.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS even if the config says otherwise")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-covers", help="synthesize cover images")
    p.add_argument("--count", type=_positive_int, required=True, help="number of covers to write")
    p.add_argument("--size", type=_size, default=(64, 64), help="image size as WxH (default 64x64)")
    p.add_argument("--texture", choices=sorted(TEXTURES), default="mixed", help="texture family")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_covers)

    p = sub.add_parser("embed", help="LSB-matching embed every cover in a directory")
    p.add_argument("--covers", required=True, help="directory of cover PGMs")
    p.add_argument("--payload", type=_payload, required=True, help="payload in bits per pixel, in (0, 1]")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--out", required=True, help="output directory for stego PGMs")
    p.add_argument("--audit", action="store_true", help="also write per-image position logs")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train a detector from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint of the same config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--split", choices=("val", "test"), default="test", help="which split to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="white-dot analysis on test pairs")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--pairs", type=_positive_int, default=100, help="number of test pairs (default 100)")
    p.add_argument("--out", help="report CSV (default <out_dir>/white_dots.csv)")
    p.add_argument("--residuals", metavar="DIR", help="also export residual planes of the first cover")
    p.add_argument("--features", metavar="CSV", help="also export pooled feature vectors")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("export-filters", help="dump the learned residual filters as text")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--out", default="-", help="output file, '-' for stdout (default)")
    p.set_defaults(func=cmd_export_filters)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"stegsense: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, PGMError, CheckpointError, OSError) as exc:
        print(f"stegsense: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining validation failures come from bad argument values
        print(f"stegsense: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
