"""``emonext`` command line: train, eval, predict, gradcheck.

Exit codes: 0 success, 1 gradient check failure, 2 usage/data/format error,
3 numeric abort during training.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import FormatError
from .data import DataError, normalize, parse_csv, resize, select
from .model import CLASS_NAMES, PRESETS, ConfigError, ModelConfig, build, predict, preset
from .tensor import Tensor
from .train import NumericError, TrainConfig, evaluate, load_checkpoint, train

logger = logging.getLogger("emonext")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# micro is the desk-scale preset; a 70-row fixture needs more than 2 steps per epoch
DEFAULT_BATCH = {"micro": 16}
GRAD_THRESHOLD = 1e-4
MODEL_GRAD_THRESHOLD = 1e-3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emonext", description="EmoNeXt facial expression recognition.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def model_flags(p, preset_default):
        p.add_argument("--preset", choices=list(PRESETS), default=preset_default, type=str.lower,
                       help="model size preset (default: %(default)s)")
        p.add_argument("--config-file", type=Path,
                       help="JSON object of ModelConfig/TrainConfig fields overriding the preset")

    t = sub.add_parser("train", help="train a model on a FER2013-format CSV")
    t.add_argument("--data", type=Path, required=True, help="FER2013-format CSV")
    model_flags(t, "micro")
    t.add_argument("--epochs", type=int, default=100, help="training epochs (default: %(default)s)")
    t.add_argument("--batch-size", type=int, help="batch size (default: 16 for micro, 64 otherwise)")
    t.add_argument("--lr", type=float, default=1e-4, help="base learning rate (default: %(default)s)")
    t.add_argument("--lambda", dest="sa_lambda", type=float, default=0.01,
                   help="weight of the attention regularizer (default: %(default)s)")
    t.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    t.add_argument("--workers", type=int, default=0, help="batch preparation threads (default: %(default)s)")
    t.add_argument("--out", type=Path, default=Path("runs/emonext"), help="output directory (default: %(default)s)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--data", type=Path, required=True, help="FER2013-format CSV")
    e.add_argument("--checkpoint", type=Path, required=True, help=".emnx checkpoint")
    model_flags(e, None)
    e.add_argument("--split", choices=["train", "val", "test"], default="test", help="split (default: %(default)s)")
    e.add_argument("--raw-weights", action="store_true", help="evaluate raw weights instead of the EMA shadow")
    e.add_argument("--out", type=Path, help="directory for the confusion-matrix CSV (default: checkpoint's)")

    p = sub.add_parser("predict", help="classify one 48x48 binary PGM image")
    p.add_argument("--checkpoint", type=Path, required=True, help=".emnx checkpoint")
    p.add_argument("--image", type=Path, required=True, help="48x48 8-bit binary PGM (P5)")
    p.add_argument("--raw-weights", action="store_true", help="use raw weights instead of the EMA shadow")

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    names = [c.name for c in gradcheck.OP_CHECKS] + ["model"]
    g.add_argument("--op", choices=names, help="run a single check")
    g.add_argument("--seeds", type=int, default=5, help="random seeds per op (default: %(default)s)")
    return parser


def _config_overrides(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _split_overrides(overrides: dict) -> tuple[dict, dict]:
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(overrides) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    m = {k: v for k, v in overrides.items() if k in model_keys}
    for key in ("channels", "blocks"):
        if key in m:
            m[key] = tuple(m[key])
    return m, {k: v for k, v in overrides.items() if k in train_keys}


def cmd_train(args) -> int:
    model_over, train_over = _split_overrides(_config_overrides(args.config_file))
    model_over.setdefault("sa_lambda", args.sa_lambda)
    mcfg = preset(args.preset, **model_over)
    tcfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size or DEFAULT_BATCH.get(args.preset, 64),
        lr=args.lr,
        seed=args.seed,
        workers=args.workers,
    )
    tcfg = dataclasses.replace(tcfg, **train_over)
    samples, summary = parse_csv(args.data)
    logger.info("loaded %d rows\n%s", summary.total, summary.table())
    model = build(mcfg, rng=tcfg.seed)
    state = train(model, samples, tcfg, out_dir=args.out)
    last = state.history[-1]
    if last.val_acc is None:
        print(f"no validation rows; final train accuracy {last.train_acc:.4f}")
    else:
        print(f"final validation accuracy {last.val_acc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = None
    if args.preset is not None:
        model_over, _ = _split_overrides(_config_overrides(args.config_file))
        cfg = preset(args.preset, **model_over)
    state = load_checkpoint(args.checkpoint, cfg)
    samples, _ = parse_csv(args.data)
    rows = select(samples, args.split)
    res = evaluate(state.model, rows, None if args.raw_weights else state.ema)
    out_dir = args.out or args.checkpoint.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"confusion_{args.split}.csv"
    lines = [",".join(CLASS_NAMES)] + [",".join(str(int(v)) for v in row) for row in res.confusion]
    csv_path.write_text("\n".join(lines) + "\n")
    print(f"{args.split} accuracy {res.accuracy:.6f} ({int(np.trace(res.confusion))}/{int(res.confusion.sum())})")
    print(f"confusion matrix written to {csv_path}")
    return EXIT_OK


def read_pgm(path: Path) -> np.ndarray:
    """Read a binary (P5) PGM into a float array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if not 0 < maxval < 256:
        raise DataError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    data = np.frombuffer(raw[pos : pos + width * height], dtype=np.uint8)
    if data.size != width * height:
        raise DataError(f"{path}: PGM raster is truncated")
    return data.reshape(height, width).astype(np.float32) / maxval


def write_pgm(path: Path, image: np.ndarray) -> None:
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def cmd_predict(args) -> int:
    image = read_pgm(args.image)
    if image.shape != (48, 48):
        raise DataError(f"{args.image}: expected a 48x48 image, got {image.shape[1]}x{image.shape[0]}")
    state = load_checkpoint(args.checkpoint)
    model = state.model
    x = normalize(resize(image, model.config.input_size))[None, None].astype(model.parameters()[0].dtype)
    from .train import swapped

    params = model.parameters()
    shadow = [p.data for p in params] if args.raw_weights else state.ema.shadow
    with swapped(params, shadow):
        cls, probs = predict(model, Tensor(x))
    k = int(cls[0])
    print(CLASS_NAMES[k])
    for name, p in zip(CLASS_NAMES, probs[0]):
        print(f"{name:<9} {p:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    checks = gradcheck.OP_CHECKS
    run_model = args.op in (None, "model")
    if args.op is not None:
        checks = [c for c in checks if c.name == args.op]
    ok = True
    print(f"{'op':<22}{'max rel err':>14}{'threshold':>12}  status")
    seeds = range(args.seeds)
    for check in checks:
        t0 = time.perf_counter()
        err = gradcheck.run_op_check(check, seeds)
        passed = err < check.threshold
        ok &= passed
        print(f"{check.name:<22}{err:>14.3e}{check.threshold:>12.0e}  {'PASS' if passed else 'FAIL'}"
              f"  ({time.perf_counter() - t0:.2f}s)")
    if run_model:
        t0 = time.perf_counter()
        err = max(gradcheck.model_check(seed) for seed in seeds)
        passed = err < MODEL_GRAD_THRESHOLD
        ok &= passed
        print(f"{'model (micro)':<22}{err:>14.3e}{MODEL_GRAD_THRESHOLD:>12.0e}  {'PASS' if passed else 'FAIL'}"
              f"  ({time.perf_counter() - t0:.2f}s)")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (DataError, ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
