"""Command-line entry point: ``fpro train|infer|decompose|gradcheck|params``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import KINDS, load_corpus, make_corpus, write_corpus
from .decompose import decompose_image, write_decomposition
from .imageio import ImageDecodeError, read_image, write_image
from .metrics import psnr, ssim
from .model import FPro, ImageTooSmall, ModelConfig, build_model, fpro_forward, param_breakdown, parse_value
from .train import DivergenceError, TrainConfig, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REFERENCE_PARAMS = 22.3e6
PARAM_TOLERANCE = 0.20

PRESETS = {"default": {}, "micro": ModelConfig.micro().to_items()}
RUN_KEYS = {"seed": 0, "precision": "f64", "preset": "default"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; blank lines are ignored."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        items[key.strip()] = value.strip()
    return items


_MODEL_KEYS = {f.name: f.default for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.default for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    seed: int = 0
    precision: str = "f64"
    sources: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def resolve_config(file_items: dict[str, str], cli_items: dict[str, str]) -> RunConfig:
    """Merge defaults, then the preset, then the config file, then CLI flags."""
    merged = dict(file_items)
    merged.update(cli_items)
    known = set(_MODEL_KEYS) | set(_TRAIN_KEYS) | set(RUN_KEYS)
    for key in merged:
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
    preset = merged.get("preset", "default")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    model_items = dict(PRESETS[preset])
    model_items.update({k: v for k, v in merged.items() if k in _MODEL_KEYS})
    try:
        model = ModelConfig.from_items(model_items)
        train_kw = {k: parse_value(_TRAIN_KEYS[k], v) for k, v in merged.items() if k in _TRAIN_KEYS}
        seed = int(merged.get("seed", 0))
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    train_kw["seed"] = seed
    if "patch" in merged:
        train_kw["patch"] = model.patch
    precision = merged.get("precision", "f64")
    if precision not in ("f32", "f64"):
        raise UsageError(f"precision must be f32 or f64, got {precision!r}")
    return RunConfig(model, TrainConfig(**train_kw), seed, precision, merged)


def _cli_items(args) -> dict[str, str]:
    items = {}
    if getattr(args, "seed", None) is not None:
        items["seed"] = str(args.seed)
    if getattr(args, "precision", None) is not None:
        items["precision"] = args.precision
    if getattr(args, "preset", None) is not None:
        items["preset"] = args.preset
    if getattr(args, "no_hpm", False):
        items["use_hpm"] = "false"
    if getattr(args, "no_lpm", False):
        items["use_lpm"] = "false"
    if getattr(args, "multi_gdd", False):
        items["single_gdd"] = "false"
    if getattr(args, "iterations", None) is not None:
        items["iterations"] = str(args.iterations)
    if getattr(args, "patch", None) is not None:
        items["patch"] = str(args.patch)
    return items


def run_config(args) -> RunConfig:
    file_items = read_config_file(args.config) if getattr(args, "config", None) else {}
    return resolve_config(file_items, _cli_items(args))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _read(path) -> np.ndarray:
    try:
        return read_image(path)
    except ImageDecodeError as exc:
        raise DataError(str(exc)) from None


def _load_model(path, rc: RunConfig | None, explicit: bool) -> FPro:
    """Load a checkpoint; with an explicit config it must fit that architecture."""
    try:
        ck = load_checkpoint(path)
        model = FPro(rc.model if explicit else ck.config)
        ck.apply_to(model)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from None
    return model


def _explicit_model_config(args) -> bool:
    return bool(getattr(args, "config", None) or getattr(args, "preset", None)
                or getattr(args, "no_hpm", False) or getattr(args, "no_lpm", False)
                or getattr(args, "multi_gdd", False) or getattr(args, "patch", None) is not None)


def cmd_train(args) -> int:
    rc = run_config(args)
    if args.corpus:
        try:
            corpus = load_corpus(args.corpus)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load corpus: {exc}") from None
    elif args.synthesize:
        corpus = make_corpus(args.synthesize, args.image_size, rc.seed, args.kind)
        if args.write_corpus:
            write_corpus(corpus, args.write_corpus)
    else:
        raise UsageError("give --corpus MANIFEST or --synthesize N")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(rc.model, rc.seed, rc.dtype)
    with open(out / "metrics.jsonl", "w") as log:
        try:
            result = train_loop(model, corpus, rc.train, log)
        except DivergenceError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(out / "checkpoint.fpro", result.checkpoint)
    for rec in result.log[-1:]:
        print(f"iter {rec['iter']}  loss {rec['loss']:.6f}  psnr {rec['psnr']:.2f}  ssim {rec['ssim']:.4f}")
    print(f"wrote {out / 'checkpoint.fpro'} and {out / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    rc = run_config(args)
    model = _load_model(args.checkpoint, rc, _explicit_model_config(args))
    if getattr(args, "precision", None):
        model.astype(rc.dtype)
    image = _read(args.input)
    try:
        restored = fpro_forward(model, image, "eval").data.astype(np.float64)
    except ImageTooSmall as exc:
        raise DataError(str(exc)) from None
    try:
        write_image(args.output, restored)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot write {args.output}: {exc}") from None
    if args.reference:
        ref = _read(args.reference)
        if ref.shape != restored.shape:
            raise DataError(f"reference {ref.shape} and output {restored.shape} differ in shape")
        # score what was written to disk
        written = _read(args.output)
        print(f"PSNR {psnr(written, ref, args.space):.2f} dB")
        print(f"SSIM {ssim(written, ref, args.space):.4f}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    rc = run_config(args)
    if args.untrained:
        if args.checkpoint:
            raise UsageError("give a checkpoint or --untrained, not both")
        model = build_model(rc.model, rc.seed)
    elif args.checkpoint:
        model = _load_model(args.checkpoint, rc, _explicit_model_config(args))
    else:
        raise UsageError("give a checkpoint or --untrained")
    image = _read(args.image)
    try:
        d = decompose_image(model, image)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for path in write_decomposition(d, args.outdir, raw=args.raw):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rows = gradcheck.run(args.module, seed)
    ok = True
    for name, err in rows:
        passed = err < gradcheck.TOLERANCE
        ok &= passed
        print(f"{name:<20} {err:.3e}  {'PASS' if passed else 'FAIL'}")
    print("all passed" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_params(args) -> int:
    rc = run_config(args)
    model = FPro(rc.model)
    for name, count in param_breakdown(model).items():
        print(f"{name:<10} {count:>12,d}  {count / 1e6:6.2f}M")
    total = model.num_parameters()
    lo, hi = REFERENCE_PARAMS * (1 - PARAM_TOLERANCE), REFERENCE_PARAMS * (1 + PARAM_TOLERANCE)
    flag = "OK" if lo <= total <= hi else "WARN"
    print(f"total {total / 1e6:.1f}M ({total:,d}) {flag} "
          f"[reference {REFERENCE_PARAMS / 1e6:.1f}M +/-{PARAM_TOLERANCE:.0%}]")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, model_flags: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="key=value file; CLI flags take precedence")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    if model_flags:
        p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                       help="architecture preset applied before the config file")
        p.add_argument("--no-hpm", action="store_true", help="drop the high-frequency prompt path")
        p.add_argument("--no-lpm", action="store_true", help="drop the low-frequency prompt path")
        p.add_argument("--multi-gdd", action="store_true", help="one decoupler per decoder level")
        p.add_argument("--patch", type=int, default=None,
                       help="training patch size, also the native prompt resolution")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fpro", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train on a corpus and write a checkpoint plus metrics log")
    _common(p)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--corpus", metavar="MANIFEST", help="JSONL manifest of clean images")
    p.add_argument("--synthesize", type=int, metavar="N", help="generate N procedural images instead")
    p.add_argument("--kind", choices=KINDS, default="rain-streak")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--write-corpus", metavar="DIR", help="also save the synthesized corpus")
    p.add_argument("--out", default="run", metavar="DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="restore one image")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--reference", metavar="PATH", help="clean image; prints PSNR/SSIM")
    p.add_argument("--space", choices=("rgb", "y"), default="rgb", help="metric colour space")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("decompose", help="write low/high band maps and spectra")
    _common(p)
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("image")
    p.add_argument("outdir")
    p.add_argument("--untrained", action="store_true", help="use freshly initialised weights")
    p.add_argument("--raw", action="store_true", help="shared affine encoding instead of min-max (debug)")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the learned operators")
    p.add_argument("--module", choices=("all",) + gradcheck.SUITES, default="all")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts per module")
    _common(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("missing command; see --help")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
