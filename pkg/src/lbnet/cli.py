"""``lbnet`` command line: train, eval, profile and sr.

Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numerical abort.
Results go to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import re
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from lbnet.arch import DEFAULT_HR_SIZE, PRESETS, ModelConfig, build_model, count_mult_adds, preset
from lbnet.data import DatasetIndex, load_png, save_png
from lbnet.engine import Tensor, no_grad
from lbnet.errors import (
    CheckpointError, ConfigError, DatasetError, ImageIOError, NumericalError, UsageError,
)
from lbnet.evaluation import evaluate_model
from lbnet.training import TrainConfig, load_checkpoint, train_loop

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

# key -> (owner, parser); owner is "model", "train", "path" or "variant".
_KEYS = {
    "variant": ("variant", str),
    "scale": ("model", int),
    "channels": ("model", int),
    "n_lffm": ("model", int),
    "recursions": ("model", int),
    "heads": ("model", int),
    "mlp_ratio": ("model", float),
    "fusion_mode": ("model", str),
    "qk_reduction": ("model", int),
    "ca_reduction": ("model", int),
    "tm_channels": ("model", int),
    "token_kernel": ("model", int),
    "lr_max": ("train", float),
    "lr_min": ("train", float),
    "total_steps": ("train", int),
    "batch_size": ("train", int),
    "patch": ("train", int),
    "seed": ("train", int),
    "checkpoint_every": ("train", int),
    "train_dir": ("path", str),
    "val_dir": ("path", str),
    "checkpoint_dir": ("path", str),
}
VARIANTS = ("lbnet", "lbnet-t", "custom")


@dataclasses.dataclass
class RunConfig:
    """A parsed run configuration file."""

    variant: str
    model: ModelConfig
    train: TrainConfig
    train_dir: Optional[Path]
    val_dir: Optional[Path]
    checkpoint_dir: Path

    @classmethod
    def parse(cls, text: str, base: Path = Path(".")) -> "RunConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment.

        Explicit keys win over the variant preset; relative paths resolve
        against ``base`` (the config file's directory).

        Raises:
            ConfigError: listing every offending line.
        """
        values: Dict[str, object] = {}
        problems = []
        for no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (part.strip() for part in line.partition("="))
            if not sep or not key:
                problems.append(f"line {no}: expected 'key = value', got {raw.strip()!r}")
            elif key not in _KEYS:
                problems.append(f"line {no}: unknown key {key!r}")
            elif key in values:
                problems.append(f"line {no}: duplicate key {key!r}")
            else:
                try:
                    values[key] = _KEYS[key][1](value)
                except ValueError:
                    problems.append(f"line {no}: bad value {value!r} for {key!r}")
        variant = values.pop("variant", "lbnet")
        if variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {variant!r}")
        if problems:
            raise ConfigError("invalid run config:\n  " + "\n  ".join(problems), problems)

        model_kw = {k: v for k, v in values.items() if _KEYS[k][0] == "model"}
        train_kw = {k: v for k, v in values.items() if _KEYS[k][0] == "train"}
        base_kw = {} if variant == "custom" else dict(PRESETS[variant])
        model = ModelConfig(**{**base_kw, **model_kw}).validate()
        train = TrainConfig(**train_kw).validate()

        def path(key, default=None):
            v = values.get(key, default)
            return None if v is None else (base / str(v))

        return cls(variant, model, train, path("train_dir"), path("val_dir"),
                   path("checkpoint_dir", "checkpoints"))


def _parse_hr_size(text: str) -> Tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise ConfigError(f"--hr-size must look like WIDTHxHEIGHT, got {text!r}")
    width, height = int(m.group(1)), int(m.group(2))
    return height, width


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    try:
        text = cfg_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(cfg_path, f"cannot read config: {exc}") from None
    run = RunConfig.parse(text, cfg_path.parent)
    if run.train_dir is None:
        raise ConfigError("train_dir is required for training")
    if not run.train_dir.is_dir():
        raise ConfigError(f"train_dir {run.train_dir} is not a directory")
    run.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run.checkpoint_dir / "last.lbnc"
    log_path = run.checkpoint_dir / "train.log"

    if args.resume:
        model, state, start = load_checkpoint(args.resume, expected=run.model)
        if model.config != run.model:
            raise ConfigError("checkpoint config differs from the run config")
        mode = "a"
    else:
        model, state, start = build_model(run.model, seed=run.train.seed), None, 0
        mode = "w"
    index = DatasetIndex.from_dir(run.train_dir)
    with open(log_path, mode, encoding="utf-8") as fh:
        def write(rec):
            fh.write(rec.to_line() + "\n")
            fh.flush()

        try:
            result = train_loop(model, index, run.train, hooks=[write], state=state, start_step=start,
                                checkpoint_path=ckpt)
        except NumericalError as exc:
            print(f"lbnet train: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    final = result.records[-1].loss if result.records else float("nan")
    print(f"steps {start}..{run.train.total_steps}  final loss {final:.6f}  checkpoint {ckpt}")
    if run.val_dir is not None:
        report = evaluate_model(model, run.val_dir, run.model.scale)
        (run.checkpoint_dir / "val_report.txt").write_text(report.to_text(), encoding="utf-8")
        print(f"validation PSNR/SSIM {report.summary()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    if args.scale != model.config.scale:
        raise ConfigError(f"--scale {args.scale} does not match the checkpoint's x{model.config.scale}")
    report = evaluate_model(model, args.hr_dir, args.scale, model_id=Path(args.checkpoint).name)
    if args.out:
        out = Path(args.out)
        try:
            out.write_text(report.to_text(), encoding="utf-8")
            out.with_name(out.name + ".tsv").write_text(report.to_tsv(), encoding="utf-8")
        except OSError as exc:
            raise ImageIOError(out, f"cannot write report: {exc}") from None
    print(report.summary())
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg = preset(args.variant, scale=args.scale)
    if args.hr_size is None:
        h, w = DEFAULT_HR_SIZE
        hr_size = (h - h % args.scale, w - w % args.scale)
    else:
        hr_size = _parse_hr_size(args.hr_size)
    report = count_mult_adds(build_model(cfg, seed=0), hr_size)
    print(f"{args.variant} x{args.scale}  {report.summary()}")
    sys.stdout.write(report.to_tsv())
    return EXIT_OK


def cmd_sr(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    img = load_png(args.input).to_array()[None]
    with no_grad():
        sr = model(Tensor(img)).data
    save_png(np.clip(sr, 0.0, 1.0), args.output)
    print(f"{args.output}: {sr.shape[-1]}x{sr.shape[-2]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lbnet", description="Lightweight bimodal super-resolution network.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a key = value run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a directory of HR PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--out", help="report path (a .tsv copy is written alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="parameter and Mult-Adds table")
    p.add_argument("--variant", choices=["lbnet", "lbnet-t"], default="lbnet")
    p.add_argument("--scale", type=int, choices=[2, 3, 4], default=4)
    p.add_argument("--hr-size", help="WIDTHxHEIGHT of the HR output (default 1280x720, floored to the scale)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("sr", help="super-resolve one PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_sr)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, DatasetError) as exc:
        print(f"lbnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"lbnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageIOError, CheckpointError, OSError) as exc:
        print(f"lbnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
