"""Command-line interface.

Exit codes: 0 success, 1 usage or input error, 2 contract violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (SyntheticRainConfig, load_pair_directory, read_image, sample_clean_images,
                   synthesize_rain, write_image)
from .model import ContractError

log = logging.getLogger("qudec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="training config file (key = value lines)")
    p.add_argument("--checkpoint", type=Path, help="QuDeC (or GLN) checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _threshold_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pristine", type=Path, help="pristine NIQE model (default: bundled)")
    p.add_argument("--thresholds", type=float, nargs=2, metavar=("T1", "T2"), default=(6.0, 9.0))
    p.add_argument("--margin", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qudec", description="Confidence-guided single-image de-raining")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()

    p = sub.add_parser("synth", parents=[common], help="synthesize rainy/clean pairs")
    p.add_argument("--in", dest="inputs", type=Path, help="directory of clean images (default: bundled photos)")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--density", type=float, default=SyntheticRainConfig.density)
    p.add_argument("--intensity", type=float, default=SyntheticRainConfig.intensity)
    p.add_argument("--angle", type=float, default=SyntheticRainConfig.angle)

    p = sub.add_parser("niqe-fit", parents=[common], help="fit a pristine NIQE model on clean images")
    p.add_argument("--in", dest="inputs", type=Path, required=True)
    p.add_argument("--min-images", type=int, default=20)

    p = sub.add_parser("calibrate", parents=[common], help="tertile thresholds from rainy images")
    p.add_argument("--in", dest="inputs", type=Path, required=True)
    p.add_argument("--pristine", type=Path)
    p.add_argument("--margin", type=float, default=0.2)

    p = sub.add_parser("label", parents=[common], help="NIQE label map for one image")
    p.add_argument("--in", dest="inputs", type=Path, required=True)
    _threshold_args(p)

    p = sub.add_parser("gln-train", parents=[common], help="train the label network")
    p.add_argument("--data", type=Path, required=True, help="directory of rainy images")
    p.add_argument("--epochs", type=int)
    _threshold_args(p)

    p = sub.add_parser("train", parents=[common], help="train QuDeC")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--layout", choices=("paired_dirs", "concatenated"), default="paired_dirs")
    p.add_argument("--labels", choices=("gln", "niqe"), default="gln")
    p.add_argument("--gln", type=Path, help="GLN checkpoint (required for --labels gln)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", type=Path)
    p.add_argument("--desk", action="store_true", help="desk-scale mode (gradient clipping, frozen BatchNorm statistics)")
    _threshold_args(p)

    p = sub.add_parser("derain", parents=[common], help="de-rain one image")
    p.add_argument("--in", dest="inputs", type=Path, required=True)
    p.add_argument("--cycle-spin", action="store_true")
    p.add_argument("--export-maps", type=Path, metavar="DIR")

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM report over a paired dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--layout", choices=("paired_dirs", "concatenated"), default="paired_dirs")
    p.add_argument("--cycle-spin", action="store_true")
    p.add_argument("--float", dest="float_metrics", action="store_true", help="skip 8-bit quantization")
    p.add_argument("--channel", choices=("rgb", "y"), default="rgb")
    p.add_argument("--identity", action="store_true", help="score the rainy inputs (no model)")
    return parser


def _pristine(path):
    from .niqe import PristineModel, default_pristine_model

    return PristineModel.load(path) if path else default_pristine_model()


def _thresholds(args):
    from .labeling import ThresholdConfig

    return ThresholdConfig(args.thresholds[0], args.thresholds[1], args.margin)


def _image_dir(path: Path) -> list[Path]:
    from .data import _image_files

    if not path.is_dir():
        raise UsageError(f"{path} is not a directory")
    files = _image_files(path)
    if not files:
        raise UsageError(f"no images found in {path}")
    return files


def _require_checkpoint(args) -> Path:
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    if not args.checkpoint.exists():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    return args.checkpoint


def cmd_synth(args) -> None:
    out = args.out or Path("synthetic")
    if args.inputs:
        clean = [read_image(p) for p in _image_dir(args.inputs)]
    else:
        clean = sample_clean_images(args.count, args.size, seed=args.seed)
    for k, img in enumerate(clean):
        cfg = SyntheticRainConfig(density=args.density, intensity=args.intensity, angle=args.angle,
                                  seed=args.seed * 1000 + k)
        pair = synthesize_rain(img, cfg)
        write_image(out / "rainy" / f"{k:04d}.png", pair.rainy)
        write_image(out / "clean" / f"{k:04d}.png", pair.clean)
    print(f"wrote {len(clean)} pairs to {out}")


def cmd_niqe_fit(args) -> None:
    from .niqe import fit_pristine_model

    images = [read_image(p) for p in _image_dir(args.inputs)]
    model = fit_pristine_model(images, descriptor=f"{len(images)} images from {args.inputs}",
                               min_images=args.min_images)
    out = args.out or Path("pristine_niqe.json")
    model.save(out)
    print(f"wrote {out} (d={model.feature_dim})")


def cmd_calibrate(args) -> None:
    from .labeling import calibrate_thresholds, score_patches

    pristine = _pristine(args.pristine)
    scores = np.concatenate([score_patches(read_image(p), pristine)[0].ravel()
                             for p in _image_dir(args.inputs)])
    cfg = calibrate_thresholds(scores, margin=args.margin)
    line = f"T1 = {cfg.t1:.4f}\nT2 = {cfg.t2:.4f}\nmargin = {cfg.margin}\n"
    if args.out:
        args.out.write_text(line)
    print(line, end="")


def cmd_label(args) -> None:
    from .labeling import generate_label_map

    image = read_image(args.inputs)
    labels = generate_label_map(image, _pristine(args.pristine), _thresholds(args))
    prefix = args.out or args.inputs.with_suffix("")
    txt = Path(f"{prefix}.labels.txt")
    png = Path(f"{prefix}.labels.png")
    txt.parent.mkdir(parents=True, exist_ok=True)
    labels.save(txt)
    labels.save_png(png, image)
    print(f"wrote {txt} and {png}")


def _train_config(args):
    from .training import TrainConfig

    cfg = TrainConfig.load(args.config) if args.config else (TrainConfig.desk() if getattr(args, "desk", False)
                                                              else TrainConfig())
    overrides = {"seed": args.seed}
    if getattr(args, "epochs", None):
        overrides["gln_epochs" if args.command == "gln-train" else "epochs"] = args.epochs
    import dataclasses

    return dataclasses.replace(cfg, **overrides)


def cmd_gln_train(args) -> None:
    from .labeling import build_gln_dataset
    from .training import train_gln

    images = [read_image(p) for p in _image_dir(args.data)]
    dataset = build_gln_dataset(images, _pristine(args.pristine), _thresholds(args), seed=args.seed)
    out = args.out or Path("gln.ckpt")
    result = train_gln(dataset, _train_config(args), out_path=out)
    print(f"wrote {out}; final train accuracy {result.log[-1]['train_accuracy']:.3f}")


def cmd_train(args) -> None:
    from .labeling import generate_label_map
    from .training import TrainingSample, gln_label_map, load_gln, train_qudec

    pairs = list(load_pair_directory(args.data, args.layout))
    if not pairs:
        raise UsageError(f"no training pairs in {args.data}")
    if args.labels == "gln":
        if args.gln is None:
            raise UsageError("--labels gln needs --gln CHECKPOINT (or use --labels niqe)")
        gln = load_gln(args.gln)
        samples = [TrainingSample(p, gln_label_map(gln, p.rainy)) for p in pairs]
    else:
        pristine, cfg = _pristine(args.pristine), _thresholds(args)
        samples = [TrainingSample(p, generate_label_map(p.rainy, pristine, cfg)) for p in pairs]
    out = args.out or Path("runs/qudec")
    result = train_qudec(samples, _train_config(args), out, max_steps=args.max_steps,
                         resume_from=args.resume)
    print(f"trained {result.state.step} steps; checkpoints in {out}")


def cmd_derain(args) -> None:
    from .evaluation import cycle_spin_derain, derain, export_maps
    from .training import load_model

    model = load_model(_require_checkpoint(args))
    rainy = read_image(args.inputs)
    result = derain(rainy, model)
    x_hat = cycle_spin_derain(rainy, model) if args.cycle_spin else result.x_hat
    result.x_hat = x_hat
    out = args.out or args.inputs.with_name(args.inputs.stem + "_derained.png")
    write_image(out, x_hat)
    if args.export_maps:
        export_maps(result, args.export_maps, args.inputs.stem)
    print(f"wrote {out}")


def cmd_eval(args) -> None:
    from .evaluation import CycleSpinConfig, evaluate_dataset
    from .training import load_model

    if not args.data.is_dir():
        raise UsageError(f"{args.data} is not a directory")
    try:
        pairs = list(load_pair_directory(args.data, args.layout))
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    if not pairs:
        raise UsageError(f"no image pairs found in {args.data}")
    restore = (lambda y: y) if args.identity else load_model(_require_checkpoint(args))
    report = evaluate_dataset(pairs, restore, CycleSpinConfig() if args.cycle_spin else None,
                              quantized=not args.float_metrics, channel=args.channel,
                              descriptor=f"dataset {args.data}")
    if args.out:
        report.save(args.out)
    print(report.to_table(), end="")


COMMANDS = {
    "synth": cmd_synth, "niqe-fit": cmd_niqe_fit, "calibrate": cmd_calibrate, "label": cmd_label,
    "gln-train": cmd_gln_train, "train": cmd_train, "derain": cmd_derain, "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"qudec {args.command}: {exc}", file=sys.stderr)
        return 1
    except ContractError as exc:
        print(f"qudec {args.command}: contract violation: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"qudec {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
