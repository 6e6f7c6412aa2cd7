"""Command-line entry point: ``specdiff {gen-data,train,infer,eval,register}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "SPECDIFF_SEED"

log = logging.getLogger("specdiff")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


# ---------------------------------------------------------------- image io


def read_image(path):
    from .spectral import to_grayscale

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return to_grayscale(arr) if arr.ndim == 3 else arr


def write_png(arr, path):
    q = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path, format="PNG")


def resize(arr, shape):
    if arr.shape == tuple(shape):
        return arr
    im = Image.fromarray(np.asarray(arr, dtype=np.float32), mode="F")
    return np.asarray(im.resize((shape[1], shape[0]), Image.BILINEAR), dtype=np.float64)


def _next_pow2(n):
    return 1 << max(0, math.ceil(math.log2(n)))


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    from .simgen import GenConfig, gen_dataset, write_dataset
    from .training import parse_config_file

    overrides = parse_config_file(args.config) if args.config else {}
    if args.size is not None:
        overrides["image_size"] = args.size
    seed = args.seed if args.seed is not None else overrides.get("seed", default_seed())
    overrides["seed"] = seed
    try:
        cfg = GenConfig.from_dict(overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad generator config: {exc}") from exc
    if args.count < 1:
        raise UsageError("--count must be positive")
    pairs = gen_dataset(args.count, cfg, seed)
    manifest = write_dataset(pairs, args.out, cfg)
    log.info("wrote %d pairs to %s", manifest["count"], args.out)
    return EXIT_OK


def _train_config(args):
    from .training import TrainConfig, parse_config_file

    values = parse_config_file(args.config) if args.config else {}
    flag_map = {
        "dataset": args.dataset,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "alignment": args.alignment,
        "checkpoint_interval": args.checkpoint_interval,
        "max_steps": args.max_steps,
        "train_size": args.train_size,
        "image_size": args.size,
        "irr_temperature": args.irr_temperature,
        "seed": args.seed,
    }
    values.update({k: v for k, v in flag_map.items() if v is not None})
    if args.stream:
        values["stream"] = True
    if args.no_deterministic:
        values["deterministic"] = False
    values.setdefault("seed", default_seed())
    values["out_dir"] = str(args.out)
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc


def cmd_train(args):
    from .simgen import DatasetError
    from .training import NumericalError, Trainer

    cfg = _train_config(args)
    try:
        trainer = Trainer(cfg, resume=args.resume)
    except (DatasetError, OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    try:
        trainer.run()
    except NumericalError as exc:
        log.error("non-finite loss at step %d: %s (snapshot: %s)", trainer.step, exc, exc.snapshot)
        return EXIT_NUMERIC
    except DatasetError as exc:
        raise DataError(str(exc)) from exc
    hist = [h for h in trainer.history if not h["partial"]]
    if hist:
        log.info("final epoch loss %.4f", hist[-1]["total"])
    return EXIT_OK


def _load_net(path):
    from .diffnet import CheckpointError
    from .training import load_checkpoint

    try:
        net, _, _, cfg = load_checkpoint(path)
    except (CheckpointError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    return net, cfg


def cmd_infer(args):
    import torch

    from .diffnet import full_forward

    net, cfg = _load_net(args.checkpoint)
    template = read_image(args.template)
    source = read_image(args.source)
    if template.shape != source.shape:
        raise DataError(f"template {template.shape} and source {source.shape} differ in size")
    size = cfg.image_size if cfg is not None else _next_pow2(max(source.shape))
    work = (size, size)
    if source.shape != work:
        log.warning("resampling %s input to the trained size %s", source.shape, work)
    t_w, s_w = resize(template, work), resize(source, work)
    with torch.no_grad():
        out = full_forward(net, t_w, s_w)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    defect = resize(out.defect_map.numpy().astype(np.float64), source.shape)
    write_png(defect, out_dir / "defect_map.png")
    write_png((defect >= args.threshold).astype(np.float64), out_dir / "mask.png")
    if args.intermediates:
        for name in ("template_only", "source_only"):
            stream = getattr(out, name).numpy().astype(np.float64)
            write_png(resize(stream, source.shape), out_dir / f"{name}.png")
    if args.overlays:
        from .evalkit import write_overlay

        write_overlay(source, defect, out_dir / "overlay.png")
    pose = out.registration.pose.to_dict()
    sy, sx = source.shape[0] / work[0], source.shape[1] / work[1]
    pose["tx"] *= sx
    pose["ty"] *= sy
    _dump(pose, out_dir / "pose.json")
    return EXIT_OK


def cmd_eval(args):
    from .evalkit import evaluate_dataset
    from .simgen import DatasetError

    if args.oracle:
        net = None
        predictor = lambda pair: pair.gt_mask  # noqa: E731
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --oracle is given")
        net, _ = _load_net(args.checkpoint)
        predictor = None
    report_path = Path(args.report) if args.report else Path(args.dataset) / "eval_report.json"
    try:
        report = evaluate_dataset(net, args.dataset, args.n_thresholds, predictor=predictor,
                                  report_path=report_path, overlays_dir=args.overlays,
                                  use_mask=not args.no_mask)
    except DatasetError as exc:
        raise DataError(str(exc)) from exc
    print(json.dumps({"ap": report.ap, "max_f1": report.max_f1, "pairs": len(report.per_pair),
                      "skipped": report.skipped}, sort_keys=True))
    return EXIT_OK


def cmd_register(args):
    from .registration import PoseSim2, register

    template = read_image(args.template)
    source = read_image(args.source)
    if template.shape != source.shape:
        raise DataError(f"template {template.shape} and source {source.shape} differ in size")
    h, w = source.shape
    work = (_next_pow2(h), _next_pow2(w))
    if work != (h, w):
        log.warning("resampling %s to %s for the spectral stage", (h, w), work)
    res = register(resize(template, work), resize(source, work))
    p = res.pose
    pose = PoseSim2(p.theta, p.scale, p.tx * w / work[1], p.ty * h / work[0])
    _dump(pose.to_dict(), args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    parser = _Parser(prog="specdiff", description="Template-based defect segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the segmentation network")
    t.add_argument("--out", required=True, help="directory for logs and checkpoints")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--alignment", choices=["estimated", "ground_truth"])
    t.add_argument("--checkpoint-interval", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--train-size", type=int)
    t.add_argument("--size", type=int)
    t.add_argument("--irr-temperature", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--stream", action="store_true")
    t.add_argument("--no-deterministic", action="store_true")
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment defects in one pair")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--template", required=True)
    i.add_argument("--source", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--intermediates", action="store_true")
    i.add_argument("--overlays", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate on a dataset directory")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset", required=True)
    e.add_argument("--report")
    e.add_argument("--overlays")
    e.add_argument("--n-thresholds", type=int, default=256)
    e.add_argument("--no-mask", action="store_true")
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("register", help="estimate the pose between two images")
    r.add_argument("--template", required=True)
    r.add_argument("--source", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_register)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except FloatingPointError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
