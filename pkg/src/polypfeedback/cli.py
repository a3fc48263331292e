"""Command line: synth, train, eval, infer, metrics.

Exit codes: 0 ok, 1 usage, 2 I/O or data problem, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("polypfeedback")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="polypfeedback", description="Feedback-attention polyp segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic polyp dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--count", type=int, required=True, help="number of samples (>= 1)")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--size", type=int, default=256, help="image side in pixels")
    s.add_argument("--many-fraction", type=float, default=0.5, help="share of multi-polyp images")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="flat YAML config; defaults when omitted")
    t.add_argument("--data", required=True, help="dataset root with images/ and masks/")
    t.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    t.add_argument("--resume", nargs="?", const="", default=None,
                   help="resume from a checkpoint (default: OUT/last.ckpt)")
    t.add_argument("--max-epochs", type=int, help="override max_epochs")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--iterations", type=int, default=3, help="refinement iterations (default 3)")
    e.add_argument("--report", required=True, help="metrics.csv path")
    e.add_argument("--save-masks", help="also write predicted masks here as <stem>.png")

    i = sub.add_parser("infer", help="segment one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="output prefix PFX for PFX_mask.png, PFX_overlay.png, PFX_attrs.json")
    i.add_argument("--iterations", type=int, default=3, help="refinement iterations (default 3)")

    m = sub.add_parser("metrics", help="score a directory of predicted masks against ground truth")
    m.add_argument("--pred", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--report", required=True)
    return p


def cmd_synth(args) -> int:
    from .data import generate_synthetic

    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.size < 8:
        raise UsageError("--size must be >= 8")
    if not 0 <= args.many_fraction <= 1:
        raise UsageError("--many-fraction must lie in [0, 1]")
    man = generate_synthetic(args.out, args.count, args.seed, args.size, args.many_fraction)
    print(f"wrote {len(man.records)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import load_config, save_config, validate_config
    from .data import ingest, write_split_files
    from .engine import fit

    cfg = load_config(args.config) if args.config else validate_config({})
    if args.max_epochs is not None:
        cfg = validate_config({**cfg.to_dict(), "max_epochs": args.max_epochs})
    out = Path(args.out)
    manifest = ingest(args.data, cfg.split_ratios, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    write_split_files(manifest, out / "splits")
    resume = None
    if args.resume is not None:
        resume = Path(args.resume) if args.resume else out / "last.ckpt"
        if not resume.exists():
            raise FileNotFoundError(f"no checkpoint to resume from at {resume}")
    state = fit(cfg, manifest, out, resume=resume)
    print(f"trained {state.epoch} epochs; best val mDSC {state.best_val_dsc:.4f}; checkpoints in {out}")
    return EXIT_OK


def _load_for_eval(path):
    from .engine import load_checkpoint

    state = load_checkpoint(path)
    state.model.eval()
    return state.model


def cmd_eval(args) -> int:
    from .data import ingest, load_arrays, save_mask
    from .engine import evaluate
    from .metrics import write_report

    if args.iterations < 1:
        raise UsageError("--iterations must be >= 1")
    model = _load_for_eval(args.checkpoint)
    cfg = model.cfg
    manifest = ingest(args.data, cfg.split_ratios, cfg.seed)
    recs = manifest.split(args.split)
    if not recs:
        raise FileNotFoundError(f"split {args.split!r} of {args.data} is empty")
    images, masks = load_arrays(recs, cfg.image_size)
    res = evaluate(model, images, masks, [r.stem for r in recs], args.iterations, cfg.size_thresholds)
    summary = write_report(res.rows, args.report)
    if args.save_masks:
        d = Path(args.save_masks)
        d.mkdir(parents=True, exist_ok=True)
        for stem, m in res.pred_masks.items():
            save_mask(m, d / f"{stem}.png")
    print(f"{len(res.rows)} images  mDSC {summary.dsc:.4f}  mIoU {summary.iou:.4f}  HD {summary.hd:.2f}")
    return EXIT_OK


def draw_overlay(image: np.ndarray, mask: np.ndarray, color=(255, 0, 0)) -> np.ndarray:
    """Trace the mask boundary (foreground pixels with a background 4-neighbour) on the image."""
    from scipy import ndimage

    m = mask.astype(bool)
    boundary = m & ~ndimage.binary_erosion(m, border_value=0)
    out = image.copy()
    out[boundary] = color
    return out


def cmd_infer(args) -> int:
    import cv2

    from .data import load_image, save_image, save_mask
    from .engine import infer_one

    if args.iterations < 1:
        raise UsageError("--iterations must be >= 1")
    src = Path(args.image)
    if not src.is_file():
        raise FileNotFoundError(f"image not found: {src}")
    model = _load_for_eval(args.checkpoint)
    original = load_image(src)
    image = load_image(src, model.cfg.image_size)
    probs, mask, attrs, prompt = infer_one(model, image, args.iterations)
    h, w = original.shape[:2]
    if mask.shape != (h, w):
        mask = cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)
    prefix = str(args.out)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    save_mask(mask, prefix + "_mask.png")
    rgb = np.clip(np.rint(original * 255), 0, 255).astype(np.uint8)
    save_image(draw_overlay(rgb, mask), prefix + "_overlay.png")
    payload = {"many": attrs.many, "small": attrs.small, "medium": attrs.medium, "large": attrs.large,
               "prompt": prompt, "iterations": args.iterations}
    Path(prefix + "_attrs.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(prompt)
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .data import load_mask
    from .metrics import score_pair, write_report

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    preds = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.png"))}
    extra = sorted(set(preds) - set(gts))
    missing = sorted(set(gts) - set(preds))
    if extra or missing:
        parts = []
        if extra:
            parts.append("no ground truth for: " + ", ".join(extra))
        if missing:
            parts.append("no prediction for: " + ", ".join(missing))
        raise FileNotFoundError("; ".join(parts))
    if not preds:
        raise FileNotFoundError(f"no masks in {pred_dir}")
    rows = []
    for stem in sorted(preds):
        p, g = load_mask(preds[stem]), load_mask(gts[stem])
        if p.shape != g.shape:
            raise ValueError(f"size mismatch for {stem}: {p.shape} vs {g.shape}")
        rows.append(score_pair(stem, p, g))
    summary = write_report(rows, args.report)
    print(f"{len(rows)} images  mDSC {summary.dsc:.4f}  HD {summary.hd:.2f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "metrics": cmd_metrics}


def main(argv=None) -> int:
    from .config import ConfigError
    from .data import DatasetError
    from .engine import NumericError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
