"""Command-line entry point: make-toy-data, train, eval, predict.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The default config is the toy preset, or the file named by ``SEMCD_CONFIG``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import ClassVocabulary, SyntheticSpec, generate_synthetic_dataset, load_second_directory
from .errors import SemanticCDError

log = logging.getLogger("semantic_cd")

CONFIG_ENV = "SEMCD_CONFIG"


class UsageError(Exception):
    pass


def _load_config(args) -> cfgmod.RunConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    try:
        return cfgmod.load_run_config(path, args.set or [])
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _require_dir(path, what) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _require_file(path, what) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _manifest(args, split="train"):
    root = _require_dir(args.data, "--data")
    vocab = ClassVocabulary.load(args.vocabulary) if getattr(args, "vocabulary", None) else None
    return load_second_directory(root, vocab, split)


def cmd_make_toy_data(args) -> int:
    vocab = ClassVocabulary.load(args.vocabulary) if args.vocabulary else ClassVocabulary.second()
    spec = SyntheticSpec(
        n_samples=args.n, H=args.size, W=args.size, vocabulary=vocab, seed=args.seed, patch_size=args.patch_size
    )
    try:
        manifest = generate_synthetic_dataset(spec, args.out)
    except (ValueError, SemanticCDError) as exc:
        raise UsageError(str(exc)) from exc
    print(f"wrote {len(manifest)} samples ({args.size}x{args.size}, C={vocab.C}, seed={args.seed}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    import torch

    from .model import build_model
    from .training import load_checkpoint, run_stage

    cfg = _load_config(args)
    manifest = _manifest(args)
    stages = ["bcd", "scd"] if args.stage == "both" else [args.stage]
    if args.stage == "scd" and not args.bcd_checkpoint:
        raise UsageError("--stage scd needs --bcd-checkpoint from a finished BCD stage")
    if args.baseline:
        cfg.model.use_prompter = False
    names = list(manifest.vocabulary.names)
    if names != list(ClassVocabulary(tuple(cfg.model.vocabulary)).names):
        log.info("using the dataset vocabulary %s", names)
        cfg.model.vocabulary = names

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save_run_config(cfg, out / "config.json")
    log_path = out / "train_log.jsonl"
    if log_path.exists() and stages[0] == "bcd":
        log_path.unlink()

    torch.set_num_threads(1)
    if args.bcd_checkpoint:
        ckpt = load_checkpoint(_require_file(args.bcd_checkpoint, "--bcd-checkpoint"))
        if not any(h["stage"] == "bcd" for h in ckpt.stage_history):
            raise UsageError(f"{args.bcd_checkpoint} has not completed a BCD stage")
        ckpt.config.use_prompter = cfg.model.use_prompter
        model = ckpt.build()
    else:
        model = build_model(cfg.model)

    for stage in stages:
        spec = getattr(cfg, stage)
        if args.steps is not None:
            spec.max_steps = args.steps
        ckpt = run_stage(spec, model, manifest, log_path=log_path, checkpoint_path=out / f"{stage}.ckpt")
        print(f"{stage}: {ckpt.stage_history[-1]['steps']} steps, final loss {ckpt.stage_history[-1]['final_loss']:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate, ground_truth_stub, no_change_stub
    from .training import load_checkpoint

    manifest = _manifest(args, args.split)
    if args.stub:
        model = {"gt": ground_truth_stub, "no-change": no_change_stub}[args.stub]
    else:
        ckpt_path = _require_file(args.checkpoint, "--checkpoint")
        expected = _load_config(args).model if args.config else None
        model = load_checkpoint(ckpt_path, expected).build()
        if list(model.cfg.vocabulary) != list(manifest.vocabulary.names):
            raise SemanticCDError("checkpoint vocabulary does not match the dataset vocabulary")
    report = evaluate(model, manifest, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(report.table_row())
    return 0


def colorize(labels: np.ndarray, vocabulary: ClassVocabulary) -> np.ndarray:
    palette = np.asarray(vocabulary.palette, dtype=np.uint8)
    return palette[labels]


def overlay_figure(sample, pred_pre, pred_post, bcd_pred, vocabulary):
    """2x4 panel: image, ground truth, prediction and change mask for each epoch."""
    from PIL import Image

    def rgb(img):
        return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)

    def mask(m):
        return np.repeat((m.astype(np.uint8) * 255)[..., None], 3, axis=-1)

    top = [rgb(sample.image_pre), colorize(sample.label_pre, vocabulary), colorize(pred_pre, vocabulary), mask(sample.change_mask)]
    bottom = [rgb(sample.image_post), colorize(sample.label_post, vocabulary), colorize(pred_post, vocabulary), mask(bcd_pred)]
    H, W = sample.shape
    gap = 2
    canvas = np.full((2 * H + gap, 4 * W + 3 * gap, 3), 32, dtype=np.uint8)
    for r, row in enumerate((top, bottom)):
        for c, panel in enumerate(row):
            canvas[r * (H + gap) : r * (H + gap) + H, c * (W + gap) : c * (W + gap) + W] = panel
    return Image.fromarray(canvas)


def cmd_predict(args) -> int:
    import torch
    from PIL import Image

    from .data import collate, load_sample
    from .training import load_checkpoint

    manifest = _manifest(args, args.split)
    model = load_checkpoint(_require_file(args.checkpoint, "--checkpoint")).build()
    ids = args.id or manifest.sample_ids
    unknown = [i for i in ids if i not in manifest.sample_ids]
    if unknown:
        raise UsageError(f"unknown sample ids {unknown}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = manifest.vocabulary
    (out / "vocabulary.json").write_text(json.dumps(vocab.to_json(), indent=2) + "\n")
    dtype = next(model.parameters()).dtype
    for sid in ids:
        sample = load_sample(manifest, sid)
        img1, img2, *_ = collate([sample])
        pred, (p1, p2) = model.predict(img1.to(dtype), img2.to(dtype), args.threshold)
        prob = torch.sigmoid(pred.bcd_logits[0]).numpy()
        bcd = prob >= args.threshold
        p1, p2 = p1[0].numpy().astype(np.uint8), p2[0].numpy().astype(np.uint8)
        Image.fromarray(bcd.astype(np.uint8) * 255).save(out / f"{sid}_bcd.png")
        Image.fromarray(p1).save(out / f"{sid}_scd_pre.png")
        Image.fromarray(p2).save(out / f"{sid}_scd_post.png")
        if args.save_probs:
            np.save(out / f"{sid}_bcd_prob.npy", prob.astype(np.float32))
        if not args.no_overlay:
            overlay_figure(sample, p1, p2, bcd, vocab).save(out / f"{sid}_overlay.png")
    print(f"wrote predictions for {len(ids)} samples to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semantic-cd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", help="write a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--vocabulary", help="vocabulary JSON (default: SECOND classes)")
    p.set_defaults(func=cmd_make_toy_data)

    def common(p):
        p.add_argument("--config", help=f"run config JSON or preset name (default: ${CONFIG_ENV} or toy)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        p.add_argument("--data", required=True, help="SECOND-layout dataset root")
        p.add_argument("--vocabulary", help="vocabulary JSON overriding the dataset's")

    p = sub.add_parser("train", help="run the BCD and/or SCD stage")
    common(p)
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--stage", choices=["bcd", "scd", "both"], default="both")
    p.add_argument("--steps", type=int, help="optimizer steps per stage (overrides epochs)")
    p.add_argument("--bcd-checkpoint", help="finished BCD checkpoint (required for --stage scd)")
    p.add_argument("--baseline", action="store_true", help="train without the prompter (zero cost volume)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="write metrics.json for a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--out", default="metrics.json")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--stub", choices=["gt", "no-change"], help="evaluate a reference stub instead of a model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write masks and overlay figures")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--id", action="append", help="sample id (repeatable; default: all)")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--no-overlay", action="store_true")
    p.add_argument("--save-probs", action="store_true")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SemanticCDError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
