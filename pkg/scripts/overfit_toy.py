"""Overfit the two-stage model on the synthetic toy set and report convergence.

    python3 scripts/overfit_toy.py --data /tmp/toy --out runs/overfit

Generates the dataset first if ``--data`` does not exist yet.
"""

import argparse
import json
import time
from pathlib import Path

import torch

from semantic_cd.config import load_run_config
from semantic_cd.data import SyntheticSpec, generate_synthetic_dataset, load_second_directory
from semantic_cd.model import build_model
from semantic_cd.training import changed_pixel_accuracy, dataset_loss, run_stage


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data", default="data/toy")
    parser.add_argument("--out", default="runs/overfit")
    parser.add_argument("--config", default="toy")
    parser.add_argument("--set", action="append", default=[])
    args = parser.parse_args()

    torch.set_num_threads(1)
    cfg = load_run_config(args.config, args.set)
    if not Path(args.data).is_dir():
        generate_synthetic_dataset(SyntheticSpec(n_samples=8, H=64, W=64, seed=cfg.seed), args.data)
    data = load_second_directory(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg.model)
    summary = {}
    t0 = time.perf_counter()
    run_stage(cfg.bcd, model, data, log_path=out / "train_log.jsonl", checkpoint_path=out / "bcd.ckpt")
    summary["bcd_loss"] = dataset_loss(model, data, "bcd")
    summary["bcd_seconds"] = time.perf_counter() - t0
    print(f"bcd: {model.stage_history[-1]['steps']} steps, dataset loss {summary['bcd_loss']:.4f}")

    t0 = time.perf_counter()
    run_stage(cfg.scd, model, data, log_path=out / "train_log.jsonl", checkpoint_path=out / "scd.ckpt")
    summary["scd_loss"] = dataset_loss(model, data, "scd")
    summary["changed_pixel_accuracy"] = changed_pixel_accuracy(model, data)
    summary["scd_seconds"] = time.perf_counter() - t0
    print(f"scd: {model.stage_history[-1]['steps']} steps, dataset loss {summary['scd_loss']:.4f}, "
          f"changed-pixel accuracy {100 * summary['changed_pixel_accuracy']:.2f}%")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
