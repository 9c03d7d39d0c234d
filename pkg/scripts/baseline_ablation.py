"""Compare SCD training with and without the prompter's cost volume.

Both runs start from the same BCD checkpoint and use the same seed, so the
only difference is whether the SCD decoder sees text-image similarities or
an all-zero cost volume.

    python3 scripts/baseline_ablation.py --data data/toy --out runs/ablation
"""

import argparse
import json
from pathlib import Path

import torch

from semantic_cd.config import load_run_config
from semantic_cd.data import SyntheticSpec, generate_synthetic_dataset, load_second_directory
from semantic_cd.model import build_model
from semantic_cd.training import changed_pixel_accuracy, dataset_loss, run_stage


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data", default="data/toy")
    parser.add_argument("--out", default="runs/ablation")
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

    bcd = run_stage(cfg.bcd, build_model(cfg.model), data)
    results = {}
    for name, use_prompter in (("prompter", True), ("baseline", False)):
        bcd.config.use_prompter = use_prompter
        model = bcd.build()
        run_stage(cfg.scd, model, data, log_path=out / f"{name}_log.jsonl")
        results[name] = {
            "scd_loss": dataset_loss(model, data, "scd"),
            "changed_pixel_accuracy": changed_pixel_accuracy(model, data),
        }
        print(f"{name:9s} loss {results[name]['scd_loss']:.4f}  accuracy {100 * results[name]['changed_pixel_accuracy']:.2f}%")
    (out / "ablation.json").write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
