"""Run the desk-scale experiments on the synthetic 4-class set and save a summary.

Trains every ablation variant with 5-fold cross-validation (paired seeds),
then measures the entropy on white noise and the attention periodicity on
click trains.  Set MSESC_WORKERS to train folds in parallel.

    python3 scripts/run_acceptance_experiments.py --config configs/desk.ini --out runs/desk
"""

import argparse
import json
import math
import time
from pathlib import Path

import numpy as np

from msesc import experiments as ex
from msesc.config import load_run_config
from msesc.harness import ABLATIONS, AblationTable


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, default=Path("configs/desk.ini"))
    parser.add_argument("--out", type=Path, default=Path("runs/desk"))
    parser.add_argument("--variants", nargs="*", default=list(ABLATIONS))
    args = parser.parse_args()

    cfg = load_run_config(args.config)
    clips, folds, classes = ex.acceptance_dataset(seed=cfg.seed)
    start = time.perf_counter()
    runs = ex.run_ablations(clips, folds, classes, cfg, args.variants)
    elapsed = time.perf_counter() - start

    table = AblationTable({name: runs.reports[name] for name in args.variants})
    print(table.to_markdown())
    summary = {"config": str(args.config), "epochs": cfg.epochs, "seconds": round(elapsed, 1),
               "accuracy": {name: runs.mean(name) for name in args.variants}}

    noise = ex.noise_clips(50)
    for name in ("Complete Model", "Without uncertainty"):
        if name in runs.results:
            h = np.concatenate([ex.noise_entropies(r.model, noise) for r in runs.results[name]])
            summary.setdefault("noise_entropy", {})[name] = round(float(h.mean()), 4)
    summary["entropy_threshold"] = round(0.9 * math.log(cfg.model.num_classes), 4)
    if "Complete Model" in runs.results:
        click = ex.click_clips(20, period_s=0.5)
        rates = [ex.attention_periodicity(r.model, click)[0] for r in runs.results["Complete Model"]]
        summary["attention_periodicity"] = rates

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.md").write_text(table.to_markdown())
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
