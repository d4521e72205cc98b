"""Full-scale grid on user-supplied LETOR datasets (stretch; needs the files and a lot of compute).

Each dataset directory must hold ``train.txt`` and ``test.txt`` in SVMLight
format, plus ``vali.txt`` when the dataset ships a validation partition
(otherwise a seeded fraction of train is held out). The grid is
dataset x reward level x display order x agent x learning rate with k=10, the
default network sizes and the default trainer settings (200,000 steps max, five
seeds). The summary keeps, per cell, the learning rate with the best mean
validation P-NDCG.

    python3 scripts/letor_table.py --dataset mslr:136:/data/MSLR-WEB30K/Fold1 \\
        --dataset istella:220:/data/istella --out runs/letor --jobs 4

Pass ``--dry-run`` to validate the configs and print the grid without training.
"""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from doublerank.experiment import emit_plot_data, expand_matrix, sweep


def dataset_spec(arg: str, valid_fraction: float) -> tuple[str, dict]:
    try:
        name, features, folder = arg.split(":", 2)
        features = int(features)
    except ValueError:
        raise SystemExit(f"--dataset expects name:feature_count:directory, got {arg!r}") from None
    folder = Path(folder)
    spec = {"train": str(folder / "train.txt"), "test": str(folder / "test.txt"), "feature_count": features}
    if (folder / "vali.txt").is_file():
        spec["valid"] = str(folder / "vali.txt")
    else:
        spec["valid_fraction"] = valid_fraction
    return name, {"letor": spec}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--dataset", action="append", required=True, help="name:feature_count:directory")
    p.add_argument("--valid-fraction", type=float, default=0.3,
                   help="held-out share of train when no vali.txt exists")
    p.add_argument("--gru-candidate-input", default="printed", choices=["printed", "input"])
    p.add_argument("--learning-rates", type=float, nargs="+", default=[1e-2, 1e-3, 1e-4, 1e-5])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--max-steps", type=int, default=200_000)
    p.add_argument("--out", default="runs/letor")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--dry-run", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    datasets = dict(dataset_spec(a, args.valid_fraction) for a in args.dataset)
    base = {
        "k": 10,
        "gain": "paper_literal",
        "gru_candidate_input": args.gru_candidate_input,
        "seeds": args.seeds,
        "trainer": {"max_steps": args.max_steps},
        "matrix": {
            "dataset": datasets,
            "reward_level": ["document", "serp"],
            "display_order": ["first", "center", "last"],
            "agent": ["gru", "drm"],
            "learning_rate": args.learning_rates,
        },
    }
    cells = expand_matrix(base)
    print(f"{len(cells)} cells x {len(args.seeds)} seeds = {len(cells) * len(args.seeds)} runs")
    if args.dry_run:
        print(json.dumps(base, indent=2))
        return
    out = Path(args.out)
    runs, _ = sweep(base, out, jobs=args.jobs)
    print(f"summary: {out / 'summary.csv'}")
    done = [Path(r["out_dir"]) / "report.json" for r in runs if r["status"] == "complete"]
    if done:
        emit_plot_data(done, out / "plot_data.csv")


if __name__ == "__main__":
    main()
