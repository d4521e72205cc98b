"""Desk-scale grid on the synthetic set: both agents x three display orders x seeds.

Writes ``runs.csv``, ``summary.csv`` (mean, std, stderr and one-tailed Welch tests
per cell) and ``plot_data.csv`` (mean label per position and per step) under
``--out``. With ``--reward-levels document serp`` the SERP-level signal is added
as a second grid axis.

    python3 scripts/desk_experiments.py --out runs/desk
"""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from doublerank.experiment import emit_plot_data, sweep

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=str(ROOT / "configs" / "desk.json"))
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--reward-levels", nargs="+", default=["document"], choices=["document", "serp"])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")

    base = json.loads(Path(args.config).read_text())
    base["matrix"] = {**base.get("matrix", {}), "reward_level": args.reward_levels}
    if args.seeds:
        base["seeds"] = args.seeds
    if args.max_steps is not None:
        base["trainer"] = {**base["trainer"], "max_steps": args.max_steps}

    out = Path(args.out)
    runs, summary = sweep(base, out, jobs=args.jobs)
    print(f"{'reward':>8} {'order':>8} {'agent':>5} {'mean':>7} {'std':>7} {'p(drm>gru)':>11}")
    for row in summary:
        p_val = row.get("p_vs_gru")
        print(f"{row['reward_level']:>8} {row['display_order']:>8} {row['agent']:>5} {row['mean']:7.4f} "
              f"{row['std']:7.4f} {'' if p_val is None else f'{p_val:.3g}':>11}")

    reports = [Path(r["out_dir"]) / "report.json" for r in runs if r["status"] == "complete" and r["seed"] == runs[0]["seed"]]
    emit_plot_data(reports, out / "plot_data.csv")
    failed = [r for r in runs if r["status"] != "complete"]
    if failed:
        raise SystemExit(f"{len(failed)} run(s) failed; see {out / 'runs.csv'}")


if __name__ == "__main__":
    main()
