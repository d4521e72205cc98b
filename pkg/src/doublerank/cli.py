"""Command line: ``doublerank {train,evaluate,sweep,synth,plot-data}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import write_letor
from .experiment import ConfigError, ExperimentConfig, emit_plot_data, evaluate_checkpoint, run, sweep

log = logging.getLogger("doublerank")


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def _overrides(args) -> dict:
    out = {}
    for flag, key in (("agent", "agent"), ("display_order", "display_order"),
                      ("reward_level", "reward_level"), ("gain", "gain"), ("out", "out")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    if getattr(args, "seed", None) is not None:
        out["seeds"] = [args.seed]
    return out


def _config(args) -> dict:
    data = _read_json(args.config) if args.config else {}
    if "config" in data and "agent_manifest" in data:
        data = data["config"]
    data.update(_overrides(args))
    return data


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_dict(_config(args))
    ok = True
    for seed in cfg.seeds:
        out = Path(cfg.out) / f"seed_{seed}" if len(cfg.seeds) > 1 else Path(cfg.out)
        manifest = run(cfg, seed, out)
        ok &= manifest["status"] == "complete"
        print(f"seed {seed}: test P-NDCG {manifest.get('test_p_ndcg', float('nan')):.4f} -> {out}")
    return 0 if ok else 1


def cmd_evaluate(args) -> int:
    cfg = ExperimentConfig.from_dict(_config(args))
    report = evaluate_checkpoint(cfg, args.checkpoint, args.partition)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    print(f"{args.partition} P-NDCG {report.mean_p_ndcg:.4f} over {report.query_count} queries -> {out}")
    return 0


def cmd_sweep(args) -> int:
    base = _config(args)
    out = base.get("out", "runs/sweep")
    runs, summary = sweep(base, out, jobs=args.jobs)
    for row in summary:
        print(f"{row['dataset']:>10} {row['reward_level']:>8} {row['display_order']:>8} {row['agent']:>4}  "
              f"{row['mean']:.4f} (sd {row['std']:.4f}, n={row['n_runs']})")
    failed = [r for r in runs if r["status"] != "complete"]
    for r in failed:
        print(f"failed: {r['out_dir']}: {r['error']}", file=sys.stderr)
    return 0 if not failed else 1


def cmd_synth(args) -> int:
    cfg = ExperimentConfig.from_dict(_config(args))
    if "synthetic" not in cfg.dataset:
        raise ConfigError("synth: config dataset must be synthetic")
    data = cfg.load_dataset()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, fname in (("train", "train.txt"), ("valid", "vali.txt"), ("test", "test.txt")):
        write_letor(out / fname, data.partition(name))
    print(f"wrote {len(data.train)}/{len(data.valid)}/{len(data.test)} queries "
          f"with {data.feature_count} features to {out}")
    return 0


def cmd_plot_data(args) -> int:
    rows = emit_plot_data(args.reports, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doublerank", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    subs = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="JSON experiment config (or a run manifest)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--agent", choices=["gru", "drm"])
        sp.add_argument("--display-order", help="first|center|last, a .json permutation file")
        sp.add_argument("--reward-level", choices=["document", "serp"])
        sp.add_argument("--gain", choices=["paper_literal", "standard_dcg"])
        sp.add_argument("--out", help=out_help)

    sp = subs.add_parser("train", help="train, select on validation, evaluate on test")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = subs.add_parser("evaluate", help="evaluate a checkpoint greedily")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--partition", default="test", choices=["train", "valid", "test"])
    sp.set_defaults(func=cmd_evaluate)

    sp = subs.add_parser("sweep", help="run a dataset x agent x display-order x reward-level grid")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = subs.add_parser("synth", help="write a synthetic dataset as LETOR files")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = subs.add_parser("plot-data", help="tidy CSV of label-per-position series from reports")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
