"""Experiment configs, single runs, sweeps and plot-data export."""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import neural as nn
from .agents import AgentDims, make_agent
from .dataset import Dataset, SyntheticConfig, load_letor_dataset, synthesize_dataset
from .evaluation import EvalReport, evaluate_policy, summarize, welch_one_tailed_t_test
from .mdp import DisplayOrder, GainFunction, RankingEnv, builtin_display_orders, name_order
from .trainer import TrainerConfig, train_loop

log = logging.getLogger(__name__)

RUN_FILES = ("train_log.csv", "checkpoint.npz", "report.json", "manifest.json")


class ConfigError(ValueError):
    pass


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}; allowed: {sorted(known)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


@dataclass
class ExperimentConfig:
    """One JSON document describing a run; CLI flags override fields one to one."""

    dataset: dict = field(default_factory=lambda: {"synthetic": {}})
    agent: str = "drm"
    reward_level: str = "document"
    display_order: Any = "first"
    gain: str = "paper_literal"
    k: int = 10
    gru_candidate_input: str = nn.CANDIDATE_PRINTED
    dims: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs/default"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if "config" in data and "agent_manifest" in data:  # a run manifest
            data = data["config"]
        data = {k: v for k, v in data.items() if k != "matrix"}
        cfg = _build(cls, copy.deepcopy(data), "config")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.agent not in ("gru", "drm"):
            raise ConfigError(f"agent: expected 'gru' or 'drm', got {self.agent!r}")
        if self.reward_level not in ("document", "serp"):
            raise ConfigError(f"reward_level: expected 'document' or 'serp', got {self.reward_level!r}")
        if self.gru_candidate_input not in nn.CANDIDATE_MODES:
            raise ConfigError(f"gru_candidate_input: expected one of {nn.CANDIDATE_MODES}")
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigError("k: must be a positive integer")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds: must be a non-empty list of distinct integers")
        try:
            GainFunction(self.gain)
        except ValueError as e:
            raise ConfigError(f"gain: {e}") from None
        order = self.resolve_order()
        if order.k != self.k:
            raise ConfigError(f"display_order: length {order.k} does not match k={self.k}")
        self.trainer_config(self.seeds[0]).validate()
        _build(AgentDims, self.dims, "dims")
        self._check_dataset()

    def _check_dataset(self) -> None:
        ds = self.dataset
        if set(ds) == {"synthetic"}:
            syn = self.synthetic_config()
            if syn.k != self.k:
                raise ConfigError(f"dataset.synthetic.k={syn.k} does not match k={self.k}")
            try:
                syn.validate()
            except ValueError as e:
                raise ConfigError(f"dataset.synthetic: {e}") from None
        elif set(ds) == {"letor"}:
            spec = ds["letor"]
            for key in ("train", "test", "feature_count"):
                if key not in spec:
                    raise ConfigError(f"dataset.letor.{key}: required")
            for key in ("train", "valid", "test"):
                if spec.get(key) is not None and not Path(spec[key]).is_file():
                    raise ConfigError(f"dataset.letor.{key}: file not found: {spec[key]}")
        else:
            raise ConfigError("dataset: expected exactly one of {'synthetic': {...}} or {'letor': {...}}")

    def synthetic_config(self) -> SyntheticConfig:
        data = {"k": self.k, **self.dataset["synthetic"]}
        return _build(SyntheticConfig, data, "dataset.synthetic")

    def resolve_order(self) -> DisplayOrder:
        spec = self.display_order
        try:
            if isinstance(spec, dict):
                return DisplayOrder(tuple(spec["pref_index"]), spec.get("name", "custom"))
            if isinstance(spec, list):
                return name_order(DisplayOrder(tuple(spec)))
            if isinstance(spec, str) and spec.endswith(".json"):
                if not Path(spec).is_file():
                    raise ConfigError(f"display_order: file not found: {spec}")
                return DisplayOrder.from_json(spec)
            if isinstance(spec, str):
                builtins = builtin_display_orders(self.k)
                if spec not in builtins:
                    raise ConfigError(f"display_order: unknown name {spec!r}; use first/center/last or a permutation")
                return builtins[spec]
        except (KeyError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"display_order: {e}") from None
        raise ConfigError(f"display_order: unsupported value {spec!r}")

    def trainer_config(self, seed: int) -> TrainerConfig:
        cfg = _build(TrainerConfig, {**self.trainer, "seed": seed}, "trainer")
        return cfg

    def load_dataset(self) -> Dataset:
        if "synthetic" in self.dataset:
            return synthesize_dataset(self.synthetic_config())
        spec = dict(self.dataset["letor"])
        return load_letor_dataset(
            spec.pop("train"),
            spec.pop("test"),
            spec.pop("feature_count"),
            self.k,
            valid_path=spec.pop("valid", None),
            **spec,
        )

    def env(self, max_label: int) -> RankingEnv:
        return RankingEnv(self.resolve_order(), GainFunction(self.gain, max_label), self.reward_level)

    def make_agent(self, feature_count: int):
        return make_agent(self.agent, feature_count, self.k, AgentDims(**self.dims), self.gru_candidate_input)


def order_label(order: DisplayOrder) -> str:
    return order.name


def run(config: ExperimentConfig, seed: int, out_dir, dataset: Dataset | None = None) -> dict:
    """Train, pick the best validation checkpoint and evaluate it on test.

    Writes ``train_log.csv``, ``checkpoint.npz``, ``report.json`` (+ ``report.csv``)
    and ``manifest.json`` into ``out_dir``. The manifest's ``config`` field
    reproduces the run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {**config.to_dict(), "seeds": [seed], "out": str(out)}
    manifest = {"config": resolved, "code_version": __version__, "status": "partial", "seed": seed}
    try:
        data = dataset if dataset is not None else config.load_dataset()
        env = config.env(data.max_label)
        agent = config.make_agent(data.feature_count)
        manifest["agent_manifest"] = agent.manifest()
        result = train_loop(data, env, agent, config.trainer_config(seed), log_path=out / "train_log.csv")
        meta = {**agent.manifest(), "best_step": result.best_step}
        nn.save_params(out / "checkpoint.npz", result.best_params, meta)
        report = evaluate_policy(agent.greedy_policy(result.best_params), data.test, env)
        report.meta = {
            "agent": config.agent,
            "display_order": order_label(env.order),
            "pref_index": list(env.order.pref_index),
            "reward_level": config.reward_level,
            "gain": config.gain,
            "seed": seed,
            "partition": "test",
        }
        report.to_json(out / "report.json")
        report.to_csv(out / "report.csv")
        manifest.update(
            status="complete",
            best_step=result.best_step,
            best_validation_p_ndcg=result.best_score,
            test_p_ndcg=report.mean_p_ndcg,
            transfers=len(result.transfers),
        )
        return manifest
    finally:
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_checkpoint(config: ExperimentConfig, checkpoint, partition: str = "test") -> EvalReport:
    data = config.load_dataset()
    agent = config.make_agent(data.feature_count)
    try:
        params, meta = nn.load_params(checkpoint, agent.shapes())
    except nn.ShapeError as e:
        raise ConfigError(f"checkpoint does not fit the configured {config.agent} agent: {e}") from None
    for key in ("agent", "k", "feature_count", "gru_candidate_input"):
        if key in meta and meta[key] != agent.manifest()[key]:
            raise ConfigError(f"checkpoint {key}={meta[key]!r} does not match config ({agent.manifest()[key]!r})")
    env = config.env(data.max_label)
    report = evaluate_policy(agent.greedy_policy(params), data.partition(partition), env)
    report.meta = {"agent": config.agent, "display_order": order_label(env.order),
                   "pref_index": list(env.order.pref_index), "reward_level": config.reward_level,
                   "gain": config.gain, "partition": partition}
    return report


MATRIX_KEYS = ("dataset", "agent", "display_order", "reward_level", "learning_rate")
CELL_KEYS = ("dataset", "reward_level", "display_order", "agent")


def expand_matrix(base: dict) -> list[tuple[dict, ExperimentConfig]]:
    """Cartesian product of ``base["matrix"]`` over its axes.

    ``dataset`` maps a display name to a dataset spec, e.g.
    ``{"mslr": {"letor": {...}}, "toy": {"synthetic": {}}}``. ``agent``,
    ``display_order``, ``reward_level`` and ``learning_rate`` are lists; the
    learning rate lands in the trainer section.
    """
    matrix = base.get("matrix", {})
    unknown = set(matrix) - set(MATRIX_KEYS)
    if unknown:
        raise ConfigError(f"matrix: unknown axes {sorted(unknown)}; allowed {MATRIX_KEYS}")
    datasets = matrix.get("dataset")
    if datasets is None:
        spec = base.get("dataset", {"synthetic": {}})
        datasets = {next(iter(spec), "dataset"): spec}
    if not isinstance(datasets, dict) or not datasets:
        raise ConfigError("matrix.dataset: expected a non-empty mapping of name -> dataset spec")
    trainer = base.get("trainer", {})
    defaults = {key: [base.get(key, getattr(ExperimentConfig, key, None))] for key in MATRIX_KEYS[1:4]}
    defaults["learning_rate"] = [trainer.get("learning_rate", TrainerConfig.learning_rate)]
    axes = [list(datasets)] + [matrix.get(key, defaults[key]) for key in MATRIX_KEYS[1:]]
    for key, values in zip(MATRIX_KEYS, axes):
        if not isinstance(values, list) or not values:
            raise ConfigError(f"matrix.{key}: expected a non-empty list")
    plain = {k: v for k, v in base.items() if k != "matrix"}
    cells = []
    for combo in itertools.product(*axes):
        cell = dict(zip(MATRIX_KEYS, combo))
        cfg = ExperimentConfig.from_dict({
            **plain,
            **{k: cell[k] for k in MATRIX_KEYS[1:4]},
            "dataset": datasets[cell["dataset"]],
            "trainer": {**trainer, "learning_rate": cell["learning_rate"]},
        })
        cells.append((cell, cfg))
    return cells


def _run_one(args):
    cfg_dict, seed, out_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        m = run(cfg, seed, out_dir)
        return {"status": m["status"], "validation_p_ndcg": m.get("best_validation_p_ndcg"),
                "test_p_ndcg": m.get("test_p_ndcg"), "error": ""}
    except Exception as e:  # a failed run is recorded and the sweep goes on
        log.exception("run %s failed", out_dir)
        return {"status": "failed", "validation_p_ndcg": None, "test_p_ndcg": None,
                "error": f"{type(e).__name__}: {e}"}


def sweep(base: dict, out_dir, jobs: int = 1) -> tuple[list[dict], list[dict]]:
    """Runs every (cell, seed); writes ``runs.csv`` and a per-cell ``summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = expand_matrix(base)
    several_lr = len({c["learning_rate"] for c, _ in cells}) > 1
    tasks, meta = [], []
    for cell, cfg in cells:
        label = cfg.resolve_order().name
        name = f"{cell['dataset']}-{cfg.agent}-{label}-{cfg.reward_level}"
        if several_lr:
            name += f"-lr{cell['learning_rate']:g}"
        for seed in cfg.seeds:
            run_dir = out / f"{name}-seed{seed}"
            tasks.append((cfg.to_dict(), seed, str(run_dir)))
            meta.append({"dataset": cell["dataset"], "agent": cfg.agent, "display_order": label,
                         "reward_level": cfg.reward_level, "learning_rate": cell["learning_rate"],
                         "seed": seed, "out_dir": str(run_dir)})
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            outcomes = list(pool.map(_run_one, tasks))
    else:
        outcomes = [_run_one(t) for t in tasks]
    runs = [{**m, **o} for m, o in zip(meta, outcomes)]
    _write_csv(out / "runs.csv", runs, [*CELL_KEYS, "learning_rate", "seed", "status", "validation_p_ndcg",
                                        "test_p_ndcg", "out_dir", "error"])
    summary = summarize_runs(runs)
    agents = sorted({r["agent"] for r in runs})
    cols = [*CELL_KEYS, "learning_rate", "n_runs", "mean", "std", "stderr"]
    cols += [f"{s}_vs_{a}" for a in agents for s in ("t", "p")]
    _write_csv(out / "summary.csv", summary, cols)
    return runs, summary


def summarize_runs(runs: Sequence[dict]) -> list[dict]:
    """Per-cell mean/std/stderr of test P-NDCG read from each run's report, plus one-tailed Welch tests.

    When a cell was run at several learning rates, the one with the highest mean
    validation P-NDCG is kept and reported.
    """
    by_lr: dict[tuple, dict] = {}
    for r in runs:
        if r["status"] != "complete":
            continue
        report = EvalReport.from_json(Path(r["out_dir"]) / "report.json")
        entry = by_lr.setdefault(tuple(r[k] for k in CELL_KEYS), {}).setdefault(r["learning_rate"], ([], []))
        entry[0].append(report.mean_p_ndcg)
        entry[1].append(r["validation_p_ndcg"])
    scores, chosen = {}, {}
    for key, options in by_lr.items():
        lr = max(options, key=lambda a: (float(np.mean(options[a][1])), -a))
        scores[key], chosen[key] = options[lr][0], lr
    rows = []
    for key, vals in sorted(scores.items()):
        row = {**dict(zip(CELL_KEYS, key)), "learning_rate": chosen[key], **summarize(vals)}
        for other_key, other_vals in sorted(scores.items()):
            if other_key[:-1] != key[:-1] or other_key == key:
                continue
            if len(vals) >= 2 and len(other_vals) >= 2:
                t, p = welch_one_tailed_t_test(vals, other_vals)
                row[f"t_vs_{other_key[-1]}"], row[f"p_vs_{other_key[-1]}"] = t, p
        rows.append(row)
    return rows


def _write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in columns])


def emit_plot_data(report_paths: Sequence, out_path) -> list[dict]:
    """Long-format rows ``agent, bias, reward_level, seed, series, index, mean_label`` for plotting."""
    rows = []
    for path in report_paths:
        if not Path(path).is_file():
            raise FileNotFoundError(f"report not found: {path}")
        rep = EvalReport.from_json(path)
        meta = rep.meta
        cell = {"agent": meta.get("agent", ""), "bias": meta.get("display_order", Path(path).parent.name),
                "reward_level": meta.get("reward_level", ""), "seed": meta.get("seed", "")}
        for series, values in (("per_position", rep.per_position_mean_label),
                               ("per_timestep", rep.per_timestep_mean_label)):
            rows += [{**cell, "series": series, "index": i + 1, "mean_label": v} for i, v in enumerate(values)]
    _write_csv(out_path, rows, ["agent", "bias", "reward_level", "seed", "series", "index", "mean_label"])
    return rows
