import csv
import json

import numpy as np
import pytest

from doublerank import cli
from doublerank.evaluation import EvalReport, welch_one_tailed_t_test
from doublerank.experiment import ConfigError, ExperimentConfig, expand_matrix


def _config(tmp_path, **overrides):
    cfg = {
        "dataset": {"synthetic": {"num_train": 8, "num_valid": 3, "num_test": 3, "docs_per_query": 6,
                                  "feature_count": 6}},
        "agent": "drm",
        "display_order": "last",
        "k": 3,
        "gru_candidate_input": "input",
        "dims": {"embed": 4, "hidden": 6, "head": 4},
        "trainer": {"learning_rate": 0.01, "replay_capacity": 50, "transfer_every": 5, "batch_episodes": 4,
                    "max_steps": 20, "epsilon_decay_steps": 10, "eval_every": 10, "eval_queries": 3},
        "out": str(tmp_path / "run"),
    }
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_writes_artifacts_and_evaluate_reproduces(tmp_path, capsys):
    path = _config(tmp_path)
    assert cli.main(["train", "--config", str(path)]) == 0
    run = tmp_path / "run"
    for name in ("train_log.csv", "checkpoint.npz", "report.json", "report.csv", "manifest.json"):
        assert (run / name).is_file()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert manifest["agent_manifest"]["gru_candidate_input"] == "input"
    assert cli.main(["evaluate", "--config", str(run / "manifest.json"), "--checkpoint",
                     str(run / "checkpoint.npz"), "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "report.csv").read_bytes() == (run / "report.csv").read_bytes()


def test_manifest_config_reruns_identically(tmp_path):
    path = _config(tmp_path, agent="gru")
    assert cli.main(["train", "--config", str(path)]) == 0
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(run / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
    for name in ("train_log.csv", "report.csv"):
        assert (run / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_flags_override_config(tmp_path):
    path = _config(tmp_path)
    out = tmp_path / "flagged"
    assert cli.main(["train", "--config", str(path), "--agent", "gru", "--display-order", "center",
                     "--reward-level", "serp", "--gain", "standard_dcg", "--seed", "3", "--out", str(out)]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert (cfg["agent"], cfg["display_order"], cfg["reward_level"], cfg["gain"], cfg["seeds"]) == \
        ("gru", "center", "serp", "standard_dcg", [3])


@pytest.mark.parametrize("override,fragment", [
    ({"agent": "dqn"}, "agent"),
    ({"display_order": "sideways"}, "display_order"),
    ({"display_order": [1, 2]}, "display_order"),
    ({"display_order": [1, 1, 2]}, "display_order"),
    ({"reward_level": "page"}, "reward_level"),
    ({"gain": "cubic"}, "gain"),
    ({"dims": {"width": 3}}, "dims"),
    ({"trainer": {"lr": 0.1}}, "trainer"),
    ({"dataset": {"letor": {"train": "missing.txt", "test": "missing.txt", "feature_count": 3}}}, "letor"),
    ({"colour": "blue"}, "unknown"),
])
def test_config_errors_exit_2(tmp_path, capsys, override, fragment):
    path = _config(tmp_path, **override)
    assert cli.main(["train", "--config", str(path)]) == 2
    assert fragment in capsys.readouterr().err
    assert not (tmp_path / "run" / "checkpoint.npz").exists()


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "nope.json")]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_display_order_from_file(tmp_path):
    (tmp_path / "order.json").write_text("[2, 3, 1]")
    cfg = ExperimentConfig.from_dict({"display_order": str(tmp_path / "order.json"), "k": 3,
                                      "dataset": {"synthetic": {"docs_per_query": 6}}})
    assert cfg.resolve_order().pref_index == (2, 3, 1)


def test_expand_matrix_defaults():
    cells = expand_matrix({"k": 3, "matrix": {"agent": ["gru", "drm"], "display_order": ["first", "last"]}})
    assert [tuple(c.values()) for c, _ in cells] == [
        ("synthetic", "gru", "first", "document", 1e-3), ("synthetic", "gru", "last", "document", 1e-3),
        ("synthetic", "drm", "first", "document", 1e-3), ("synthetic", "drm", "last", "document", 1e-3)]
    named = expand_matrix({"k": 3, "matrix": {"dataset": {"a": {"synthetic": {"seed": 1}},
                                                           "b": {"synthetic": {"seed": 2}}}}})
    assert [c["dataset"] for c, _ in named] == ["a", "b"]
    assert named[1][1].dataset == {"synthetic": {"seed": 2}}
    with pytest.raises(ConfigError):
        expand_matrix({"k": 3, "matrix": {"seed": [1]}})


def test_sweep_summary_and_plot_data(tmp_path, capsys):
    path = _config(tmp_path, seeds=[0, 1], out=str(tmp_path / "sweep"),
                   matrix={"agent": ["gru", "drm"], "display_order": ["first", "last"]})
    assert cli.main(["sweep", "--config", str(path)]) == 0
    summary = list(csv.DictReader(open(tmp_path / "sweep" / "summary.csv")))
    assert len(summary) == 4
    assert {r["n_runs"] for r in summary} == {"2"}
    drm_rows = [r for r in summary if r["agent"] == "drm"]
    assert all(r["t_vs_gru"] and r["p_vs_gru"] for r in drm_rows)
    runs = list(csv.DictReader(open(tmp_path / "sweep" / "runs.csv")))
    assert len(runs) == 8 and {r["status"] for r in runs} == {"complete"}

    def scores(agent, order):
        return [EvalReport.from_json(f"{r['out_dir']}/report.json").mean_p_ndcg
                for r in runs if (r["agent"], r["display_order"]) == (agent, order)]

    for row in summary:
        assert float(row["mean"]) == pytest.approx(np.mean(scores(row["agent"], row["display_order"])), abs=1e-15)
    for row in drm_rows:
        t, p = welch_one_tailed_t_test(scores("drm", row["display_order"]), scores("gru", row["display_order"]))
        assert (float(row["t_vs_gru"]), float(row["p_vs_gru"])) == (t, p)

    reports = [str(tmp_path / "sweep" / f"synthetic-drm-{o}-document-seed0" / "report.json")
               for o in ("first", "last")]
    out = tmp_path / "plot.csv"
    assert cli.main(["plot-data", *reports, "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 2 * 2 * 3
    assert {r["bias"] for r in rows} == {"first", "last"}
    assert {r["agent"] for r in rows} == {"drm"}
    for path in reports:
        rep = EvalReport.from_json(path)
        bias = rep.meta["display_order"]
        for series, values in (("per_position", rep.per_position_mean_label),
                               ("per_timestep", rep.per_timestep_mean_label)):
            got = [r for r in rows if (r["bias"], r["series"]) == (bias, series)]
            assert [int(r["index"]) for r in got] == [1, 2, 3]
            assert [float(r["mean_label"]) for r in got] == values
    assert cli.main(["plot-data", str(tmp_path / "missing.json"), "--out", str(out)]) == 2
    assert "report not found" in capsys.readouterr().err


def test_sweep_records_failed_runs(tmp_path, monkeypatch, capsys):
    from doublerank import experiment

    real = experiment.run

    def flaky(config, seed, out_dir, dataset=None):
        if config.agent == "gru":
            raise FloatingPointError("diverged")
        return real(config, seed, out_dir, dataset)

    monkeypatch.setattr(experiment, "run", flaky)
    path = _config(tmp_path, out=str(tmp_path / "sweep"), matrix={"agent": ["gru", "drm"]})
    assert cli.main(["sweep", "--config", str(path)]) == 1
    runs = list(csv.DictReader(open(tmp_path / "sweep" / "runs.csv")))
    assert {r["agent"]: r["status"] for r in runs} == {"gru": "failed", "drm": "complete"}
    assert "diverged" in capsys.readouterr().err


def test_synth_writes_letor(tmp_path):
    path = _config(tmp_path, out=str(tmp_path / "letor"))
    assert cli.main(["synth", "--config", str(path)]) == 0
    assert (tmp_path / "letor" / "train.txt").read_text().count("\n") == 8 * 6
    cfg = _config(tmp_path, dataset={"letor": {"train": str(tmp_path / "letor" / "train.txt"),
                                               "valid": str(tmp_path / "letor" / "vali.txt"),
                                               "test": str(tmp_path / "letor" / "test.txt"),
                                               "feature_count": 6}},
                  out=str(tmp_path / "from_letor"))
    assert cli.main(["train", "--config", str(cfg)]) == 0


def test_evaluate_rejects_foreign_checkpoint(tmp_path, capsys):
    path = _config(tmp_path)
    assert cli.main(["train", "--config", str(path)]) == 0
    ckpt = tmp_path / "run" / "checkpoint.npz"
    assert cli.main(["evaluate", "--config", str(path), "--agent", "gru", "--checkpoint", str(ckpt),
                     "--out", str(tmp_path / "ev")]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_learning_rate_grid_picks_best_validation(tmp_path):
    path = _config(tmp_path, seeds=[0, 1], out=str(tmp_path / "lr"),
                   matrix={"agent": ["drm"], "learning_rate": [0.0, 0.05]})
    assert cli.main(["sweep", "--config", str(path)]) == 0
    runs = list(csv.DictReader(open(tmp_path / "lr" / "runs.csv")))
    assert sorted({r["learning_rate"] for r in runs}) == ["0.0", "0.05"]
    (row,) = list(csv.DictReader(open(tmp_path / "lr" / "summary.csv")))
    mean_valid = {lr: np.mean([float(r["validation_p_ndcg"]) for r in runs if r["learning_rate"] == lr])
                  for lr in ("0.0", "0.05")}
    assert row["learning_rate"] == max(mean_valid, key=mean_valid.get)
    manifest = json.loads((tmp_path / "lr" / "synthetic-drm-last-document-lr0.05-seed1" / "manifest.json").read_text())
    assert manifest["config"]["trainer"]["learning_rate"] == 0.05
