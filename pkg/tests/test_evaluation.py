import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doublerank import evaluation as ev
from doublerank import mdp
from doublerank.dataset import Query


def _query(labels, qid="q"):
    labels = np.asarray(labels, dtype=np.int64)
    return Query(qid, np.zeros((len(labels), 1)), labels)


def test_worked_example_p_ndcg():
    order = mdp.DisplayOrder((2, 1))
    gf = mdp.GainFunction()
    achieved = mdp.serp_reward([3, 2], [1, 2], order, gf)
    ideal = ev.ideal_serp_reward([3, 1, 0, 2], order, gf)
    assert achieved == pytest.approx(4 / math.log2(3) + 2, abs=1e-12)
    assert ideal == pytest.approx(4 + 2 / math.log2(3), abs=1e-12)
    assert ev.p_ndcg(achieved, ideal) == pytest.approx(0.859719, abs=1e-6)


def test_p_ndcg_rejects_zero_ideal():
    with pytest.raises(ValueError):
        ev.p_ndcg(0.0, 0.0)


def test_brute_force_limits():
    with pytest.raises(ValueError):
        ev.brute_force_ideal([0] * 9, mdp.DisplayOrder((1, 2)), mdp.GainFunction())


@settings(max_examples=80, deadline=None)
@given(data=st.data(), k=st.integers(1, 4), variant=st.sampled_from([mdp.PAPER_LITERAL, mdp.STANDARD_DCG]))
def test_ideal_matches_enumeration(data, k, variant):
    n = data.draw(st.integers(k, 7))
    labels = data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))
    order = mdp.DisplayOrder(tuple(data.draw(st.permutations(list(range(1, k + 1))))))
    gf = mdp.GainFunction(variant)
    assert ev.ideal_serp_reward(labels, order, gf) == pytest.approx(
        ev.brute_force_ideal(labels, order, gf), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(data=st.data(), k=st.integers(1, 6))
def test_first_bias_equals_ndcg(data, k):
    n = data.draw(st.integers(k, 10))
    labels = data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))
    chosen = data.draw(st.permutations(list(range(n))))[:k]
    order = mdp.DisplayOrder(tuple(range(1, k + 1)))
    gf = mdp.GainFunction(mdp.STANDARD_DCG)
    ranked = [labels[d] for d in chosen]
    ideal = ev.ideal_serp_reward(labels, order, gf)
    if ideal == 0:
        return
    p = ev.p_ndcg(mdp.serp_reward(ranked, list(range(1, k + 1)), order, gf), ideal)
    assert p == pytest.approx(ev.ndcg_at_k(ranked, labels, gf, k), abs=1e-12)


def test_oracle_policy_is_ideal():
    env = mdp.RankingEnv(mdp.builtin_display_orders(5)["center"])
    rng = np.random.default_rng(0)
    queries = [_query(rng.integers(0, 5, size=9), f"q{i}") for i in range(20)]
    report = ev.evaluate_policy(ev.oracle_policy, queries, env)
    assert report.mean_p_ndcg == pytest.approx(1.0, abs=1e-12)
    # most relevant labels land on the most preferred positions
    pos = report.per_position_mean_label
    ranked = [pos[p - 1] for p in env.order.positions_by_preference()]
    assert ranked == sorted(ranked, reverse=True)
    assert report.per_timestep_mean_label == sorted(report.per_timestep_mean_label, reverse=True)


def test_evaluate_policy_histograms_and_exclusion():
    env = mdp.RankingEnv(mdp.DisplayOrder((1, 2)), mdp.GainFunction(mdp.STANDARD_DCG))
    queries = [_query([0, 2, 1], "a"), _query([0, 0, 0], "b")]

    def worst(q, e):
        return e.episode(q, [0, 2], [2, 1], mdp.DRM)

    report = ev.evaluate_policy(worst, queries, env)
    assert report.excluded == 1
    assert report.query_count == 2
    assert len(report.per_query) == 1
    # query a: doc 0 (label 0) at position 2, doc 2 (label 1) at position 1
    assert report.per_position_mean_label == [0.5, 0.0]
    assert report.per_timestep_mean_label == [0.0, 0.5]
    ideal = 3 + 1 / math.log2(3)
    assert report.mean_p_ndcg == pytest.approx(1 / ideal)


def test_report_round_trip(tmp_path):
    rep = ev.EvalReport(0.5, [0.5], [1.0, 2.0], [2.0, 1.0], 1, 0, {"agent": "drm"})
    rep.to_json(tmp_path / "r.json")
    assert ev.EvalReport.from_json(tmp_path / "r.json") == rep
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "series,position_or_step,mean_label,count"
    assert lines[1] == "per_position,1,1.0,1"
    assert len(lines) == 5


def test_welch_against_scipy():
    from scipy import stats

    a, b = [0.9, 0.92, 0.95, 0.91], [0.8, 0.85, 0.83]
    t, p = ev.welch_one_tailed_t_test(a, b)
    ref = stats.ttest_ind(a, b, equal_var=False, alternative="greater")
    assert t == pytest.approx(ref.statistic)
    assert p == pytest.approx(ref.pvalue)


def test_welch_zero_variance():
    assert ev.welch_one_tailed_t_test([1, 1], [0, 0]) == (math.inf, 0.0)
    assert ev.welch_one_tailed_t_test([1, 1], [1, 1]) == (0.0, 0.5)
    with pytest.raises(ValueError):
        ev.welch_one_tailed_t_test([1], [1, 2])


def test_summarize():
    s = ev.summarize([1.0, 2.0, 3.0])
    assert s["n_runs"] == 3 and s["mean"] == 2.0
    assert s["std"] == pytest.approx(1.0)
    assert s["stderr"] == pytest.approx(1 / math.sqrt(3))
    assert math.isnan(ev.summarize([1.0])["std"])


class _ScaledGain(mdp.GainFunction):
    def __call__(self, rel):
        return 3.7 * super().__call__(rel)


@settings(max_examples=50, deadline=None)
@given(data=st.data(), k=st.integers(1, 6), variant=st.sampled_from([mdp.PAPER_LITERAL, mdp.STANDARD_DCG]))
def test_p_ndcg_bounded_and_scale_invariant(data, k, variant):
    n = data.draw(st.integers(k, 9))
    labels = data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n))
    order = mdp.DisplayOrder(tuple(data.draw(st.permutations(list(range(1, k + 1))))))
    docs = data.draw(st.permutations(list(range(n))))[:k]
    positions = data.draw(st.permutations(list(range(1, k + 1))))
    chosen = [labels[d] for d in docs]
    values = []
    for gf in (mdp.GainFunction(variant), _ScaledGain(variant)):
        ideal = ev.ideal_serp_reward(labels, order, gf)
        if ideal <= 0:
            return
        values.append(ev.p_ndcg(mdp.serp_reward(chosen, positions, order, gf), ideal))
    assert -1e-12 <= values[0] <= 1 + 1e-12
    assert values[0] == pytest.approx(values[1], rel=1e-12)
