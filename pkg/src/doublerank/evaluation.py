"""P-NDCG, the ideal-reward normalizer, label histograms and significance tests."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .mdp import DRM, DisplayOrder, Episode, GainFunction, RankingEnv, discount, serp_reward


def ideal_serp_reward(labels: Sequence[int], order: DisplayOrder, gf: GainFunction, k: int | None = None) -> float:
    """Largest gains on the most preferred positions (rearrangement optimum)."""
    k = order.k if k is None else k
    if k != order.k:
        raise ValueError(f"k={k} does not match display order of length {order.k}")
    if len(labels) < k:
        raise ValueError(f"{len(labels)} candidates for k={k}")
    gains = sorted((gf(int(l)) for l in labels), reverse=True)[:k]
    ranks = sorted(order.rank_of(p) for p in range(1, k + 1))
    return sum(g / discount(r) for g, r in zip(gains, ranks))


def brute_force_ideal(labels: Sequence[int], order: DisplayOrder, gf: GainFunction, k: int | None = None) -> float:
    """Exhaustive maximum over ordered k-subsets placed on positions 1..k."""
    k = order.k if k is None else k
    n = len(labels)
    if n > 8 or k > 4:
        raise ValueError(f"instance too large for enumeration (n={n}, k={k})")
    if n < k:
        raise ValueError(f"{n} candidates for k={k}")
    best = -math.inf
    for docs in itertools.permutations(range(n), k):
        total = 0.0
        for pos, d in enumerate(docs, 1):
            total += gf(int(labels[d])) / math.log2(order.pref_index[pos - 1] + 1)
        best = max(best, total)
    return best


def p_ndcg(achieved: float, ideal: float) -> float:
    if not ideal > 0:
        raise ValueError("ideal reward must be positive")
    return achieved / ideal


def ndcg_at_k(labels_in_rank_order: Sequence[int], all_labels: Sequence[int], gf: GainFunction, k: int) -> float:
    """Plain NDCG@k for a ranked list against the full candidate set."""
    dcg = sum(gf(int(l)) / math.log2(i + 2) for i, l in enumerate(labels_in_rank_order[:k]))
    ideal = sorted(all_labels, reverse=True)[:k]
    idcg = sum(gf(int(l)) / math.log2(i + 2) for i, l in enumerate(ideal))
    return dcg / idcg


@dataclass
class EvalReport:
    mean_p_ndcg: float
    per_query: list[float]
    per_position_mean_label: list[float]
    per_timestep_mean_label: list[float]
    query_count: int
    excluded: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def histogram_rows(self) -> list[dict]:
        n = self.query_count
        rows = [{"series": "per_position", "position_or_step": i + 1, "mean_label": v, "count": n}
                for i, v in enumerate(self.per_position_mean_label)]
        rows += [{"series": "per_timestep", "position_or_step": i + 1, "mean_label": v, "count": n}
                 for i, v in enumerate(self.per_timestep_mean_label)]
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, ["series", "position_or_step", "mean_label", "count"], lineterminator="\n")
            w.writeheader()
            for row in self.histogram_rows():
                w.writerow({**row, "mean_label": repr(float(row["mean_label"]))})


Policy = Callable[[object, RankingEnv], Episode]


def oracle_policy(query, env: RankingEnv) -> Episode:
    """Knows labels and the display order: best documents on most preferred positions."""
    gf = env.gain
    docs = sorted(range(query.n_candidates), key=lambda d: (-gf(int(query.labels[d])), d))[: env.k]
    return env.episode(query, docs, env.order.positions_by_preference(), DRM)


def evaluate_policy(policy: Policy, queries: Sequence, env: RankingEnv) -> EvalReport:
    """Greedy evaluation: P-NDCG per query plus label means per position and per step."""
    if not queries:
        raise ValueError("cannot evaluate on an empty partition")
    k = env.k
    scores = []
    pos_sum = np.zeros(k)
    step_sum = np.zeros(k)
    excluded = 0
    for q in queries:
        ep = policy(q, env)
        labels = q.labels
        for t, (d, p) in enumerate(zip(ep.doc_actions, ep.pos_actions)):
            pos_sum[p - 1] += labels[d]
            step_sum[t] += labels[d]
        ideal = ideal_serp_reward(labels, env.order, env.gain)
        if ideal <= 0:
            excluded += 1
            continue
        achieved = serp_reward(labels[list(ep.doc_actions)], ep.pos_actions, env.order, env.gain)
        scores.append(p_ndcg(achieved, ideal))
    n = len(queries)
    return EvalReport(
        mean_p_ndcg=float(np.mean(scores)) if scores else float("nan"),
        per_query=[float(s) for s in scores],
        per_position_mean_label=(pos_sum / n).tolist(),
        per_timestep_mean_label=(step_sum / n).tolist(),
        query_count=n,
        excluded=excluded,
    )


def welch_one_tailed_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float]:
    """Welch t statistic and one-tailed p-value for ``mean(a) > mean(b)``."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return 0.0, 0.5
        return math.copysign(math.inf, diff), 0.0 if diff > 0 else 1.0
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(t), float(stats.t.sf(t, df))


def summarize(values: Sequence[float]) -> dict:
    """Mean with both dispersion measures, labelled explicitly."""
    v = np.asarray(values, dtype=float)
    sd = float(v.std(ddof=1)) if v.size > 1 else float("nan")
    return {
        "n_runs": int(v.size),
        "mean": float(v.mean()),
        "std": sd,
        "stderr": sd / math.sqrt(v.size) if v.size > 1 else float("nan"),
    }
