"""Shared builders for the test suite."""
from __future__ import annotations

import itertools
import math

import numpy as np

from doublerank import agents as A
from doublerank import dataset as ds
from doublerank import mdp
from doublerank import neural as nn


def desk_orders(k: int = 5) -> dict[str, mdp.DisplayOrder]:
    return mdp.builtin_display_orders(k)


def gradient_instance(kind: str, seed: int, mode: str = nn.CANDIDATE_INPUT, residual_scale: float = 0.1):
    """Small agent, a few exploratory episodes and targets near the current Q.

    Biases get random values so that no hidden unit sits exactly on a ReLU kink or
    at the all-zero fixed point, and targets are drawn close to Q so the loss is
    not dominated by a few coordinates.
    """
    rng = np.random.default_rng(seed)
    data = ds.synthesize_dataset(ds.SyntheticConfig(
        num_train=4, num_valid=1, num_test=1, docs_per_query=6, feature_count=6,
        k=3, noise_scale=1.0, seed=seed, label_signal="scalar"))
    agent = A.make_agent(kind, 6, 3, A.AgentDims(4, 5, 3), mode)
    params = agent.init_params(rng)
    for name in params:
        if params[name].ndim < 2:
            params[name] = np.asarray(params[name] + 0.5 * rng.standard_normal(params[name].shape))
    env = mdp.RankingEnv(mdp.DisplayOrder((3, 1, 2)))
    queries = {q.id: q for q in data.train}
    episodes = [agent.rollout(params, q, 0.5, rng, env) for q in data.train]
    q_taken = np.array([agent.replay_forward(params, e, queries[e.query_id])[0] for e in episodes])
    targets = q_taken - residual_scale * rng.standard_normal(q_taken.shape)
    return agent, params, episodes, queries, targets


def max_gradient_error(kind: str, seed: int, mode: str = nn.CANDIDATE_INPUT) -> float:
    agent, params, episodes, queries, targets = gradient_instance(kind, seed, mode)
    _, grads = agent.loss_and_grads(params, episodes, queries, targets)
    return nn.finite_difference_check(
        lambda p: agent.loss_and_grads(p, episodes, queries, targets)[0], params, grads)


def enumerate_serps(n: int, k: int):
    """Every ordered choice of k documents out of n, placed on positions 1..k."""
    return itertools.permutations(range(n), k)


def dcg_reference(labels, order: mdp.DisplayOrder, variant: str, max_label: int = 4) -> float:
    """Reward of placing ``labels[i]`` at position i+1, written out independently."""
    total = 0.0
    for i, rel in enumerate(labels):
        g = 2.0 ** (rel - 1) if variant == mdp.PAPER_LITERAL else 2.0 ** rel - 1.0
        total += g / math.log2(order.pref_index[i] + 1)
    return total
