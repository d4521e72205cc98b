"""Double DQN over whole-episode experience replay."""
from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import neural as nn
from .agents import EpsilonSchedule
from .dataset import Dataset, sample_query
from .evaluation import evaluate_policy
from .mdp import Episode, RankingEnv

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "epsilon", "train_loss", "validation_p_ndcg", "transfer_flag"]


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-3
    replay_capacity: int = 5000
    transfer_every: int = 5000
    batch_episodes: int = 64
    max_steps: int = 200_000
    gamma: float = 1.0
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 30_000
    eval_every: int = 2500
    eval_queries: int = 500
    patience: int = 10
    seed: int = 0

    def validate(self) -> None:
        for name in ("replay_capacity", "transfer_every", "batch_episodes", "eval_every", "eval_queries", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainerConfig.{name} must be positive")
        if self.learning_rate < 0 or self.max_steps < 0:
            raise ValueError("learning_rate and max_steps must be >= 0")
        if self.gamma != 1.0:
            raise ValueError("episodes are finite and undiscounted: gamma must be 1")
        if self.batch_episodes > self.replay_capacity:
            raise ValueError("batch_episodes cannot exceed replay_capacity")

    @property
    def epsilon(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.epsilon_start, self.epsilon_end, self.epsilon_decay_steps)


class ReplayBuffer:
    """Bounded FIFO of complete episodes."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self.episodes: deque[Episode] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.episodes)

    def push(self, episode: Episode) -> None:
        self.episodes.append(episode)

    def sample(self, n: int, rng: np.random.Generator) -> list[Episode]:
        if n > len(self.episodes):
            raise ValueError(f"cannot sample {n} episodes from a buffer of {len(self.episodes)}")
        idx = rng.choice(len(self.episodes), size=n, replace=False)
        return [self.episodes[i] for i in idx]


def push_episode(buffer: ReplayBuffer, episode: Episode) -> ReplayBuffer:
    buffer.push(episode)
    return buffer


def sample_batch(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> list[Episode]:
    return buffer.sample(n, rng)


@dataclass
class NetworkPair:
    train: nn.Params
    label: nn.Params

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray]) -> "NetworkPair":
        return cls(nn.copy_params(params), nn.copy_params(params))

    def transfer(self) -> None:
        self.label = nn.copy_params(self.train)


def transfer(pair: NetworkPair) -> NetworkPair:
    pair.transfer()
    return pair


def compute_targets(agent, episodes: Sequence[Episode], queries, pair: NetworkPair, gamma: float = 1.0) -> np.ndarray:
    return agent.compute_targets(episodes, queries, pair.train, pair.label, gamma)


def train_step(agent, batch: Sequence[Episode], queries, pair: NetworkPair, adam: nn.Adam, gamma: float = 1.0) -> float:
    """One Adam update of the train network on every transition of ``batch``."""
    targets = agent.compute_targets(batch, queries, pair.train, pair.label, gamma)
    loss, grads = agent.loss_and_grads(pair.train, batch, queries, targets)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss} (targets in [{targets.min()}, {targets.max()}])")
    adam.step(pair.train, grads)
    return loss


@dataclass
class TrainResult:
    best_params: nn.Params
    best_step: int
    best_score: float
    final_params: nn.Params
    log: list[dict] = field(default_factory=list)
    transfers: list[int] = field(default_factory=list)


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([_fmt(row.get(f)) for f in LOG_FIELDS])


def validation_score(agent, params, queries, env: RankingEnv) -> float:
    return evaluate_policy(agent.greedy_policy(params), queries, env).mean_p_ndcg


def train_loop(dataset: Dataset, env: RankingEnv, agent, config: TrainerConfig,
               init_params: nn.Params | None = None, log_path=None) -> TrainResult:
    """Query stream -> epsilon-greedy rollout -> replay -> one update per episode.

    Updates start once the buffer holds ``batch_episodes`` episodes. The label
    network is refreshed every ``transfer_every`` updates. Validation P-NDCG is
    measured at step 0 and every ``eval_every`` steps; the best train network is
    kept and training stops after ``patience`` evaluations without improvement.
    """
    config.validate()
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_rng, query_rng, explore_rng, batch_rng = (np.random.default_rng(s) for s in seeds)

    params = init_params if init_params is not None else agent.init_params(init_rng)
    pair = NetworkPair.from_params(params)
    adam = nn.Adam(config.learning_rate)
    buffer = ReplayBuffer(config.replay_capacity)
    queries = {q.id: q for q in dataset.train}
    valid = dataset.valid[: config.eval_queries]
    schedule = config.epsilon

    result = TrainResult(nn.copy_params(pair.train), 0, float("-inf"), pair.train)
    if config.max_steps == 0:
        return result

    rows = result.log
    best = validation_score(agent, pair.train, valid, env)
    result.best_score = best
    rows.append({"step": 0, "epsilon": schedule.at(0), "validation_p_ndcg": best, "transfer_flag": 0})
    stale = 0
    updates = 0
    try:
        for step in range(1, config.max_steps + 1):
            eps = schedule.at(step)
            query = sample_query(dataset.train, query_rng)
            buffer.push(agent.rollout(pair.train, query, eps, explore_rng, env))
            row = {"step": step, "epsilon": eps, "transfer_flag": 0}
            if len(buffer) >= config.batch_episodes:
                batch = buffer.sample(config.batch_episodes, batch_rng)
                row["train_loss"] = train_step(agent, batch, queries, pair, adam, config.gamma)
                updates += 1
                if updates % config.transfer_every == 0:
                    pair.transfer()
                    result.transfers.append(step)
                    row["transfer_flag"] = 1
            stop = False
            if step % config.eval_every == 0:
                score = validation_score(agent, pair.train, valid, env)
                row["validation_p_ndcg"] = score
                log.info("step %d eps %.3f valid P-NDCG %.4f", step, eps, score)
                if score > best:
                    best, stale = score, 0
                    result.best_params = nn.copy_params(pair.train)
                    result.best_step, result.best_score = step, score
                else:
                    stale += 1
                    stop = stale >= config.patience
            rows.append(row)
            if stop:
                log.info("early stop at step %d (best %.4f at %d)", step, best, result.best_step)
                break
    finally:
        if log_path is not None:
            write_log(rows, log_path)
    result.final_params = pair.train
    return result
