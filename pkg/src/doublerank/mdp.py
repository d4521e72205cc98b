"""Ranking MDPs: display orders, gains, states, transitions and rewards.

Documents are addressed by their 0-based index in ``Query.features``. Physical
display positions are 1-based (``1..k``). The baseline MDP fills positions in
physical order, one document per step (k steps). The double-rank MDP alternates
a document action and a position action (2k steps).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence


PAPER_LITERAL = "paper_literal"
STANDARD_DCG = "standard_dcg"
DOCUMENT = "document"
SERP = "serp"
BASELINE = "baseline"
DRM = "drm"


class IllegalAction(ValueError):
    pass


@dataclass(frozen=True)
class DisplayOrder:
    """``pref_index[i]`` is the preference rank (1 = most preferred) of position ``i + 1``."""

    pref_index: tuple[int, ...]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "pref_index", tuple(int(p) for p in self.pref_index))
        if sorted(self.pref_index) != list(range(1, len(self.pref_index) + 1)):
            raise ValueError(f"display order {self.pref_index} is not a permutation of 1..{len(self.pref_index)}")

    @property
    def k(self) -> int:
        return len(self.pref_index)

    def rank_of(self, position: int) -> int:
        if not 1 <= position <= self.k:
            raise IllegalAction(f"position {position} outside 1..{self.k}")
        return self.pref_index[position - 1]

    def positions_by_preference(self) -> list[int]:
        return sorted(range(1, self.k + 1), key=self.rank_of)

    @classmethod
    def from_json(cls, path) -> "DisplayOrder":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, list) or not all(isinstance(v, int) for v in data):
            raise ValueError(f"{path}: expected a JSON array of integers")
        return cls(tuple(data), name=str(path))

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(list(self.pref_index), fh)


def builtin_display_orders(k: int = 10) -> dict[str, DisplayOrder]:
    """``first``, ``center`` and ``last`` for any ``k``; at k=10 center is 9,7,5,3,1,2,4,6,8,10."""
    if k < 1:
        raise ValueError("k must be positive")
    odd = [r for r in range(k, 0, -1) if r % 2 == 1]
    even = [r for r in range(1, k + 1) if r % 2 == 0]
    return {
        "first": DisplayOrder(tuple(range(1, k + 1)), "first"),
        "center": DisplayOrder(tuple(odd + even), "center"),
        "last": DisplayOrder(tuple(range(k, 0, -1)), "last"),
    }


def name_order(order: DisplayOrder) -> DisplayOrder:
    """Give an unnamed permutation its built-in name when it matches one."""
    if order.name != "custom":
        return order
    for name, builtin in builtin_display_orders(order.k).items():
        if builtin.pref_index == order.pref_index:
            return DisplayOrder(order.pref_index, name)
    return order


def discount(pref_rank: int, k: int | None = None) -> float:
    if pref_rank < 1 or (k is not None and pref_rank > k):
        raise ValueError(f"preference rank {pref_rank} out of range")
    return math.log2(pref_rank + 1)


@dataclass(frozen=True)
class GainFunction:
    variant: str = PAPER_LITERAL
    max_label: int = 4

    def __post_init__(self):
        if self.variant not in (PAPER_LITERAL, STANDARD_DCG):
            raise ValueError(f"unknown gain variant {self.variant!r}")

    def __call__(self, rel: int) -> float:
        if not 0 <= rel <= self.max_label:
            raise ValueError(f"relevance {rel} outside [0, {self.max_label}]")
        if self.variant == PAPER_LITERAL:
            return 2.0 ** (rel - 1)
        return 2.0**rel - 1.0


def gain(rel: int, gf: GainFunction) -> float:
    return gf(rel)


@dataclass(frozen=True)
class BaselineState:
    n_candidates: int
    k: int
    placed: tuple[int, ...] = ()

    @property
    def t(self) -> int:
        return len(self.placed)

    @property
    def terminal(self) -> bool:
        return self.t == self.k

    def available_docs(self) -> list[int]:
        used = set(self.placed)
        return [d for d in range(self.n_candidates) if d not in used]


def baseline_step(state: BaselineState, doc: int) -> BaselineState:
    if state.terminal:
        raise IllegalAction("episode already complete")
    if not 0 <= doc < state.n_candidates:
        raise IllegalAction(f"document {doc} out of range")
    if doc in state.placed:
        raise IllegalAction(f"document {doc} already placed")
    return BaselineState(state.n_candidates, state.k, state.placed + (doc,))


@dataclass(frozen=True)
class DrmState:
    n_candidates: int
    k: int
    docs: tuple[int, ...] = ()
    positions: tuple[int, ...] = ()

    @property
    def t(self) -> int:
        return len(self.docs) + len(self.positions)

    @property
    def expects_document(self) -> bool:
        return len(self.docs) == len(self.positions)

    @property
    def terminal(self) -> bool:
        return self.t == 2 * self.k

    def available_docs(self) -> list[int]:
        used = set(self.docs)
        return [d for d in range(self.n_candidates) if d not in used]

    def available_positions(self) -> list[int]:
        used = set(self.positions)
        return [p for p in range(1, self.k + 1) if p not in used]


def drm_step(state: DrmState, action: int, kind: str) -> DrmState:
    """``kind`` is ``"doc"`` or ``"pos"`` and must match the parity of the step."""
    if state.terminal:
        raise IllegalAction("episode already complete")
    if kind == "doc":
        if not state.expects_document:
            raise IllegalAction("a position action is expected at this step")
        if not 0 <= action < state.n_candidates or action in state.docs:
            raise IllegalAction(f"document {action} unavailable")
        return DrmState(state.n_candidates, state.k, state.docs + (action,), state.positions)
    if kind == "pos":
        if state.expects_document:
            raise IllegalAction("a document action is expected at this step")
        if not 1 <= action <= state.k or action in state.positions:
            raise IllegalAction(f"position {action} unavailable")
        return DrmState(state.n_candidates, state.k, state.docs, state.positions + (action,))
    raise ValueError(f"unknown action kind {kind!r}")


def doc_reward_baseline(t: int, rel: int, order: DisplayOrder, gf: GainFunction) -> float:
    """Reward for placing a document at step ``t`` (1-based) into physical position ``t``."""
    if not 1 <= t <= order.k:
        raise ValueError(f"step {t} outside 1..{order.k}")
    return gf(rel) / discount(order.rank_of(t))


def doc_reward_drm(position: int, rel: int, order: DisplayOrder, gf: GainFunction) -> float:
    return gf(rel) / discount(order.rank_of(position))


def serp_reward(labels: Sequence[int], positions: Sequence[int], order: DisplayOrder, gf: GainFunction) -> float:
    """Total reward of a complete SERP, summed in placement order."""
    if len(labels) != order.k or len(positions) != order.k:
        raise ValueError(f"incomplete SERP: {len(labels)} documents for k={order.k}")
    total = 0.0
    for rel, pos in zip(labels, positions):
        total += doc_reward_drm(pos, int(rel), order, gf)
    return total


@dataclass(frozen=True)
class Episode:
    query_id: str
    mdp: str
    doc_actions: tuple[int, ...]
    pos_actions: tuple[int, ...]
    rewards: tuple[float, ...]
    total: float

    @property
    def k(self) -> int:
        return len(self.doc_actions)


@dataclass(frozen=True)
class RankingEnv:
    """Simulated user: hidden display order, gain and reward granularity."""

    order: DisplayOrder
    gain: GainFunction = field(default_factory=GainFunction)
    reward_level: str = DOCUMENT

    def __post_init__(self):
        if self.reward_level not in (DOCUMENT, SERP):
            raise ValueError(f"unknown reward level {self.reward_level!r}")

    @property
    def k(self) -> int:
        return self.order.k

    def episode(self, query, doc_actions: Sequence[int], pos_actions: Sequence[int] | None, mdp: str) -> Episode:
        """Validate a complete action sequence and attach its reward stream."""
        k = self.k
        labels = query.labels
        if mdp == BASELINE:
            if pos_actions is not None and tuple(pos_actions) != tuple(range(1, k + 1)):
                raise IllegalAction("baseline episodes fill positions in physical order")
            state = BaselineState(query.n_candidates, k)
            doc_rewards = []
            for d in doc_actions:
                state = baseline_step(state, int(d))
                doc_rewards.append(doc_reward_baseline(state.t, int(labels[d]), self.order, self.gain))
            if not state.terminal:
                raise IllegalAction(f"episode has {state.t} of {k} placements")
            pos_actions = tuple(range(1, k + 1))
            per_step = doc_rewards
        elif mdp == DRM:
            if pos_actions is None or len(pos_actions) != len(doc_actions):
                raise IllegalAction("DRM episodes need one position per document")
            state = DrmState(query.n_candidates, k)
            doc_rewards, per_step = [], []
            for d, p in zip(doc_actions, pos_actions):
                state = drm_step(state, int(d), "doc")
                state = drm_step(state, int(p), "pos")
                r = doc_reward_drm(int(p), int(labels[d]), self.order, self.gain)
                doc_rewards.append(r)
                per_step += [0.0, r]
            if not state.terminal:
                raise IllegalAction(f"episode has {len(state.docs)} of {k} placements")
        else:
            raise ValueError(f"unknown mdp {mdp!r}")

        total = 0.0
        for r in doc_rewards:
            total += r
        if self.reward_level == SERP:
            per_step = [0.0] * (len(per_step) - 1) + [total]
        return Episode(
            query.id,
            mdp,
            tuple(int(d) for d in doc_actions),
            tuple(int(p) for p in pos_actions),
            tuple(per_step),
            total,
        )


def serp_layout(episode: Episode) -> list[int]:
    """Document index shown at each physical position 1..k."""
    layout = [0] * episode.k
    for d, p in zip(episode.doc_actions, episode.pos_actions):
        layout[p - 1] = d
    return layout

