"""Q-value models and their epsilon-greedy episode samplers.

``GruAgent`` places documents into positions 1..k in physical order and scores
each candidate by rolling the GRU one step with it. ``DrmAgent`` alternates a
document choice and a position choice; the GRU state advances once per
placement with ``[embedding, position]`` as input.

Agents are stateless: every method takes the parameter dict explicitly, so a
train network and a label network can share one agent object.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import neural as nn
from .mdp import BASELINE, DRM, Episode, RankingEnv

Params = nn.Params


@dataclass(frozen=True)
class AgentDims:
    embed: int = 128
    hidden: int = 256
    head: int = 128


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 30000

    def at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        if self.decay_steps <= 0 or step >= self.decay_steps:
            return self.end
        return self.start + (self.end - self.start) * step / self.decay_steps


def epsilon_at(schedule: EpsilonSchedule, step: int) -> float:
    return schedule.at(step)


def sub(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """View of the tensors under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def _argmax(q: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(q))


def double_dqn_target(reward: float, q_train_next, q_label_next, gamma: float = 1.0, terminal: bool = False) -> float:
    """``r + gamma * Q_label(s', argmax_a Q_train(s', a))``; just ``r`` at episode end.

    ``q_train_next`` and ``q_label_next`` score the same legal next actions in the
    same order.
    """
    if terminal:
        return float(reward)
    a = _argmax(np.asarray(q_train_next))
    return float(reward + gamma * np.asarray(q_label_next)[a])


def _segment_argmax(values: np.ndarray, seg: np.ndarray, pos: np.ndarray, n_seg: int) -> np.ndarray:
    """Row index of the (first) maximum of ``values`` within each segment."""
    width = int(pos.max()) + 1
    table = np.full((n_seg, width), -np.inf)
    table[seg, pos] = values
    rows = np.full((n_seg, width), -1, dtype=np.int64)
    rows[seg, pos] = np.arange(values.size)
    best = np.argmax(table, axis=1)
    return rows[np.arange(n_seg), best]


def _remaining_docs(batch: Sequence[Episode], offsets: np.ndarray, k: int, state_stride: int):
    """Legal next documents after each of the first k-1 placements of every episode.

    Returns ``(state_idx, doc_idx, seg, pos)``: the state row (``b * state_stride + t + 1``),
    the candidate row, the segment ``b * (k - 1) + t`` and the position within it.
    Candidates appear in ascending index order inside each segment.
    """
    s_idx, d_idx, seg = [], [], []
    steps = np.arange(k - 1)[:, None]
    for b, e in enumerate(batch):
        rank = np.full(offsets[b + 1] - offsets[b], k)
        rank[list(e.doc_actions)] = np.arange(k)
        t, c = np.nonzero(rank[None, :] > steps)
        s_idx.append(b * state_stride + t + 1)
        d_idx.append(offsets[b] + c)
        seg.append(b * (k - 1) + t)
    seg = np.concatenate(seg)
    pos = np.arange(seg.size) - np.searchsorted(seg, seg)
    return np.concatenate(s_idx), np.concatenate(d_idx), seg, pos


class _AgentBase:
    kind = ""
    mdp = ""

    def __init__(self, feature_count: int, k: int, dims: AgentDims = AgentDims(),
                 candidate_input: str = nn.CANDIDATE_PRINTED):
        if candidate_input not in nn.CANDIDATE_MODES:
            raise ValueError(f"unknown candidate_input {candidate_input!r}")
        self.feature_count = feature_count
        self.k = k
        self.dims = dims
        self.candidate_input = candidate_input

    def shapes(self) -> dict[str, tuple]:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> Params:
        return {name: nn.init_weights(shape, rng) for name, shape in self.shapes().items()}

    def manifest(self) -> dict:
        return {
            "agent": self.kind,
            "k": self.k,
            "feature_count": self.feature_count,
            "gru_candidate_input": self.candidate_input,
            "dims": asdict(self.dims),
        }

    def embed_document(self, params: Mapping[str, np.ndarray], features: np.ndarray):
        """``relu(W_d d + b_d)`` for one feature vector or a row batch."""
        pre, _ = nn.dense_forward(params["embed.W"], params["embed.b"], features)
        out = nn.relu(pre)
        return out[0] if np.ndim(features) == 1 else out

    def _gru(self, params, h, x):
        return nn.gru_forward(sub(params, "gru"), h, x, self.candidate_input)

    def _check(self, episode: Episode, query) -> None:
        if episode.query_id != query.id:
            raise ValueError(f"episode for query {episode.query_id} replayed against {query.id}")
        if episode.mdp != self.mdp or episode.k != self.k:
            raise ValueError(f"episode ({episode.mdp}, k={episode.k}) does not fit a {self.kind} agent with k={self.k}")
        if max(episode.doc_actions) >= query.n_candidates:
            raise ValueError(f"episode references a document outside query {query.id}")

    def _taken_features(self, batch: Sequence[Episode], queries: Mapping[str, object]) -> np.ndarray:
        for e in batch:
            self._check(e, queries[e.query_id])
        return np.stack([queries[e.query_id].features[list(e.doc_actions)] for e in batch])

    def _embed_candidates(self, params, batch, queries):
        """Embeds every candidate of every batch query; returns rows and per-episode offsets."""
        feats = [queries[e.query_id].features for e in batch]
        offsets = np.cumsum([0] + [f.shape[0] for f in feats])
        return self.embed_document(params, np.vstack(feats)), offsets

    def greedy_policy(self, params: Mapping[str, np.ndarray]):
        def policy(query, env: RankingEnv) -> Episode:
            return self.rollout(params, query, 0.0, None, env)

        return policy

    def rollout(self, params, query, epsilon, rng, env) -> Episode:
        raise NotImplementedError


class GruAgent(_AgentBase):
    """Baseline: Q(s_t, d) = v_q . relu(W_q GRU(h_{t-1}, embed(d)) + b_q) + u_q."""

    kind = "gru"
    mdp = BASELINE

    def shapes(self) -> dict[str, tuple]:
        E, H, Hq = self.dims.embed, self.dims.hidden, self.dims.head
        shapes = {"embed.W": (E, self.feature_count), "embed.b": (E,)}
        shapes.update({f"gru.{n}": s for n, s in nn.gru_shapes(E, H, self.candidate_input).items()})
        shapes.update({"head.W": (Hq, H), "head.b": (Hq,), "head.v": (Hq,), "head.u": ()})
        return shapes

    def head(self, params, h: np.ndarray) -> np.ndarray:
        pre = h @ params["head.W"].T + params["head.b"]
        return nn.relu(pre) @ params["head.v"] + params["head.u"]

    def gru_q_value(self, params, h_prev: np.ndarray, d_hat: np.ndarray):
        """Scores candidate(s) ``d_hat`` from state ``h_prev``; returns ``(q, h_next)``.

        With a row batch of candidates, ``h_prev`` is broadcast to every row.
        """
        batch = np.ndim(d_hat) == 2
        d = np.atleast_2d(d_hat)
        m = d.shape[0]
        h_next = nn.gru_forward_pairs(sub(params, "gru"), h_prev, d, np.zeros(m, dtype=np.int64),
                                      np.arange(m), self.candidate_input)
        q = self.head(params, h_next)
        return (q, h_next) if batch else (float(q[0]), h_next[0])

    def rollout(self, params, query, epsilon: float, rng, env: RankingEnv) -> Episode:
        if query.n_candidates < self.k:
            raise ValueError(f"query {query.id} has fewer than k={self.k} candidates")
        D = self.embed_document(params, query.features)
        h = np.zeros(self.dims.hidden)
        avail = list(range(query.n_candidates))
        docs = []
        for _ in range(self.k):
            if epsilon > 0 and rng.random() < epsilon:
                d = avail[int(rng.integers(len(avail)))]
                _, h = self.gru_q_value(params, h, D[d])
            else:
                q, hs = self.gru_q_value(params, h, D[avail])
                i = _argmax(q)
                d, h = avail[i], hs[i]
            avail.remove(d)
            docs.append(d)
        return env.episode(query, docs, None, BASELINE)

    def replay_forward(self, params, episode: Episode, query):
        """Q of each taken action plus ``(legal_actions, q_values)`` at every step."""
        self._check(episode, query)
        D = self.embed_document(params, query.features)
        h = np.zeros(self.dims.hidden)
        avail = list(range(query.n_candidates))
        taken, sets = [], []
        for d in episode.doc_actions:
            q, hs = self.gru_q_value(params, h, D[avail])
            i = avail.index(d)
            taken.append(q[i])
            sets.append((list(avail), q))
            h = hs[i]
            avail.remove(d)
        return np.array(taken), sets

    def _path(self, params, X: np.ndarray):
        """Hidden states along the taken documents: ``(B, k+1, H)`` with h_0 = 0."""
        B, k, _ = X.shape
        D = self.embed_document(params, X.reshape(B * k, -1)).reshape(B, k, -1)
        H = np.zeros((B, k + 1, self.dims.hidden))
        for t in range(k):
            H[:, t + 1], _ = self._gru(params, H[:, t], D[:, t])
        return H

    def compute_targets(self, batch: Sequence[Episode], queries, train_params, label_params,
                        gamma: float = 1.0, double: bool = True) -> np.ndarray:
        """Regression targets ``(B, k)``; ``double=False`` gives vanilla DQN on the label net."""
        k = self.k
        X = self._taken_features(batch, queries)
        rewards = np.array([e.rewards for e in batch])
        y = rewards.copy()
        if k == 1:
            return y
        select = train_params if double else label_params
        H_sel = self._path(select, X)
        D_sel, off = self._embed_candidates(select, batch, queries)

        h_idx, d_idx, seg, pos = _remaining_docs(batch, off, k, k + 1)
        H_flat = H_sel.reshape(-1, self.dims.hidden)
        h_next = nn.gru_forward_pairs(sub(select, "gru"), H_flat, D_sel, h_idx, d_idx, self.candidate_input)
        q = self.head(select, h_next)
        best = _segment_argmax(q, seg, pos, len(batch) * (k - 1))
        best_docs = d_idx[best]

        if double:
            H_lab = self._path(label_params, X)
            rows = np.vstack([queries[e.query_id].features for e in batch])[best_docs]
            D_lab = self.embed_document(label_params, rows)
            h_lab = nn.gru_forward_pairs(sub(label_params, "gru"), H_lab.reshape(-1, self.dims.hidden), D_lab,
                                         h_idx[best], np.arange(best.size), self.candidate_input)
            boot = self.head(label_params, h_lab)
        else:
            boot = q[best]
        y[:, : k - 1] += gamma * boot.reshape(len(batch), k - 1)
        return y

    def loss_and_grads(self, params, batch: Sequence[Episode], queries, targets: np.ndarray):
        """Sum of squared TD errors over all transitions and its exact gradient."""
        X = self._taken_features(batch, queries)
        B, k, F = X.shape
        Xf = X.reshape(B * k, F)
        A, _ = nn.dense_forward(params["embed.W"], params["embed.b"], Xf)
        D = nn.relu(A).reshape(B, k, -1)

        gru_p = sub(params, "gru")
        hs, caches = [np.zeros((B, self.dims.hidden))], []
        for t in range(k):
            h, cache = nn.gru_forward(gru_p, hs[-1], D[:, t], self.candidate_input)
            hs.append(h)
            caches.append(cache)
        Hf = np.stack(hs[1:], axis=1).reshape(B * k, -1)
        a = Hf @ params["head.W"].T + params["head.b"]
        z = nn.relu(a)
        q = (z @ params["head.v"] + params["head.u"]).reshape(B, k)
        err = q - targets
        loss = float(np.sum(err * err))

        dq = 2.0 * err.reshape(-1)
        grads = {"head.v": z.T @ dq, "head.u": np.array(dq.sum())}
        da = nn.relu_backward(a, dq[:, None] * params["head.v"])
        grads["head.W"] = da.T @ Hf
        grads["head.b"] = da.sum(axis=0)
        dH = (da @ params["head.W"]).reshape(B, k, -1)

        g_acc = {n: np.zeros_like(v) for n, v in gru_p.items()}
        dD = np.zeros_like(D)
        carry = np.zeros((B, self.dims.hidden))
        for t in reversed(range(k)):
            g, carry, dx = nn.gru_backward(gru_p, caches[t], dH[:, t] + carry)
            for n in g_acc:
                g_acc[n] += g[n]
            dD[:, t] = dx
        grads.update({f"gru.{n}": v for n, v in g_acc.items()})
        dA = nn.relu_backward(A, dD.reshape(B * k, -1))
        grads["embed.W"] = dA.T @ Xf
        grads["embed.b"] = dA.sum(axis=0)
        return loss, grads


class DrmAgent(_AgentBase):
    """Double-rank model: a document head and a per-position head on ``[h, embed(d)]``."""

    kind = "drm"
    mdp = DRM

    def shapes(self) -> dict[str, tuple]:
        E, H, Hq, k = self.dims.embed, self.dims.hidden, self.dims.head, self.k
        shapes = {"embed.W": (E, self.feature_count), "embed.b": (E,)}
        shapes.update({f"gru.{n}": s for n, s in nn.gru_shapes(E + 1, H, self.candidate_input).items()})
        shapes.update({"doc.W": (Hq, H + E), "doc.b": (Hq,), "doc.v": (Hq,), "doc.u": ()})
        shapes.update({"pos.W": (Hq, H + E), "pos.b": (Hq,), "pos.v": (k, Hq), "pos.u": (k,)})
        return shapes

    def drm_doc_q(self, params, h_prev: np.ndarray, d_hat: np.ndarray):
        """Document-action Q for one embedding or a row batch of embeddings."""
        batch = np.ndim(d_hat) == 2
        d = np.atleast_2d(d_hat)
        m = d.shape[0]
        q = self._doc_scores(params, h_prev[None, :], d, np.zeros(m, dtype=np.int64), np.arange(m))
        return q if batch else float(q[0])

    def _doc_scores(self, params, states, docs, state_idx, doc_idx):
        """Document-head Q for (state, document) row pairs; the concat matmul is split per block."""
        W = params["doc.W"]
        H = self.dims.hidden
        pre = (states @ W[:, :H].T + params["doc.b"])[state_idx] + (docs @ W[:, H:].T)[doc_idx]
        return nn.relu(pre) @ params["doc.v"] + params["doc.u"]

    def drm_pos_q(self, params, h_prev: np.ndarray, d_hat: np.ndarray, available: Sequence[int]) -> np.ndarray:
        """Position-action Q for each position in ``available`` (1-based)."""
        if len(available) == 0:
            raise ValueError("no available positions")
        idx = np.asarray(available) - 1
        trunk = nn.relu(params["pos.W"] @ np.concatenate([h_prev, d_hat]) + params["pos.b"])
        return params["pos.v"][idx] @ trunk + params["pos.u"][idx]

    def _advance(self, params, h, d_hat, position: int):
        x = np.append(d_hat, float(position))
        h, _ = self._gru(params, h, x)
        return h[0]

    def rollout(self, params, query, epsilon: float, rng, env: RankingEnv,
                pos_epsilon: float | None = None) -> Episode:
        """Samples one episode; document and position exploration are separate coin flips."""
        if query.n_candidates < self.k:
            raise ValueError(f"query {query.id} has fewer than k={self.k} candidates")
        pos_eps = epsilon if pos_epsilon is None else pos_epsilon
        D = self.embed_document(params, query.features)
        h = np.zeros(self.dims.hidden)
        avail_d = list(range(query.n_candidates))
        avail_p = list(range(1, self.k + 1))
        docs, positions = [], []
        for _ in range(self.k):
            if epsilon > 0 and rng.random() < epsilon:
                d = avail_d[int(rng.integers(len(avail_d)))]
            else:
                d = avail_d[_argmax(self.drm_doc_q(params, h, D[avail_d]))]
            avail_d.remove(d)
            if pos_eps > 0 and rng.random() < pos_eps:
                p = avail_p[int(rng.integers(len(avail_p)))]
            else:
                p = avail_p[_argmax(self.drm_pos_q(params, h, D[d], avail_p))]
            avail_p.remove(p)
            docs.append(d)
            positions.append(p)
            h = self._advance(params, h, D[d], p)
        return env.episode(query, docs, positions, DRM)

    def replay_forward(self, params, episode: Episode, query):
        """Per-step (2k) taken-action Q values and ``(legal_actions, q_values)`` sets."""
        self._check(episode, query)
        D = self.embed_document(params, query.features)
        h = np.zeros(self.dims.hidden)
        avail_d = list(range(query.n_candidates))
        avail_p = list(range(1, self.k + 1))
        taken, sets = [], []
        for d, p in zip(episode.doc_actions, episode.pos_actions):
            qd = self.drm_doc_q(params, h, D[avail_d])
            taken.append(qd[avail_d.index(d)])
            sets.append((list(avail_d), qd))
            qp = self.drm_pos_q(params, h, D[d], avail_p)
            taken.append(qp[avail_p.index(p)])
            sets.append((list(avail_p), qp))
            avail_d.remove(d)
            avail_p.remove(p)
            h = self._advance(params, h, D[d], p)
        return np.array(taken), sets

    def _path(self, params, X: np.ndarray, P: np.ndarray):
        """Embeddings ``(B, k, E)`` and hidden states ``(B, k, H)`` where ``[:, i]`` precedes placement i."""
        B, k, _ = X.shape
        D = self.embed_document(params, X.reshape(B * k, -1)).reshape(B, k, -1)
        G = np.zeros((B, k, self.dims.hidden))
        for i in range(k - 1):
            x = np.concatenate([D[:, i], P[:, i : i + 1].astype(float)], axis=1)
            G[:, i + 1], _ = self._gru(params, G[:, i], x)
        return D, G

    def _pos_scores(self, params, G, D):
        """All-position scores ``(B, k, k)`` for state/document pairs."""
        Z = np.concatenate([G, D], axis=2)
        trunk = nn.relu(Z @ params["pos.W"].T + params["pos.b"])
        return trunk @ params["pos.v"].T + params["pos.u"]

    def compute_targets(self, batch: Sequence[Episode], queries, train_params, label_params,
                        gamma: float = 1.0, double: bool = True) -> np.ndarray:
        """Regression targets ``(B, 2k)`` in step order doc_1, pos_1, ..., doc_k, pos_k."""
        k = self.k
        B = len(batch)
        X = self._taken_features(batch, queries)
        P = np.array([e.pos_actions for e in batch])
        y = np.array([e.rewards for e in batch])
        select = train_params if double else label_params
        D_sel, G_sel = self._path(select, X, P)

        # document steps: the next action is this document's position
        used = np.zeros((B, k, k), dtype=bool)
        for i in range(1, k):
            used[:, i:, :] |= np.eye(k, dtype=bool)[P[:, i - 1] - 1][:, None, :]
        s_sel = np.where(used, -np.inf, self._pos_scores(select, G_sel, D_sel))
        best_pos = np.argmax(s_sel, axis=2)
        if double:
            D_lab, G_lab = self._path(label_params, X, P)
            s_lab = self._pos_scores(label_params, G_lab, D_lab)
        else:
            G_lab, s_lab = G_sel, s_sel
        y[:, 0::2] += gamma * np.take_along_axis(s_lab, best_pos[..., None], axis=2)[..., 0]

        if k == 1:
            return y
        # position steps 1..k-1: the next action is a document
        C, off = self._embed_candidates(select, batch, queries)
        g_idx, d_idx, seg, pos = _remaining_docs(batch, off, k, k)
        q = self._doc_scores(select, G_sel.reshape(-1, self.dims.hidden), C, g_idx, d_idx)
        best = _segment_argmax(q, seg, pos, B * (k - 1))
        if double:
            rows = np.vstack([queries[e.query_id].features for e in batch])[d_idx[best]]
            boot = self._doc_scores(label_params, G_lab.reshape(-1, self.dims.hidden),
                                    self.embed_document(label_params, rows), g_idx[best], np.arange(best.size))
        else:
            boot = q[best]
        y[:, 1 : 2 * k - 1 : 2] += gamma * boot.reshape(B, k - 1)
        return y

    def loss_and_grads(self, params, batch: Sequence[Episode], queries, targets: np.ndarray):
        X = self._taken_features(batch, queries)
        P = np.array([e.pos_actions for e in batch])
        B, k, F = X.shape
        E, Hd = self.dims.embed, self.dims.hidden
        Xf = X.reshape(B * k, F)
        A, _ = nn.dense_forward(params["embed.W"], params["embed.b"], Xf)
        D = nn.relu(A).reshape(B, k, E)

        gru_p = sub(params, "gru")
        G = np.zeros((B, k, Hd))
        caches = []
        for i in range(k - 1):
            x = np.concatenate([D[:, i], P[:, i : i + 1].astype(float)], axis=1)
            G[:, i + 1], cache = nn.gru_forward(gru_p, G[:, i], x, self.candidate_input)
            caches.append(cache)
        Z = np.concatenate([G, D], axis=2).reshape(B * k, Hd + E)

        a_d = Z @ params["doc.W"].T + params["doc.b"]
        t_d = nn.relu(a_d)
        q_doc = t_d @ params["doc.v"] + params["doc.u"]
        pidx = P.reshape(-1) - 1
        onehot = np.eye(k)[pidx]
        a_p = Z @ params["pos.W"].T + params["pos.b"]
        t_p = nn.relu(a_p)
        Vsel = params["pos.v"][pidx]
        q_pos = np.sum(t_p * Vsel, axis=1) + params["pos.u"][pidx]

        e_doc = q_doc - targets[:, 0::2].reshape(-1)
        e_pos = q_pos - targets[:, 1::2].reshape(-1)
        loss = float(np.sum(e_doc * e_doc) + np.sum(e_pos * e_pos))

        g_doc, g_pos = 2.0 * e_doc, 2.0 * e_pos
        grads = {"doc.v": t_d.T @ g_doc, "doc.u": np.array(g_doc.sum())}
        dad = nn.relu_backward(a_d, g_doc[:, None] * params["doc.v"])
        grads["doc.W"] = dad.T @ Z
        grads["doc.b"] = dad.sum(axis=0)
        grads["pos.v"] = onehot.T @ (g_pos[:, None] * t_p)
        grads["pos.u"] = onehot.T @ g_pos
        dap = nn.relu_backward(a_p, g_pos[:, None] * Vsel)
        grads["pos.W"] = dap.T @ Z
        grads["pos.b"] = dap.sum(axis=0)
        dZ = (dad @ params["doc.W"] + dap @ params["pos.W"]).reshape(B, k, Hd + E)
        dG, dD = dZ[:, :, :Hd], dZ[:, :, Hd:].copy()

        g_acc = {n: np.zeros_like(v) for n, v in gru_p.items()}
        carry = np.zeros((B, Hd))
        for i in reversed(range(k - 1)):
            g, carry, dx = nn.gru_backward(gru_p, caches[i], dG[:, i + 1] + carry)
            for n in g_acc:
                g_acc[n] += g[n]
            dD[:, i] += dx[:, :E]
        grads.update({f"gru.{n}": v for n, v in g_acc.items()})
        dA = nn.relu_backward(A, dD.reshape(B * k, E))
        grads["embed.W"] = dA.T @ Xf
        grads["embed.b"] = dA.sum(axis=0)
        return loss, grads


AGENTS = {"gru": GruAgent, "drm": DrmAgent}


def make_agent(kind: str, feature_count: int, k: int, dims: AgentDims = AgentDims(),
               candidate_input: str = nn.CANDIDATE_PRINTED):
    try:
        cls = AGENTS[kind]
    except KeyError:
        raise ValueError(f"unknown agent {kind!r}; choose from {sorted(AGENTS)}") from None
    return cls(feature_count, k, dims, candidate_input)


def agent_from_manifest(manifest: Mapping) -> _AgentBase:
    return make_agent(
        manifest["agent"],
        manifest["feature_count"],
        manifest["k"],
        AgentDims(**manifest["dims"]),
        manifest["gru_candidate_input"],
    )
