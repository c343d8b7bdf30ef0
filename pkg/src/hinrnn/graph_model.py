"""Feature-conditioned autoregressive model of collaboration matrices.

A network is read as a sequence of edge vectors under a BFS node ordering:
``S_i = (A[1,i], ..., A[i-1,i])``. A graph-level GRU consumes, at node ``i``,
the previous node's edge vector (zero-padded to a fixed width) concatenated
with node ``i``'s reviewer vector. From its state an edge-level GRU unrolls
``i - 1`` steps, each emitting the probability that node ``i`` links to the
corresponding earlier node, with the previous edge bit as its next input.

Both GRUs are trained jointly with binary cross-entropy under teacher
forcing. With ``feature_blind`` the reviewer vectors are zeroed at the input
and everything else is unchanged.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .cogroups import CoReviewNetwork
from .nn import (
    DTYPE,
    GruCell,
    NumericError,
    Optimizer,
    Params,
    bce_with_logits,
    flat_buffer,
    check_finite,
    load_params,
    save_params,
    sigmoid,
    uniform_init,
)

log = logging.getLogger(__name__)

SOS = 1.0


# --- ordering and sequence codec -------------------------------------------

def order_nodes(network: CoReviewNetwork, policy: str = "bfs") -> list[str]:
    """BFS from the highest-degree reviewer; ties go to the smaller id.

    Neighbours of each dequeued node are enqueued in id order.
    """
    if policy != "bfs":
        raise ValueError(f"unknown ordering policy {policy!r}")
    adj = network.neighbors()
    root = min(network.reviewers, key=lambda r: (-len(adj[r]), r))
    order, seen, queue = [], {root}, deque([root])
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in sorted(adj[u]):
            if v not in seen:
                seen.add(v)
                queue.append(v)
    if len(order) != network.size:
        raise ValueError(f"{network.group_id}: network is not connected")
    return order


def adjacency_to_sequence(adj: np.ndarray) -> list[np.ndarray]:
    """``[S_2, ..., S_n]`` where ``S_i`` has length ``i - 1``."""
    adj = np.asarray(adj)
    return [adj[:i, i].astype(np.int8) for i in range(1, adj.shape[0])]


def to_sequence(network: CoReviewNetwork, ordering: Sequence[str]) -> list[np.ndarray]:
    if sorted(ordering) != sorted(network.reviewers):
        raise ValueError("ordering is not a permutation of the network's reviewers")
    return adjacency_to_sequence(network.adjacency(ordering))


def from_sequence(seq: Sequence[Sequence[int]]) -> np.ndarray:
    n = len(seq) + 1
    adj = np.zeros((n, n), dtype=np.int8)
    for k, s in enumerate(seq):
        i = k + 1
        s = np.asarray(s)
        if s.shape != (i,):
            raise ValueError(f"edge vector for node {i + 1} has length {s.size}, expected {i}")
        if not np.isin(s, (0, 1)).all():
            raise ValueError("edge vectors must be 0/1")
        adj[:i, i] = s
        adj[i, :i] = s
    return adj


@dataclass(frozen=True)
class CollaborationMatrix:
    ordering: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.int8)
        n = len(self.ordering)
        if m.shape != (n, n):
            raise ValueError(f"matrix shape {m.shape} does not match {n} reviewers")
        if not (m == m.T).all() or m.diagonal().any():
            raise ValueError("collaboration matrix must be symmetric with zero diagonal")
        object.__setattr__(self, "matrix", m)

    def degrees(self) -> dict[str, int]:
        return dict(zip(self.ordering, (int(d) for d in self.matrix.sum(axis=1))))

    def edges(self) -> set[tuple[str, str]]:
        iu, ju = np.nonzero(np.triu(self.matrix, 1))
        return {tuple(sorted((self.ordering[i], self.ordering[j]))) for i, j in zip(iu, ju)}

    def aligned(self, ordering: Sequence[str]) -> "CollaborationMatrix":
        pos = [self.ordering.index(r) for r in ordering]
        return CollaborationMatrix(tuple(ordering), self.matrix[np.ix_(pos, pos)])


def edge_accuracy(predicted: CollaborationMatrix, gold: CollaborationMatrix) -> float:
    """Share of gold edges present in the prediction."""
    if set(predicted.ordering) != set(gold.ordering):
        raise ValueError("predicted and gold matrices cover different reviewers")
    gold_edges = gold.edges()
    if not gold_edges:
        raise ValueError("gold matrix has no edges")
    return len(gold_edges & predicted.edges()) / len(gold_edges)


def node_accuracy(predicted: CollaborationMatrix, gold_members: Iterable[str]) -> float:
    """Share of gold group members that keep at least one edge in the prediction."""
    members = list(gold_members)
    if not members:
        raise ValueError("no gold members")
    deg = predicted.degrees()
    return sum(1 for r in members if deg[r] > 0) / len(members)


# --- model -----------------------------------------------------------------

@dataclass
class HinRnnConfig:
    feature_dim: int = 101
    max_prev: int = 24  # padding width of edge vectors: largest training network size - 1
    graph_hidden: int = 128
    edge_hidden: int = 16
    input_embed: int = 64
    feature_blind: bool = False


@dataclass
class GraphSample:
    group_id: str
    ordering: tuple[str, ...]
    adjacency: np.ndarray  # (n, n) 0/1 under ``ordering``
    features: np.ndarray  # (n, feature_dim)

    @property
    def size(self) -> int:
        return len(self.ordering)


def make_sample(network: CoReviewNetwork, vectors: dict[str, np.ndarray], policy: str = "bfs") -> GraphSample:
    missing = [r for r in network.reviewers if r not in vectors]
    if missing:
        raise ValueError(f"{network.group_id}: no reviewer vector for {', '.join(missing)}")
    ordering = order_nodes(network, policy)
    return GraphSample(
        network.group_id,
        tuple(ordering),
        network.adjacency(ordering),
        np.stack([np.asarray(vectors[r], dtype=DTYPE) for r in ordering]),
    )


class HinRnn:
    def __init__(self, config: HinRnnConfig, params: Params | None = None, seed: int = 0):
        self.config = config
        self.trained = False
        c = config
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                "in.W": uniform_init(rng, (c.max_prev + c.feature_dim, c.input_embed), c.max_prev + c.feature_dim),
                "in.b": uniform_init(rng, (c.input_embed,), c.max_prev + c.feature_dim),
            }
            for k, v in GruCell.initialized(c.input_embed, c.graph_hidden, rng).params.items():
                params[f"graph.{k}"] = v
            params["h2e.W"] = uniform_init(rng, (c.graph_hidden, c.edge_hidden), c.graph_hidden)
            params["h2e.b"] = uniform_init(rng, (c.edge_hidden,), c.graph_hidden)
            for k, v in GruCell.initialized(1, c.edge_hidden, rng).params.items():
                params[f"edge.{k}"] = v
            params["out.W"] = uniform_init(rng, (c.edge_hidden, 1), c.edge_hidden)
            params["out.b"] = uniform_init(rng, (1,), c.edge_hidden)
        # input standardization, fitted on the training features and not trained
        self.feature_mean = np.zeros(c.feature_dim, dtype=DTYPE)
        self.feature_scale = np.ones(c.feature_dim, dtype=DTYPE)
        self.flat, self.params = flat_buffer(params)
        self._grad_flat, self._grad_views = flat_buffer(self.params)
        self.graph_cell = GruCell(c.input_embed, c.graph_hidden, self._sub(self.params, "graph."))
        self.edge_cell = GruCell(1, c.edge_hidden, self._sub(self.params, "edge."))

    @staticmethod
    def _sub(d: Params, prefix: str) -> Params:
        return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}

    def fit_standardizer(self, samples: Sequence[GraphSample]) -> None:
        """Sets the input mean and spread from every node of ``samples``."""
        feats = np.concatenate([s.features for s in samples]).astype(DTYPE)
        self.feature_mean = feats.mean(axis=0)
        spread = feats.std(axis=0)
        self.feature_scale = np.where(spread > 1e-12, spread, 1.0)

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=DTYPE) - self.feature_mean) / self.feature_scale

    def zero_grads(self) -> Params:
        """Zeroed gradient views sharing one flat buffer (reused across calls)."""
        self._grad_flat[:] = 0.0
        return self._grad_views

    # -- single-step API ------------------------------------------------------

    def graph_input(self, s_prev: np.ndarray, v: np.ndarray) -> np.ndarray:
        s_prev = np.asarray(s_prev, dtype=DTYPE)
        v = np.asarray(v, dtype=DTYPE)
        if s_prev.shape[-1] != self.config.max_prev:
            raise ValueError(f"edge vector width {s_prev.shape[-1]} != {self.config.max_prev}")
        if v.shape[-1] != self.config.feature_dim:
            raise ValueError(f"feature width {v.shape[-1]} != {self.config.feature_dim}")
        v = np.zeros_like(v) if self.config.feature_blind else self.standardize(v)
        return np.concatenate([s_prev, v], axis=-1)

    def step(self, h_prev: np.ndarray, s_prev: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Graph-level transition ``h_i = GRU(h_{i-1}, relu(in([s_prev, v_i])))``."""
        x = self.graph_input(s_prev, v)
        e = np.maximum(x @ self.params["in.W"] + self.params["in.b"], 0.0)
        single = e.ndim == 1
        h, _ = self.graph_cell.forward(np.atleast_2d(e), np.atleast_2d(np.asarray(h_prev, dtype=DTYPE)))
        return h[0] if single else h

    def predict_edges(self, h: np.ndarray, i: int, targets: Sequence[int] | None = None) -> np.ndarray:
        """Probabilities that node ``i`` (1-based) links to nodes ``1..i-1``.

        With ``targets`` the edge GRU is teacher-forced; otherwise each step is
        fed the thresholded previous decision.
        """
        if i < 2:
            raise ValueError("node 1 has no earlier nodes")
        p = self.params
        he = np.tanh(np.atleast_2d(h) @ p["h2e.W"] + p["h2e.b"])
        x = np.full((he.shape[0], 1), SOS)
        out = []
        for j in range(i - 1):
            he, _ = self.edge_cell.forward(x, he)
            prob = sigmoid(he @ p["out.W"] + p["out.b"])
            out.append(prob[:, 0])
            bit = targets[j] if targets is not None else (prob[:, 0] >= 0.5).astype(DTYPE)
            x = np.asarray(bit, dtype=DTYPE).reshape(-1, 1)
        probs = np.stack(out, axis=-1)
        return probs[0] if np.ndim(h) == 1 else probs

    # -- batched teacher-forced pass -------------------------------------------

    def _batch_arrays(self, samples: Sequence[GraphSample]):
        P, F = self.config.max_prev, self.config.feature_dim
        B = len(samples)
        N = max(s.size for s in samples)
        if N - 1 > P:
            raise ValueError(f"network of {N} nodes exceeds the training width {P + 1}")
        X = np.zeros((N, B, P + F), dtype=DTYPE)
        X[0, :, :P] = SOS
        K = max(N - 1, 1)
        Y = np.zeros((N, B, K), dtype=DTYPE)
        M = np.zeros((N, B, K), dtype=DTYPE)
        for b, s in enumerate(samples):
            n = s.size
            if not self.config.feature_blind:
                X[:n, b, P:] = self.standardize(s.features)
            for t in range(1, n):
                Y[t, b, :t] = s.adjacency[:t, t]
                M[t, b, :t] = 1.0
                if t + 1 < n:
                    X[t + 1, b, :t] = s.adjacency[:t, t]
        return X, Y, M

    def loss_and_grads(self, samples: Sequence[GraphSample]) -> tuple[float, Params, dict]:
        """Mean BCE over all real edge slots of the batch, its gradients, and stats."""
        p = self.params
        X, Y, M = self._batch_arrays(samples)
        N, B, _ = X.shape
        K = Y.shape[2]
        Hg, He = self.config.graph_hidden, self.config.edge_hidden

        h = np.zeros((B, Hg), dtype=DTYPE)
        g_caches, pre_in, H = [], [], np.empty((N, B, Hg), dtype=DTYPE)
        for t in range(N):
            a = X[t] @ p["in.W"] + p["in.b"]
            pre_in.append(a)
            h, cache = self.graph_cell.forward(np.maximum(a, 0.0), h)
            g_caches.append(cache)
            H[t] = h
        Hf = H.reshape(N * B, Hg)
        he0 = np.tanh(Hf @ p["h2e.W"] + p["h2e.b"])
        Yf, Mf = Y.reshape(N * B, K), M.reshape(N * B, K)
        he = he0
        x = np.full((N * B, 1), SOS)
        e_caches, hes, logits = [], [], np.empty((N * B, K), dtype=DTYPE)
        for k in range(K):
            he, cache = self.edge_cell.forward(x, he)
            e_caches.append(cache)
            hes.append(he)
            logits[:, k] = (he @ p["out.W"] + p["out.b"])[:, 0]
            x = Yf[:, k : k + 1]
        count = max(Mf.sum(), 1.0)
        elem_loss, d_logit = bce_with_logits(logits, Yf)
        loss = float((elem_loss * Mf).sum() / count)
        d_logit = d_logit * Mf / count
        correct = float((((logits >= 0).astype(DTYPE) == Yf) * Mf).sum())

        grads = self.zero_grads()
        g_graph = self._sub(grads, "graph.")
        g_edge = self._sub(grads, "edge.")
        dhe = np.zeros((N * B, He), dtype=DTYPE)
        for k in reversed(range(K)):
            dl = d_logit[:, k : k + 1]
            grads["out.W"] += hes[k].T @ dl
            grads["out.b"] += dl.sum(axis=0)
            dhe = dhe + dl @ p["out.W"].T
            _, dhe = self.edge_cell.backward(dhe, e_caches[k], g_edge)
        dpre = dhe * (1.0 - he0 * he0)
        grads["h2e.W"] += Hf.T @ dpre
        grads["h2e.b"] += dpre.sum(axis=0)
        dH = (dpre @ p["h2e.W"].T).reshape(N, B, Hg)
        dh = np.zeros((B, Hg), dtype=DTYPE)
        for t in reversed(range(N)):
            de, dh = self.graph_cell.backward(dH[t] + dh, g_caches[t], g_graph)
            da = de * (pre_in[t] > 0)
            grads["in.W"] += X[t].T @ da
            grads["in.b"] += da.sum(axis=0)
        return loss, grads, {"count": float(Mf.sum()), "correct": correct}

    # -- generation -------------------------------------------------------------

    def generate(
        self, samples: Sequence[GraphSample], rng: np.random.Generator | None = None
    ) -> list[np.ndarray]:
        """Autoregressive adjacency matrices for each sample's ordering and features.

        Edges are kept when their probability is >= 0.5, or sampled when an
        ``rng`` is given. Nodes beyond the training width only predict links
        to the ``max_prev`` most recent nodes.
        """
        p = self.params
        P, F = self.config.max_prev, self.config.feature_dim
        B = len(samples)
        N = max(s.size for s in samples)
        if N - 1 > P:
            log.warning("networks of up to %d nodes exceed training width %d; truncating edge prefixes", N, P + 1)
        sizes = np.array([s.size for s in samples])
        feats = np.zeros((N, B, F), dtype=DTYPE)
        if not self.config.feature_blind:
            for b, s in enumerate(samples):
                feats[: s.size, b] = self.standardize(s.features)
        adj = np.zeros((B, N, N), dtype=np.int8)
        h = np.zeros((B, self.config.graph_hidden), dtype=DTYPE)
        s_prev = np.full((B, P), SOS)
        for t in range(N):
            x = np.concatenate([s_prev, feats[t]], axis=1)
            e = np.maximum(x @ p["in.W"] + p["in.b"], 0.0)
            h, _ = self.graph_cell.forward(e, h)
            s_prev = np.zeros((B, P), dtype=DTYPE)
            if t == 0:
                continue
            lo = max(0, t - P)
            he = np.tanh(h @ p["h2e.W"] + p["h2e.b"])
            xe = np.full((B, 1), SOS)
            for k, j in enumerate(range(lo, t)):
                he, _ = self.edge_cell.forward(xe, he)
                prob = sigmoid(he @ p["out.W"] + p["out.b"])[:, 0]
                if rng is None:
                    bit = (prob >= 0.5).astype(np.int8)
                else:
                    bit = (rng.random(B) < prob).astype(np.int8)
                bit = np.where(t < sizes, bit, 0).astype(np.int8)
                adj[:, j, t] = adj[:, t, j] = bit
                s_prev[:, k] = bit
                xe = bit.astype(DTYPE).reshape(-1, 1)
        check_finite("generate", h)
        return [adj[b, : s.size, : s.size].copy() for b, s in enumerate(samples)]

    def infer(self, samples: Sequence[GraphSample], force: bool = False) -> list[CollaborationMatrix]:
        if not self.trained and not force:
            raise RuntimeError("model parameters are untrained")
        mats = self.generate(samples) if samples else []
        return [CollaborationMatrix(s.ordering, m) for s, m in zip(samples, mats)]

    # -- persistence ------------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "config": asdict(self.config),
            "trained": self.trained,
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
        }
        save_params(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "HinRnn":
        params, meta = load_params(path)
        model = cls(HinRnnConfig(**meta["config"]), params)
        model.trained = bool(meta.get("trained", False))
        if "feature_mean" in meta:
            model.feature_mean = np.asarray(meta["feature_mean"], dtype=DTYPE)
            model.feature_scale = np.asarray(meta["feature_scale"], dtype=DTYPE)
        return model


def train_hinrnn(
    samples: Sequence[GraphSample],
    config: HinRnnConfig,
    learning_rate: float = 0.003,
    epochs: int = 3000,
    batch_size: int = 32,
    seed: int = 0,
    callback: Callable[[int, HinRnn], dict] | None = None,
    eval_every: int = 0,
) -> tuple[HinRnn, list[dict]]:
    """Joint Adam training of both GRUs.

    ``config.max_prev`` is reset to the largest training network size minus
    one, and node features are standardized with the training mean and
    spread (reviewer vectors differ only slightly between reviewers). Returns
    the model and per-epoch rows (``epoch``, ``loss``,
    ``accuracy`` = teacher-forced edge-slot accuracy); every ``eval_every``
    epochs the ``callback`` result is merged into the row.
    """
    if not samples:
        raise ValueError("no training networks")
    small = [s.group_id for s in samples if s.size < 2]
    if small:
        raise ValueError(f"networks with fewer than 2 reviewers: {', '.join(small)}")
    config.max_prev = max(s.size for s in samples) - 1
    model = HinRnn(config, seed=seed)
    model.fit_standardizer(samples)
    opt = Optimizer("adam", learning_rate)
    rng = np.random.default_rng(seed + 1)
    samples = list(samples)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(samples))
        tot_loss = tot_count = tot_correct = 0.0
        for start in range(0, len(samples), batch_size):
            batch = [samples[i] for i in order[start : start + batch_size]]
            loss, _, stats = model.loss_and_grads(batch)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            opt.step({"all": model.flat}, {"all": model._grad_flat})
            tot_loss += loss * stats["count"]
            tot_count += stats["count"]
            tot_correct += stats["correct"]
        row = {"epoch": epoch, "loss": tot_loss / max(tot_count, 1.0), "accuracy": tot_correct / max(tot_count, 1.0)}
        if callback is not None and eval_every and (epoch % eval_every == 0 or epoch == epochs):
            model.trained = True
            row.update(callback(epoch, model))
        history.append(row)
    model.trained = True
    return model, history
