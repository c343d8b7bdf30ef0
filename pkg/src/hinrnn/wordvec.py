"""CBOW word embeddings trained with negative sampling, plus a text loader."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import DTYPE, sigmoid

log = logging.getLogger(__name__)

END = "END"
DEFAULT_DIM = 100


@dataclass
class EmbeddingTable:
    vocab: dict[str, int]
    vectors: np.ndarray
    _fallback: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.vectors = np.array(self.vectors, dtype=DTYPE)
        if END not in self.vocab:
            self.vocab[END] = len(self.vocab)
            self.vectors = np.vstack([self.vectors, np.zeros((1, self.vectors.shape[1]), dtype=DTYPE)])
        # padding must not contribute to convolution sums
        self.vectors[self.vocab[END]] = 0.0
        self.vectors.setflags(write=False)
        norms = np.linalg.norm(np.delete(self.vectors, self.vocab[END], axis=0), axis=1)
        self._mean_norm = float(norms.mean()) if norms.size else 0.0

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.vocab)

    def __contains__(self, word: str) -> bool:
        return word in self.vocab

    def lookup(self, word: str) -> np.ndarray:
        """Total lookup: unseen words get a fixed hash-seeded vector."""
        idx = self.vocab.get(word)
        if idx is not None:
            return self.vectors[idx]
        vec = self._fallback.get(word)
        if vec is None:
            seed = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "little")
            vec = np.random.default_rng(seed).standard_normal(self.dim)
            norm = np.linalg.norm(vec)
            vec = vec * (self._mean_norm / norm) if norm > 0 else vec
            vec.setflags(write=False)
            self._fallback[word] = vec
        return vec

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim), dtype=DTYPE)
        return np.stack([self.lookup(t) for t in tokens])


def _build_vocab(sentences: Sequence[Sequence[str]], min_count: int) -> tuple[list[str], np.ndarray]:
    counts: dict[str, int] = {}
    for s in sentences:
        for t in s:
            counts[t] = counts.get(t, 0) + 1
    words = sorted((w for w, c in counts.items() if c >= min_count and w != END), key=lambda w: (-counts[w], w))
    return words, np.array([counts[w] for w in words], dtype=DTYPE)


def _cbow_examples(sentences, index: dict[str, int], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    for s in sentences:
        ids = [index[t] for t in s if t in index]
        for t, c in enumerate(ids):
            ctx = [ids[j] for j in range(max(0, t - window), min(len(ids), t + window + 1)) if j != t]
            if not ctx:
                continue
            centers.append(c)
            contexts.append(ctx + [-1] * (2 * window - len(ctx)))
    return np.asarray(centers, dtype=np.int64), np.asarray(contexts, dtype=np.int64).reshape(-1, 2 * window)


def train_cbow(
    sentences: Sequence[Sequence[str]],
    dim: int = DEFAULT_DIM,
    window: int = 2,
    batch_size: int = 256,
    epochs: int = 5,
    negatives: int = 5,
    learning_rate: float = 0.05,
    min_count: int = 1,
    seed: int = 0,
) -> tuple[EmbeddingTable, list[float]]:
    """Train CBOW (mean of context vectors) with negative sampling.

    Returns the table and the mean loss of each epoch. The learning rate decays
    linearly towards zero over all batches, as in word2vec.
    """
    words, counts = _build_vocab(sentences, min_count)
    if not words:
        raise ValueError("empty vocabulary")
    index = {w: i for i, w in enumerate(words)}
    centers, contexts = _cbow_examples(sentences, index, window)
    rng = np.random.default_rng(seed)
    V = len(words)
    w_in = rng.uniform(-0.5 / dim, 0.5 / dim, size=(V, dim)).astype(DTYPE)
    w_out = np.zeros((V, dim), dtype=DTYPE)
    noise = counts**0.75
    noise /= noise.sum()

    n = len(centers)
    losses: list[float] = []
    total_batches = max(1, epochs * -(-n // batch_size))
    done = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            lr = learning_rate * max(1e-4, 1.0 - done / total_batches)
            done += 1
            ctx = contexts[idx]
            mask = (ctx >= 0).astype(DTYPE)
            cnt = mask.sum(axis=1, keepdims=True)
            h = (w_in[np.where(ctx >= 0, ctx, 0)] * mask[..., None]).sum(axis=1) / cnt
            negs = rng.choice(V, size=(len(idx), negatives), p=noise)
            targets = np.concatenate([centers[idx, None], negs], axis=1)
            u = w_out[targets]
            scores = np.einsum("bd,bkd->bk", h, u)
            labels = np.zeros_like(scores)
            labels[:, 0] = 1.0
            p = sigmoid(scores)
            eps = 1e-12
            loss = -(labels * np.log(p + eps) + (1 - labels) * np.log(1 - p + eps)).sum(axis=1)
            epoch_loss += float(loss.sum())
            seen += len(idx)
            g = p - labels
            du = g[..., None] * h[:, None, :]
            dh = np.einsum("bk,bkd->bd", g, u) / cnt
            np.add.at(w_out, targets, -lr * du)
            dctx = np.broadcast_to(dh[:, None, :], ctx.shape + (dim,)) * mask[..., None]
            np.add.at(w_in, np.where(ctx >= 0, ctx, 0), -lr * dctx)
        losses.append(epoch_loss / max(seen, 1))
        log.debug("cbow epoch %d loss %.4f", len(losses), losses[-1])
    return EmbeddingTable(dict(index), w_in), losses


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """``dim=D`` header, then ``word v1 ... vD`` per line. ``END`` is implicit."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"dim={table.dim}\n")
        for word, i in sorted(table.vocab.items(), key=lambda kv: kv[1]):
            if word == END:
                continue
            fh.write(word + " " + " ".join(repr(float(v)) for v in table.vectors[i]) + "\n")


def load_embeddings(path: str | Path) -> EmbeddingTable:
    declared: int | None = None
    vocab: dict[str, int] = {}
    rows: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if lineno == 1 and parts[0].startswith("dim="):
                declared = int(parts[0][4:])
                continue
            word, values = parts[0], parts[1:]
            dim = declared if declared is not None else (len(rows[0]) if rows else len(values))
            if len(values) != dim:
                raise ValueError(f"{path}:{lineno}: word {word!r} has {len(values)} values, expected {dim}")
            if word in vocab:
                raise ValueError(f"{path}:{lineno}: duplicate word {word!r}")
            if word == END:
                continue
            vocab[word] = len(rows)
            rows.append([float(v) for v in values])
    if not rows and declared is None:
        raise ValueError(f"{path}: no embeddings found")
    vectors = np.asarray(rows, dtype=DTYPE).reshape(len(rows), declared if declared is not None else len(rows[0]))
    return EmbeddingTable(vocab, vectors)
