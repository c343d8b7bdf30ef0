"""Reviewer vectors: trigram CNN over word embeddings, max-pooled, plus negative ratio."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import FRAUD, GENUINE, Corpus, Review
from .nn import DTYPE, Optimizer, Params, cross_entropy, cross_entropy_grad, softmax, uniform_init
from .wordvec import END, EmbeddingTable

log = logging.getLogger(__name__)

MAX_REVIEW_WORDS = 400
CLASSES = (GENUINE, FRAUD)  # logit index 1 is the fraudster class


class NoUsableReviews(ValueError):
    pass


def trigram_conv(sentence: np.ndarray, taps: np.ndarray, bias: float) -> np.ndarray:
    """Depthwise 3-tap convolution, stride 1: ``H_i = w1 e_i + w2 e_{i+1} + w3 e_{i+2} + b``."""
    sentence = np.asarray(sentence, dtype=DTYPE)
    if sentence.shape[0] < 3:
        raise ValueError("trigram_conv needs at least 3 positions; pad with END first")
    if np.shape(taps) != (3,):
        raise ValueError("trigram filter must have exactly 3 taps")
    return taps[0] * sentence[:-2] + taps[1] * sentence[1:-1] + taps[2] * sentence[2:] + bias


def sentence_embed(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=DTYPE)
    if h.shape[0] == 0:
        raise ValueError("empty convolution output")
    return np.tanh(h.mean(axis=0))


def reviewer_embed(sentences: Sequence[np.ndarray]) -> np.ndarray:
    if len(sentences) == 0:
        raise NoUsableReviews("reviewer has no sentences")
    return np.max(np.stack(sentences), axis=0)


def negative_ratio(ratings: Iterable[int]) -> float:
    ratings = list(ratings)
    if not ratings:
        raise ValueError("negative_ratio of an empty rating list")
    for r in ratings:
        if r not in (1, 2, 3, 4, 5):
            raise ValueError(f"rating {r!r} not in 1..5")
    return sum(1 for r in ratings if r <= 2) / len(ratings)


def pad_tokens(tokens: Sequence[str]) -> list[str]:
    return list(tokens) + [END] * max(0, 3 - len(tokens))


@dataclass
class ReviewerInput:
    """Precomputed convolution inputs for one reviewer.

    ``window_means[s, k]`` is the mean, over the retained trigram windows of
    sentence ``s``, of the ``k``-th word in the window. The sentence's
    pre-activation is then ``sum_k w_k * window_means[s, k] + b``.
    """

    window_means: np.ndarray  # (S, 3, D)
    ratings: list[int]


def usable_sentences(reviews: Sequence[Review], max_words: int = MAX_REVIEW_WORDS) -> list[list[str]]:
    out = []
    for r in reviews:
        if len(r.tokens) > max_words:
            continue
        out.extend(r.sentences())
    return out


def prepare_reviewer(reviews: Sequence[Review], table: EmbeddingTable, max_words: int = MAX_REVIEW_WORDS) -> ReviewerInput:
    sents = usable_sentences(reviews, max_words)
    if not sents:
        raise NoUsableReviews("no review within the length limit")
    means = np.empty((len(sents), 3, table.dim), dtype=DTYPE)
    for s, tokens in enumerate(sents):
        e = table.embed(pad_tokens(tokens))
        n_win = e.shape[0] - 2
        for k in range(3):
            means[s, k] = e[k : k + n_win].mean(axis=0)
    return ReviewerInput(means, [r.rating for r in reviews])


def init_encoder(dim: int, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    return {
        "conv_w": uniform_init(rng, (3,), 3),
        "conv_b": uniform_init(rng, (1,), 3),
        "head_W": uniform_init(rng, (dim, 2), dim),
        "head_b": uniform_init(rng, (2,), dim),
    }


def embed_forward(params: Params, inp: ReviewerInput) -> tuple[np.ndarray, tuple]:
    pre = np.einsum("skd,k->sd", inp.window_means, params["conv_w"]) + params["conv_b"][0]
    sent = np.tanh(pre)
    arg = sent.argmax(axis=0)
    emb = sent[arg, np.arange(sent.shape[1])]
    return emb, (sent, arg)


def embed_backward(params: Params, inp: ReviewerInput, d_emb: np.ndarray, cache: tuple, grads: Params) -> None:
    sent, arg = cache
    d_sent = np.zeros_like(sent)
    d_sent[arg, np.arange(sent.shape[1])] = d_emb
    d_pre = d_sent * (1.0 - sent * sent)
    grads["conv_w"] += np.einsum("sd,skd->k", d_pre, inp.window_means)
    grads["conv_b"] += d_pre.sum()


def encoder_loss(params: Params, inp: ReviewerInput, label: int, weight: float = 1.0) -> tuple[float, Params, np.ndarray]:
    """Weighted cross-entropy of the reviewer classifier; returns (loss, grads, logits)."""
    emb, cache = embed_forward(params, inp)
    logits = emb @ params["head_W"] + params["head_b"]
    loss = weight * cross_entropy(logits, label)
    d_logits = weight * cross_entropy_grad(logits, label)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["head_W"] += np.outer(emb, d_logits)
    grads["head_b"] += d_logits
    embed_backward(params, inp, params["head_W"] @ d_logits, cache, grads)
    return loss, grads, logits


def train_encoder(
    inputs: dict[str, ReviewerInput],
    labels: dict[str, str],
    dim: int,
    learning_rate: float = 1e-4,
    epochs: int = 30,
    seed: int = 0,
) -> tuple[Params, list[dict]]:
    """Per-reviewer Adam updates with inverse-frequency class weights.

    Returns the parameters and one history row per epoch
    (``epoch``, ``loss``, ``accuracy``).
    """
    missing = sorted(r for r in inputs if r not in labels)
    if missing:
        raise ValueError(f"reviewers without labels: {', '.join(missing)}")
    ids = sorted(inputs)
    if not ids:
        raise ValueError("no reviewers to train on")
    y = np.array([CLASSES.index(labels[r]) for r in ids])
    counts = np.bincount(y, minlength=2)
    weights = np.where(counts > 0, len(y) / (2.0 * np.maximum(counts, 1)), 0.0)
    params = init_encoder(dim, seed)
    opt = Optimizer("adam", learning_rate)
    rng = np.random.default_rng(seed + 1)
    history = []
    for epoch in range(1, epochs + 1):
        total, correct = 0.0, 0
        for i in rng.permutation(len(ids)):
            loss, grads, logits = encoder_loss(params, inputs[ids[i]], int(y[i]), float(weights[y[i]]))
            total += loss
            correct += int(np.argmax(logits) == y[i])
            opt.step(params, grads)
        history.append({"epoch": epoch, "loss": total / len(ids), "accuracy": correct / len(ids)})
        log.debug("encoder epoch %d loss %.4f acc %.3f", epoch, history[-1]["loss"], history[-1]["accuracy"])
    return params, history


def predict_reviewer(params: Params, inp: ReviewerInput) -> np.ndarray:
    emb, _ = embed_forward(params, inp)
    return softmax(emb @ params["head_W"] + params["head_b"])


def reviewer_vector(reviews: Sequence[Review], table: EmbeddingTable, params: Params) -> np.ndarray:
    """Max-pooled sentence embeddings concatenated with the negative ratio."""
    inp = prepare_reviewer(reviews, table)
    emb, _ = embed_forward(params, inp)
    return np.concatenate([emb, [negative_ratio(inp.ratings)]])


def encode_reviewers(corpus: Corpus, table: EmbeddingTable, params: Params) -> tuple[dict[str, np.ndarray], list[str]]:
    vectors: dict[str, np.ndarray] = {}
    dropped: list[str] = []
    for rid, reviews in sorted(corpus.by_reviewer().items()):
        try:
            vectors[rid] = reviewer_vector(reviews, table, params)
        except NoUsableReviews:
            log.warning("dropping reviewer %s: no usable reviews", rid)
            dropped.append(rid)
    return vectors, dropped
