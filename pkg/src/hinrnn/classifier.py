"""Group labelling: deviant pruning, mean pooling, a dense softmax head, and P/R/F1."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .corpus import FRAUD, GENUINE
from .encoder import CLASSES
from .graph_model import CollaborationMatrix
from .nn import DTYPE, Optimizer, Params, cross_entropy, cross_entropy_grad, softmax, uniform_init

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Group:
    group_id: str
    reviewer_ids: tuple[str, ...]
    label: str | None = None

    def __post_init__(self) -> None:
        if len(self.reviewer_ids) < 2:
            raise ValueError(f"{self.group_id}: a group needs at least 2 reviewers")
        if self.label is not None and self.label not in CLASSES:
            raise ValueError(f"{self.group_id}: bad label {self.label!r}")


def remove_deviants(group: Group, matrix: CollaborationMatrix) -> Group:
    """Drops every member whose degree equals the group minimum.

    Nothing is removed when all degrees are equal or when fewer than two
    members would remain.
    """
    if set(group.reviewer_ids) != set(matrix.ordering):
        raise ValueError(f"{group.group_id}: group and matrix cover different reviewers")
    deg = matrix.degrees()
    lo = min(deg.values())
    hi = max(deg.values())
    if lo == hi:
        return group
    kept = tuple(r for r in group.reviewer_ids if deg[r] > lo)
    if len(kept) < 2:
        return group
    return Group(group.group_id, kept, group.label)


def group_vector(reviewer_ids: Sequence[str], vectors: Mapping[str, np.ndarray]) -> np.ndarray:
    if not reviewer_ids:
        raise ValueError("empty group")
    for r in reviewer_ids:
        if r not in vectors:
            raise KeyError(f"no reviewer vector for {r}")
    # sorted so the float sum does not depend on member order; shifting by the
    # first row makes the mean of identical vectors exact
    rows = np.stack([np.asarray(vectors[r], dtype=DTYPE) for r in sorted(reviewer_ids)])
    return rows[0] + (rows - rows[0]).mean(axis=0)


# --- head ------------------------------------------------------------------

def init_head(dim: int, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    return {
        "W": uniform_init(rng, (dim, 2), dim),
        "b": uniform_init(rng, (2,), dim),
        "mean": np.zeros(dim, dtype=DTYPE),
        "scale": np.ones(dim, dtype=DTYPE),
    }


def standardize(X: np.ndarray, head: Params) -> np.ndarray:
    return (np.asarray(X, dtype=DTYPE) - head["mean"]) / head["scale"]


def head_loss(params: Params, X: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> tuple[float, Params]:
    """Mean (optionally class-weighted) cross-entropy over rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=DTYPE)
    logits = X @ params["W"] + params["b"]
    total = 0.0
    d = np.zeros_like(logits)
    for i, label in enumerate(y):
        total += w[i] * cross_entropy(logits[i], int(label))
        d[i] = w[i] * cross_entropy_grad(logits[i], int(label))
    n = len(y)
    d /= n
    return total / n, {"W": X.T @ d, "b": d.sum(axis=0)}


def train_head(
    X: np.ndarray,
    labels: Sequence[str],
    learning_rate: float = 0.01,
    epochs: int = 300,
    seed: int = 0,
) -> tuple[Params, list[dict]]:
    """Full-batch Adam on a 2-way dense softmax head with inverse-frequency class weights.

    Inputs are standardized with the training mean and spread, which are kept
    in the returned params (``mean``, ``scale``) and are not trained. Group
    vectors differ from one another only slightly along most dimensions, so
    without this the head barely moves in a few hundred steps. With only one
    class present the head is set to always predict it.
    """
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    if len(labels) != X.shape[0]:
        raise ValueError(f"{X.shape[0]} vectors but {len(labels)} labels")
    if not len(labels):
        raise ValueError("no training groups")
    y = np.array([CLASSES.index(l) for l in labels])
    params = init_head(X.shape[1], seed)
    counts = np.bincount(y, minlength=2)
    if (counts == 0).any():
        majority = int(np.argmax(counts))
        log.warning("training groups are all %s; using a constant head", CLASSES[majority])
        params["W"][:] = 0.0
        params["b"][:] = 0.0
        params["b"][majority] = 1.0
        return params, []
    params["mean"] = X.mean(axis=0)
    spread = X.std(axis=0)
    params["scale"] = np.where(spread > 1e-12, spread, 1.0)
    Z = standardize(X, params)
    weights = (len(y) / (2.0 * counts))[y]
    opt = Optimizer("adam", learning_rate)
    trainable = {"W": params["W"], "b": params["b"]}
    history = []
    for epoch in range(1, epochs + 1):
        loss, grads = head_loss(trainable, Z, y, weights)
        acc = float(np.mean(np.argmax(Z @ params["W"] + params["b"], axis=1) == y))
        opt.step(trainable, grads)
        history.append({"epoch": epoch, "loss": loss, "accuracy": acc})
    return params, history


def classify(vector: np.ndarray, head: Params) -> tuple[str, float]:
    """Label and fraudster probability; an exact tie goes to genuine."""
    logits = standardize(vector, head) @ head["W"] + head["b"]
    fraud = CLASSES.index(FRAUD)
    label = FRAUD if logits[fraud] > logits[1 - fraud] else GENUINE
    return label, float(softmax(logits)[fraud])


# --- metrics ---------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
        }


def confusion(predicted: Sequence[str], gold: Sequence[str]) -> tuple[int, int, int, int]:
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predictions for {len(gold)} gold labels")
    tp = fp = fn = tn = 0
    for p, g in zip(predicted, gold):
        if p not in CLASSES or g not in CLASSES:
            raise ValueError(f"bad label pair ({p!r}, {g!r})")
        if p == FRAUD:
            tp, fp = (tp + 1, fp) if g == FRAUD else (tp, fp + 1)
        else:
            fn, tn = (fn + 1, tn) if g == FRAUD else (fn, tn + 1)
    return tp, fp, fn, tn


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int = 0) -> Metrics:
    """Fraudster is the positive class; an empty denominator gives 0."""
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f = 2 * p * r / (p + r) if p + r else Fraction(0)
    return Metrics(float(p), float(r), float(f), tp, fp, fn, tn)


def evaluate(predicted: Sequence[str], gold: Sequence[str]) -> Metrics:
    if not len(predicted):
        raise ValueError("nothing to evaluate")
    return metrics_from_counts(*confusion(predicted, gold))
