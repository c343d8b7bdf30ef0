"""Small float64 neural kernel: dense and GRU layers, losses, optimizers.

Every layer is a pair of functions, a forward pass that returns its output
plus a cache, and a backward pass that consumes the cache. Tensors are plain
``numpy.ndarray`` objects; parameters live in ``dict[str, ndarray]`` maps so
that optimizers and checkpoints can address them by name.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

DTYPE = np.float64
PROB_EPS = 1e-7
CHECKPOINT_FORMAT = "hinrnn-params"
CHECKPOINT_VERSION = 1

Params = dict[str, np.ndarray]


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {name}")


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    s = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-s, s, size=shape).astype(DTYPE)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- dense -----------------------------------------------------------------

def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``y = x @ W + b`` over the last axis of ``x``."""
    x = np.asarray(x, dtype=DTYPE)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} != ({weights.shape[1]},)")
    return x @ weights + bias


def dense_backward(
    dy: np.ndarray, x: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(dx, dW, db)``; leading axes of ``x`` are treated as batch."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = dy @ weights.T
    return dx, x2.T @ dy2, dy2.sum(axis=0)


# --- GRU -------------------------------------------------------------------

_GATES = ("z", "r", "n")


@dataclass
class GruCell:
    """Cho-style GRU.

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    n = tanh(x W_n + (r * h) U_n + b_n)
    h' = (1 - z) * n + z * h
    """

    input_dim: int
    hidden_dim: int
    params: Params = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.input_dim <= 0 or self.hidden_dim <= 0:
            raise ShapeError("GRU dimensions must be positive")
        if not self.params:
            self.params = {k: np.zeros(s, dtype=DTYPE) for k, s in self.shapes().items()}
        for k, s in self.shapes().items():
            if self.params[k].shape != s:
                raise ShapeError(f"GRU param {k} has shape {self.params[k].shape}, expected {s}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for g in _GATES:
            shapes[f"W_{g}"] = (self.input_dim, self.hidden_dim)
            shapes[f"U_{g}"] = (self.hidden_dim, self.hidden_dim)
            shapes[f"b_{g}"] = (self.hidden_dim,)
        return shapes

    @classmethod
    def initialized(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "GruCell":
        cell = cls(input_dim, hidden_dim)
        for k, s in cell.shapes().items():
            cell.params[k] = uniform_init(rng, s, hidden_dim)
        return cell

    def forward(self, x: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, tuple]:
        p = self.params
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"GRU input width {x.shape[-1]} != {self.input_dim}")
        if h.shape[-1] != self.hidden_dim:
            raise ShapeError(f"GRU hidden width {h.shape[-1]} != {self.hidden_dim}")
        z = sigmoid(x @ p["W_z"] + h @ p["U_z"] + p["b_z"])
        r = sigmoid(x @ p["W_r"] + h @ p["U_r"] + p["b_r"])
        rh = r * h
        n = np.tanh(x @ p["W_n"] + rh @ p["U_n"] + p["b_n"])
        h_new = (1.0 - z) * n + z * h
        return h_new, (x, h, z, r, rh, n)

    def backward(self, dh_new: np.ndarray, cache: tuple, grads: Params) -> tuple[np.ndarray, np.ndarray]:
        """Accumulates parameter gradients into ``grads``; returns ``(dx, dh_prev)``."""
        p = self.params
        x, h, z, r, rh, n = cache
        dz = dh_new * (h - n)
        dn = dh_new * (1.0 - z)
        dh = dh_new * z
        dn_pre = dn * (1.0 - n * n)
        grads["W_n"] += x.T @ dn_pre
        grads["U_n"] += rh.T @ dn_pre
        grads["b_n"] += dn_pre.sum(axis=0)
        dx = dn_pre @ p["W_n"].T
        drh = dn_pre @ p["U_n"].T
        dh += drh * r
        dr_pre = drh * h * r * (1.0 - r)
        dz_pre = dz * z * (1.0 - z)
        grads["W_r"] += x.T @ dr_pre
        grads["U_r"] += h.T @ dr_pre
        grads["b_r"] += dr_pre.sum(axis=0)
        grads["W_z"] += x.T @ dz_pre
        grads["U_z"] += h.T @ dz_pre
        grads["b_z"] += dz_pre.sum(axis=0)
        dx += dr_pre @ p["W_r"].T + dz_pre @ p["W_z"].T
        dh += dr_pre @ p["U_r"].T + dz_pre @ p["U_z"].T
        return dx, dh

    def zero_grads(self) -> Params:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def gru_step(cell: GruCell, x: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """One GRU transition; accepts single vectors or batches (rows)."""
    x = np.asarray(x, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    single = x.ndim == 1
    h_new, _ = cell.forward(np.atleast_2d(x), np.atleast_2d(h_prev))
    return h_new[0] if single else h_new


# --- losses ----------------------------------------------------------------

def cross_entropy(logits: np.ndarray, label: int) -> float:
    logits = np.asarray(logits, dtype=DTYPE)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    z = logits - logits.max()
    return float(-(z[label] - math.log(np.exp(z).sum())))


def cross_entropy_grad(logits: np.ndarray, label: int) -> np.ndarray:
    g = softmax(np.asarray(logits, dtype=DTYPE))
    g[label] -= 1.0
    return g


def binary_cross_entropy(p, y) -> np.ndarray | float:
    p = np.asarray(p, dtype=DTYPE)
    if np.any(~np.isfinite(p)) or np.any((p < 0.0) | (p > 1.0)):
        raise NumericError("probability outside [0, 1]")
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=DTYPE)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise BCE on ``sigmoid(logits)`` and its gradient w.r.t. the logits.

    The probability is clamped to ``[PROB_EPS, 1 - PROB_EPS]``; inside the
    window the gradient is the usual ``p - y``, outside it is zero.
    """
    p = sigmoid(logits)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(targets * np.log(pc) + (1.0 - targets) * np.log1p(-pc))
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    grad = np.where(inside, p - targets, 0.0)
    return loss, grad


# --- optimizers ------------------------------------------------------------

@dataclass
class Optimizer:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: Params = field(default_factory=dict, repr=False)
    _v: Params = field(default_factory=dict, repr=False)
    _t: int = field(default=0, repr=False)
    _buf: Params = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")

    def step(self, params: Params, grads: Params) -> None:
        """Updates ``params`` in place."""
        self._t += 1
        for name in sorted(params):
            p, g = params[name], grads[name]
            if p.shape != g.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
            if self.kind == "sgd":
                p -= self.learning_rate * g
                continue
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
                self._buf[name] = np.empty_like(p)
            m, v, buf = self._m[name], self._v[name], self._buf[name]
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=buf)
            m += buf
            v *= self.beta2
            np.multiply(g, g, out=buf)
            buf *= 1.0 - self.beta2
            v += buf
            # bias-corrected update, written in place to avoid temporaries
            np.sqrt(v, out=buf)
            buf *= 1.0 / math.sqrt(1.0 - self.beta2**self._t)
            buf += self.eps
            np.divide(m, buf, out=buf)
            buf *= self.learning_rate / (1.0 - self.beta1**self._t)
            p -= buf


def optimizer_step(params: Params, grads: Params, opt: Optimizer) -> Params:
    opt.step(params, grads)
    return params


def flat_buffer(params: Params) -> tuple[np.ndarray, Params]:
    """Copies ``params`` into one contiguous vector; returns it and named views into it."""
    names = sorted(params)
    flat = np.concatenate([params[k].reshape(-1) for k in names]).astype(DTYPE)
    views, offset = {}, 0
    for k in names:
        size = params[k].size
        views[k] = flat[offset : offset + size].reshape(params[k].shape)
        offset += size
    return flat, views


# --- gradient checking -----------------------------------------------------

def grad_check(
    loss_and_grads: Callable[[Params], tuple[float, Params]],
    params: Params,
    seed: int = 0,
    eps: float = 1e-5,
    max_entries: int | None = None,
) -> float:
    """Max over checked entries of ``|analytic - numeric| / max(1, |numeric|)``.

    Uses central differences. With ``max_entries`` set, that many entries per
    parameter are sampled (seeded) instead of checking every one.
    """
    _, analytic = loss_and_grads(params)
    analytic = {k: v.copy() for k, v in analytic.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        ga = analytic[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            lp, _ = loss_and_grads(params)
            flat[i] = old - eps
            lm, _ = loss_and_grads(params)
            flat[i] = old
            num = (lp - lm) / (2.0 * eps)
            worst = max(worst, abs(ga[i] - num) / max(1.0, abs(num)))
    return worst


# --- checkpoints -----------------------------------------------------------

def save_params(path: str | Path, params: Params, meta: dict | None = None) -> None:
    """Writes a JSON checkpoint.

    Layout::

        {"format": "hinrnn-params", "version": 1, "meta": {...},
         "params": {name: {"shape": [...], "data": [row-major floats]}}}

    Floats are written with ``repr`` precision so reloading is bit-exact.
    Parameter names are sorted, so identical params give identical bytes.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            k: {"shape": list(params[k].shape), "data": [float(v) for v in params[k].reshape(-1)]}
            for k in sorted(params)
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> tuple[Params, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params: Params = {}
    for k, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=DTYPE)
        if data.size != math.prod(shape):
            raise ShapeError(f"{path}: {k} holds {data.size} values for shape {shape}")
        params[k] = data.reshape(shape)
    return params, doc.get("meta", {})
