"""Frozen-representation evaluation: k-NN, linear probe, spectrum diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .objectives import LossConfig


@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    n: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "n": self.n,
            "meta": self.meta,
        }


def _result(pred: np.ndarray, truth: np.ndarray, **meta) -> ProbeResult:
    correct = pred == truth
    per_class = {int(c): float(correct[truth == c].mean()) for c in np.unique(truth)}
    return ProbeResult(int(correct.sum()) / len(truth), per_class, len(truth), meta)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def knn_predict(train_x, train_y, test_x, k: int = 5, chunk: int = 1024) -> np.ndarray:
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    if len(train_x) == 0:
        raise ContractError("knn_eval: empty training set")
    if not 1 <= k <= len(train_x):
        raise ContractError(f"knn_eval: k={k} must lie in [1, {len(train_x)}]")
    tr = _unit_rows(train_x)
    te = _unit_rows(np.asarray(test_x, dtype=np.float64))
    out = np.empty(len(te), dtype=train_y.dtype)
    for start in range(0, len(te), chunk):
        sims = te[start:start + chunk] @ tr.T
        # stable sort: equal similarities resolve to the lower training index
        nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        for r, row in enumerate(nearest):
            votes = train_y[row]
            labels, counts = np.unique(votes, return_counts=True)
            tied = set(labels[counts == counts.max()])
            # ties go to the tied class whose member ranks nearest
            out[start + r] = next(v for v in votes if v in tied)
    return out


def knn_eval(train_x, train_y, test_x, test_y, k: int = 5) -> ProbeResult:
    """Cosine k-nearest-neighbour majority vote."""
    pred = knn_predict(train_x, train_y, test_x, k)
    return _result(pred, np.asarray(test_y), k=k)


def linear_probe(train_x, train_y, test_x, test_y, epochs: int = 500, lr: float = 0.1,
                 seed: int = 0, init_scale: float = 0.0) -> ProbeResult:
    """Multinomial logistic regression by full-batch gradient descent on standardized features."""
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    classes = np.unique(train_y)
    if len(classes) < 2:
        raise ContractError("linear_probe: training labels contain a single class")
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xs = (train_x - mu) / sd
    ys = np.searchsorted(classes, train_y)
    onehot = np.eye(len(classes))[ys]
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(xs.shape[1], len(classes))) * init_scale
    b = np.zeros(len(classes))
    n = len(xs)
    for _ in range(epochs):
        logits = xs @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        prob = np.exp(logits)
        prob /= prob.sum(axis=1, keepdims=True)
        g = (prob - onehot) / n
        w -= lr * (xs.T @ g)
        b -= lr * g.sum(axis=0)
    te = (np.asarray(test_x, dtype=np.float64) - mu) / sd
    pred = classes[np.argmax(te @ w + b, axis=1)]
    return _result(pred, np.asarray(test_y), epochs=epochs, lr=lr)


def effective_rank(z: np.ndarray) -> float:
    """exp(entropy of the normalized singular values); 0.0 for an all-zero matrix."""
    s = np.linalg.svd(np.asarray(z, dtype=np.float64), compute_uv=False)
    total = s.sum()
    if total <= 0:
        return 0.0
    p = s[s > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def spectrum_diagnostics(z: np.ndarray, cfg: LossConfig | None = None) -> dict:
    z = T.as_matrix(z)
    if z.size == 0:
        raise ContractError("spectrum_diagnostics: empty matrix")
    cfg = cfg or LossConfig()
    mu, lam = cfg.coding_coefficients(*z.shape)
    h = mu * T.power_series_trace(T.const(z @ z.T), cfg.taylor_m, lam).item()
    return {"coding_entropy": h, "effective_rank": effective_rank(z)}
