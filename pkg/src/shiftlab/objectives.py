"""Losses and statistics composed by the trainers.

Every probability fed to a logarithm is guarded by a single global EPS, and
each loss comes with an analytic gradient with respect to the probability
rows (chained through softmax by the trainers).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .nn import SourceModel, forward, softmax

EPS = 1e-6


@dataclass
class LossValue:
    value: float
    per_sample: np.ndarray | None = None


def _check_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ParameterError("probs must be a batch x K matrix")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(probs < 0):
        raise ParameterError("rows of probs must be probability vectors")
    return probs


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> LossValue:
    probs = _check_probs(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise ParameterError("labels must be a length-batch vector")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ParameterError("label out of range")
    picked = probs[np.arange(len(labels)), labels]
    per_sample = -np.log(picked + EPS)
    return LossValue(float(per_sample.mean()), per_sample)


def cross_entropy_probs_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d cross_entropy / d probs, mean-reduced over the batch."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    grad = np.zeros_like(probs)
    rows = np.arange(n)
    grad[rows, labels] = -1.0 / (probs[rows, labels] + EPS) / n
    return grad


def entropy_loss(probs: np.ndarray) -> LossValue:
    probs = _check_probs(probs)
    per_sample = -(probs * np.log(probs + EPS)).sum(axis=1)
    return LossValue(float(per_sample.mean()), per_sample)


def entropy_probs_grad(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    return -(np.log(probs + EPS) + probs / (probs + EPS)) / n


def diversity_loss(probs: np.ndarray) -> LossValue:
    """Negative entropy of the marginal prediction; minimized at uniform marginal."""
    probs = _check_probs(probs)
    marginal = probs.mean(axis=0)
    return LossValue(float((marginal * np.log(marginal + EPS)).sum()))


def diversity_probs_grad(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    marginal = probs.mean(axis=0)
    row = (np.log(marginal + EPS) + marginal / (marginal + EPS)) / n
    return np.broadcast_to(row, probs.shape).copy()


def im_loss(probs: np.ndarray) -> LossValue:
    """Information-maximization loss: entropy + diversity.

    per_sample carries the entropy term only; the diversity term is a
    batch-level statistic with no per-sample decomposition.
    """
    ent = entropy_loss(probs)
    div = diversity_loss(probs)
    return LossValue(ent.value + div.value, ent.per_sample)


def im_probs_grad(probs: np.ndarray) -> np.ndarray:
    return entropy_probs_grad(probs) + diversity_probs_grad(probs)


def softmax_probs_to_logits_grad(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Chain a gradient on softmax outputs back to the logits."""
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


@dataclass
class KernelSpec:
    """RBF kernel bandwidths on the squared-distance scale (sigma^2)."""

    bandwidths: list | None = None
    selection: str = "median-heuristic"

    def __post_init__(self) -> None:
        if self.selection not in ("explicit", "median-heuristic"):
            raise ParameterError(f"unknown bandwidth selection {self.selection!r}")
        if self.selection == "explicit":
            if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
                raise ParameterError("explicit kernel needs a non-empty list of positive bandwidths")

    def resolve(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        if self.selection == "explicit":
            return np.asarray(self.bandwidths, dtype=np.float64)
        pooled = np.vstack([X, Y])
        sq = _sq_dists(pooled, pooled)
        off_diag = sq[~np.eye(len(pooled), dtype=bool)]
        sigma2 = float(np.median(off_diag)) if off_diag.size else 1.0
        if sigma2 <= 0:
            sigma2 = 1.0
        return np.array([0.5 * sigma2, sigma2, 2.0 * sigma2])


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    aa = (A * A).sum(axis=1)[:, None]
    bb = (B * B).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (A @ B.T), 0.0)


def mmd_rbf(X: np.ndarray, Y: np.ndarray, kernel: KernelSpec | None = None) -> float:
    """Biased (V-statistic) multi-scale RBF MMD estimate."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ParameterError("X and Y must be 2-D with matching column count")
    if X.shape[0] < 1 or Y.shape[0] < 1:
        raise ParameterError("X and Y must be non-empty")
    kernel = kernel or KernelSpec()
    bandwidths = kernel.resolve(X, Y)
    dxx, dyy, dxy = _sq_dists(X, X), _sq_dists(Y, Y), _sq_dists(X, Y)
    total = 0.0
    for s2 in bandwidths:
        total += (
            np.exp(-dxx / (2.0 * s2)).mean()
            + np.exp(-dyy / (2.0 * s2)).mean()
            - 2.0 * np.exp(-dxy / (2.0 * s2)).mean()
        )
    return float(total / len(bandwidths))


def mmd_rbf_grad(
    X: np.ndarray, Y: np.ndarray, kernel: KernelSpec | None = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """MMD value plus analytic gradients with respect to X and Y rows.

    Bandwidths are treated as constants (the median heuristic is resolved
    once, before differentiating).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    kernel = kernel or KernelSpec()
    bandwidths = kernel.resolve(X, Y)
    n, m = X.shape[0], Y.shape[0]
    dxx, dyy, dxy = _sq_dists(X, X), _sq_dists(Y, Y), _sq_dists(X, Y)
    value = 0.0
    gx = np.zeros_like(X)
    gy = np.zeros_like(Y)
    for s2 in bandwidths:
        kxx = np.exp(-dxx / (2.0 * s2))
        kyy = np.exp(-dyy / (2.0 * s2))
        kxy = np.exp(-dxy / (2.0 * s2))
        value += kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
        # d/dx_p of mean(Kxx): x_p appears in row p and column p
        gx += (-2.0 / (n * n * s2)) * (kxx.sum(axis=1)[:, None] * X - kxx @ X)
        gx += (2.0 / (n * m * s2)) * (kxy.sum(axis=1)[:, None] * X - kxy @ Y)
        gy += (-2.0 / (m * m * s2)) * (kyy.sum(axis=1)[:, None] * Y - kyy @ Y)
        gy += (2.0 / (n * m * s2)) * (kxy.sum(axis=0)[:, None] * Y - kxy.T @ X)
    nb = len(bandwidths)
    return float(value / nb), gx / nb, gy / nb


def weighted_ensemble_probs(
    models: list[SourceModel], weights, X: np.ndarray
) -> np.ndarray:
    """Convex combination of the models' softmax outputs."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(models) != len(weights):
        raise ParameterError("one weight per model required")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-6:
        raise ParameterError("weights must be a simplex vector")
    k = models[0].num_classes
    d = models[0].input_dim
    for model in models[1:]:
        if model.num_classes != k or model.input_dim != d:
            raise ParameterError("all models must share num_classes and input dim")
    out = np.zeros((np.asarray(X).shape[0], k))
    for w, model in zip(weights, models):
        if w != 0.0:
            out += w * forward(model, X)[2]
    return out


def msfda_loss(models: list[SourceModel], weights, X: np.ndarray) -> LossValue:
    """Information-maximization loss of the weighted ensemble prediction."""
    return im_loss(weighted_ensemble_probs(models, weights, X))
