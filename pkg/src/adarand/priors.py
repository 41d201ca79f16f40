"""Class-conditional Gaussian priors with adaptive mean updates.

Each class k has a diagonal Gaussian ``N(mu_k, diag(sigma2_k))``. ``sigma2``
is fixed at initialization; ``mu`` moves by gradient descent on

    L_ada = mean_k D(mu_k, mu_bar_k) - mean_{k != l} D(mu_k, mu_l)

where ``mu_bar`` tracks the running feature means with an EMA.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from adarand.model import load_checkpoint, save_checkpoint
from adarand.numerics import (
    ContractError,
    NonFiniteError,
    RngStream,
    as_labels,
    as_matrix,
    gaussian_sample,
)

VAR_FLOOR = 1e-4
NORM_EPS = 1e-12
DISTANCES = ("cosine", "euclidean")


@dataclass(frozen=True)
class ConditionalPrior:
    mu: np.ndarray  # K x d
    sigma2: np.ndarray  # K x d, frozen
    mu_bar: np.ndarray  # K x d
    alpha: float = 0.5
    xi: float = 0.1
    distance: str = "cosine"

    def __post_init__(self):
        if not (self.mu.shape == self.sigma2.shape == self.mu_bar.shape) or self.mu.ndim != 2:
            raise ContractError("mu, sigma2 and mu_bar must share one K x d shape")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.xi < 0:
            raise ContractError(f"xi must be non-negative, got {self.xi}")
        if self.distance not in DISTANCES:
            raise ContractError(f"distance must be one of {DISTANCES}")

    @property
    def num_classes(self) -> int:
        return self.mu.shape[0]


def class_counts(labels: np.ndarray, K: int) -> np.ndarray:
    return np.bincount(labels, minlength=K)


def init_from_features(features, labels, K: int, alpha: float = 0.5, xi: float = 0.1,
                       var_floor: float = VAR_FLOOR, distance: str = "cosine") -> ConditionalPrior:
    """Per-class mean and population variance of (pre-trained) features."""
    g = as_matrix(features, "features")
    y = as_labels(labels, K, g.shape[0])
    counts = class_counts(y, K)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ContractError(f"classes without samples: {missing.tolist()}")
    mu = np.zeros((K, g.shape[1]))
    np.add.at(mu, y, g)
    mu /= counts[:, None]
    sq = np.zeros_like(mu)
    np.add.at(sq, y, (g - mu[y]) ** 2)
    sigma2 = np.maximum(sq / counts[:, None], var_floor)
    return ConditionalPrior(mu, sigma2, mu.copy(), float(alpha), float(xi), distance)


def sample_reference(prior: ConditionalPrior, labels, rng: RngStream) -> np.ndarray:
    """One reference vector per label, drawn from that label's Gaussian."""
    y = as_labels(labels, prior.num_classes)
    return gaussian_sample(rng, prior.mu[y], prior.sigma2[y])


def ema_update(prior: ConditionalPrior, features, labels) -> ConditionalPrior:
    """Blend each present class's batch mean into ``mu_bar``; absent classes are skipped."""
    g = as_matrix(features, "features")
    y = as_labels(labels, prior.num_classes, g.shape[0])
    if g.shape[1] != prior.mu.shape[1]:
        raise ContractError(f"features width {g.shape[1]} != prior dim {prior.mu.shape[1]}")
    mu_bar = prior.mu_bar.copy()
    a = prior.alpha
    for k in np.unique(y):
        batch_mean = g[y == k].mean(axis=0)
        mu_bar[k] = a * mu_bar[k] + (1.0 - a) * batch_mean
    return replace(prior, mu_bar=mu_bar)


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(1.0 - u @ v / ((np.linalg.norm(u) + NORM_EPS) * (np.linalg.norm(v) + NORM_EPS)))


def _cosine_pairs(a: np.ndarray, b: np.ndarray):
    """Row-wise D(a_i, b_j) matrix and the pieces needed for its gradient."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ea, eb = na + NORM_EPS, nb + NORM_EPS
    dots = a @ b.T
    return 1.0 - dots / np.outer(ea, eb), dots, na, ea, eb


def _cosine_grad_first(a, b):
    """d D(a_i, b_j) / d a_i, shape (n_a, n_b, d)."""
    _, dots, na, ea, eb = _cosine_pairs(a, b)
    inv = 1.0 / np.outer(ea, eb)
    # derivative of ||a|| is a / ||a||, taken as 0 at a = 0
    unit = np.divide(a, na[:, None], out=np.zeros_like(a), where=na[:, None] > 0)
    return -b[None, :, :] * inv[:, :, None] + (dots * inv / ea[:, None])[:, :, None] * unit[:, None, :]


def _euclid_pairs(a, b):
    diff = a[:, None, :] - b[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2) + NORM_EPS ** 2)
    return dist, diff


def pairwise_distance(a, b, distance: str = "cosine") -> np.ndarray:
    if distance == "cosine":
        return _cosine_pairs(a, b)[0]
    return _euclid_pairs(a, b)[0]


def _pairwise_grad_first(a, b, distance: str) -> np.ndarray:
    if distance == "cosine":
        return _cosine_grad_first(a, b)
    dist, diff = _euclid_pairs(a, b)
    return diff / dist[:, :, None]


def intra_loss(prior: ConditionalPrior) -> float:
    d = pairwise_distance(prior.mu, prior.mu_bar, prior.distance)
    return float(np.mean(np.diag(d)))


def inter_loss(prior: ConditionalPrior) -> float:
    K = prior.num_classes
    if K < 2:
        return 0.0
    d = pairwise_distance(prior.mu, prior.mu, prior.distance)
    off = d.sum() - np.trace(d)
    return float(-off / (K * (K - 1)))


def ada_loss(prior: ConditionalPrior) -> float:
    return intra_loss(prior) + inter_loss(prior)


def ada_grad(prior: ConditionalPrior) -> np.ndarray:
    """Analytic gradient of ``ada_loss`` with respect to ``mu``."""
    mu, K = prior.mu, prior.num_classes
    idx = np.arange(K)
    grad = _pairwise_grad_first(mu, prior.mu_bar, prior.distance)[idx, idx] / K
    if K > 1:
        g = _pairwise_grad_first(mu, mu, prior.distance)
        g[idx, idx] = 0.0
        # D is symmetric, so mu_k appears as both arguments of every pair it is in
        grad -= 2.0 * g.sum(axis=1) / (K * (K - 1))
    return grad


def adaptive_step(prior: ConditionalPrior) -> ConditionalPrior:
    """``mu <- mu - xi * grad L_ada``; ``mu_bar`` and ``sigma2`` are untouched."""
    grad = ada_grad(prior)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient of the prior objective")
    return replace(prior, mu=prior.mu - prior.xi * grad)


def prior_tensors(prior: ConditionalPrior) -> dict[str, np.ndarray]:
    return {"mu": prior.mu, "sigma2": prior.sigma2, "mu_bar": prior.mu_bar}


def save_prior(path, prior: ConditionalPrior) -> None:
    save_checkpoint(path, prior_tensors(prior), "prior",
                    {"alpha": prior.alpha, "xi": prior.xi, "distance": prior.distance})


def load_prior(path) -> ConditionalPrior:
    kind, t, meta = load_checkpoint(path)
    if kind != "prior":
        raise ContractError(f"{path}: expected a prior checkpoint, found {kind!r}")
    return ConditionalPrior(t["mu"], t["sigma2"], t["mu_bar"], meta["alpha"], meta["xi"],
                            meta.get("distance", "cosine"))
