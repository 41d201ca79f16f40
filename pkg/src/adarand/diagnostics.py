"""Feature statistics tracked during fine-tuning.

The entropy estimator is the pairwise form

    H(X) ~= d / (N (N - 1)) * sum_{i != j} log ||x_i - x_j||^2

and mutual information with the label is ``H(X) - H(X | y)`` where the
conditional term is a sample-weighted average of per-class estimates.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from adarand.model import softmax
from adarand.numerics import ContractError, RngStream, as_labels, as_matrix

DIST_FLOOR = 1e-12
N_CAP = 512
SCATTER_MAX = sys.float_info.max


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


@dataclass
class DiagnosticsReport:
    mean_feature_norm: float
    entropy: float
    cond_entropy: float
    mutual_info: float
    mean_ce_grad_norm: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _pair_log_sum(x: np.ndarray) -> float:
    # fixed row-by-row order keeps the sum independent of how it is chunked
    total = 0.0
    for i in range(x.shape[0]):
        sq = np.sum((x - x[i]) ** 2, axis=1)
        sq[i] = 1.0  # log 1 = 0 removes the diagonal
        total += float(np.sum(np.log(np.maximum(sq, DIST_FLOOR))))
    return total


def entropy_estimate(features, n_cap: int = N_CAP, rng: RngStream | None = None) -> float:
    """Pairwise differential-entropy estimate of a point cloud.

    Above ``n_cap`` rows a uniform subsample without replacement is used;
    pass ``rng`` to control it (defaults to a fixed stream).
    """
    x = as_matrix(features, "features")
    N, d = x.shape
    if N < 2:
        raise ContractError(f"entropy needs at least 2 samples, got {N}")
    if N > n_cap:
        rng = rng or RngStream(0, "data").split("entropy")
        x = x[np.sort(rng.permutation(N)[:n_cap])]
        N = n_cap
    return d * _pair_log_sum(x) / (N * (N - 1))


def conditional_entropy(features, labels, K: int, n_cap: int = N_CAP, rng: RngStream | None = None) -> float:
    x = as_matrix(features, "features")
    y = as_labels(labels, K, x.shape[0])
    counts = np.bincount(y, minlength=K)
    classes = np.flatnonzero(counts >= 2)
    if classes.size == 0:
        raise ContractError("no class has at least 2 samples")
    total = counts[classes].sum()
    return float(sum(counts[k] / total * entropy_estimate(x[y == k], n_cap, rng) for k in classes))


def mutual_information(features, labels, K: int, n_cap: int = N_CAP) -> tuple[float, float, float]:
    """``(H, H|y, I)`` with ``I = H - H|y``."""
    h = entropy_estimate(features, n_cap)
    hc = conditional_entropy(features, labels, K, n_cap)
    return h, hc, h - hc


def ce_grad_norm(head, features, labels) -> tuple[float, float]:
    """Mean squared Frobenius norm of the per-sample CE gradient w.r.t. the head.

    ``direct`` forms each outer product ``g (p - e_y)^T`` explicitly;
    ``identity`` uses ``sum_k (p_k - delta_yk)^2 * ||g||^2``. The two agree
    exactly only because the head has no bias.
    """
    W = as_matrix(head, "head")
    g = as_matrix(features, "features")
    y = as_labels(labels, W.shape[1], g.shape[0])
    resid = softmax(g @ W)
    resid[np.arange(len(y)), y] -= 1.0
    direct = np.mean([np.sum(np.outer(gi, ri) ** 2) for gi, ri in zip(g, resid)])
    identity = np.mean(np.sum(resid ** 2, axis=1) * np.sum(g ** 2, axis=1))
    return float(direct), float(identity)


def _top_eigvec(C: np.ndarray, tol: float, max_iter: int, scale: float,
                against: list[np.ndarray]) -> tuple[np.ndarray, float]:
    """Dominant eigenpair of ``C`` by power iteration, orthogonal to ``against``.

    ``scale`` (the trace of the undeflated covariance) sets the absolute
    tolerance, so a deflated-away spectrum reads as zero rather than noise.
    """
    d = C.shape[0]

    def orthogonal(v):
        for u in against:
            v = v - (u @ v) * u
        return v

    if np.trace(C) <= tol * scale:
        # nothing left after deflation: any unit vector orthogonal to the previous ones
        v = orthogonal(np.eye(d)[int(np.argmin(sum(np.abs(u) for u in against)))] if against else np.eye(d)[0])
        return v / np.linalg.norm(v), 0.0
    v = orthogonal(1.0 / np.arange(1, d + 1))
    if np.linalg.norm(C @ v) <= tol * scale:
        # start vector missed the remaining spectrum (ties): restart inside the range of C
        v = orthogonal(C[:, int(np.argmax(np.diag(C)))].copy())
    v /= np.linalg.norm(v)
    lam_prev = -np.inf
    for it in range(1, max_iter + 1):
        w = C @ v
        nw = np.linalg.norm(w)
        if nw <= tol * scale:
            return v, 0.0
        w /= nw
        lam = float(w @ C @ w)
        resid = np.linalg.norm(C @ w - lam * w)
        v = w
        # Rayleigh quotients of power iterates converge twice as fast as the vectors
        if resid <= tol * scale or abs(lam - lam_prev) <= tol * abs(lam):
            return v, lam
        lam_prev = lam
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations", max_iter)


def pca2(features, tol: float = 1e-10, max_iter: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Project centred rows onto the top two covariance eigenvectors.

    Power iteration with deflation. Each eigenvector is signed so that its
    first non-negligible component is positive. Returns the ``N x 2``
    projection and the two explained variances.
    """
    x = as_matrix(features, "features")
    N, d = x.shape
    if N < 3 or d < 2:
        raise ContractError(f"pca2 needs N >= 3 and d >= 2, got N={N}, d={d}")
    xc = x - x.mean(axis=0)
    C = xc.T @ xc / N
    scale = max(float(np.trace(C)), 1e-300)
    vecs, vals = [], []
    for _ in range(2):
        v, lam = _top_eigvec(C, tol, max_iter, scale, vecs)
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        vecs.append(v)
        vals.append(max(lam, 0.0))
        C = C - lam * np.outer(v, v)
    V = np.stack(vecs, axis=1)
    return xc @ V, np.array(vals)


class Scatter(NamedTuple):
    ratio: float
    degenerate: bool


def scatter_ratio(projection, labels) -> Scatter:
    """Between-class over within-class scatter of a 2-D embedding.

    Zero within-class scatter yields ``SCATTER_MAX`` with ``degenerate=True``.
    """
    p = as_matrix(projection, "projection")
    y = as_labels(labels, length=p.shape[0])
    classes = np.unique(y)
    if classes.size < 2:
        raise ContractError("scatter ratio needs at least two classes")
    centre = p.mean(axis=0)
    between = within = 0.0
    for k in classes:
        pk = p[y == k]
        mk = pk.mean(axis=0)
        between += pk.shape[0] * float(np.sum((mk - centre) ** 2))
        within += float(np.sum((pk - mk) ** 2))
    if within <= 0.0:
        return Scatter(SCATTER_MAX, True)
    return Scatter(between / within, False)


def diagnose(features, labels, K: int, head=None, n_cap: int = N_CAP) -> DiagnosticsReport:
    g = as_matrix(features, "features")
    h, hc, mi = mutual_information(g, labels, K, n_cap)
    grad = ce_grad_norm(head, g, labels)[0] if head is not None else None
    return DiagnosticsReport(float(np.mean(np.sum(g ** 2, axis=1))), h, hc, mi, grad)


def write_pca_csv(path, projection: np.ndarray, labels) -> None:
    lines = ["pc1,pc2,label"]
    lines += [f"{float(a)!r},{float(b)!r},{int(c)}" for (a, b), c in zip(projection, labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
