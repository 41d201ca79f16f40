"""Random streams, array validation and the finite-difference oracle.

All arrays are float64 numpy arrays. Randomness comes from named
counter-based streams so that, e.g., the noise drawn for a regularizer
never perturbs the data order.
"""
from __future__ import annotations

import copy
import hashlib
from typing import Callable

import numpy as np

STREAM_IDS = ("init", "shuffle", "noise", "data")


class ContractError(ValueError):
    """An operation was called with inputs violating its preconditions."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where only finite values are allowed."""


def as_matrix(a, name: str = "array", ndim: int = 2) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ContractError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def as_labels(labels, n_classes: int | None = None, length: int | None = None) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ContractError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ContractError("labels must be integers")
    y = y.astype(np.int64)
    if length is not None and y.shape[0] != length:
        raise ContractError(f"expected {length} labels, got {y.shape[0]}")
    if n_classes is not None and y.size and (y.min() < 0 or y.max() >= n_classes):
        bad = y[(y < 0) | (y >= n_classes)]
        raise ContractError(f"labels out of range [0, {n_classes}): {sorted(set(bad.tolist()))[:5]}")
    return y


def _derive_key(seed: int, path: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{path}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """A named, splittable random stream.

    The underlying generator is Philox (counter-based) keyed by a hash of
    ``(seed, stream_id)``. Two streams with the same key replay the same
    sequence; different ids give independent sequences.
    """

    def __init__(self, seed: int, stream_id: str, *, _path: str | None = None):
        if stream_id not in STREAM_IDS and _path is None:
            raise ContractError(f"stream_id must be one of {STREAM_IDS}, got {stream_id!r}")
        if not 0 <= int(seed) < 2**64:
            raise ContractError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.stream_id = stream_id
        self.path = _path or stream_id
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.path)))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path!r})"

    def split(self, label: str) -> "RngStream":
        """Child stream keyed by (seed, path/label); does not advance self."""
        return RngStream(self.seed, self.stream_id, _path=f"{self.path}/{label}")

    def clone(self) -> "RngStream":
        """Copy including the counter position, for replaying draws."""
        return copy.deepcopy(self)

    def uniform(self, n: int) -> np.ndarray:
        return self._gen.random(int(n))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(int(n))

    def standard_normal(self, n: int) -> np.ndarray:
        # Box-Muller over the uniform stream; 1 - u keeps the log argument in (0, 1].
        n = int(n)
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]


def gaussian_sample(rng: RngStream, mu, sigma2) -> np.ndarray:
    """Draw ``mu + sqrt(sigma2) * n`` element-wise with n standard normal."""
    mu = as_matrix(mu, "mu")
    sigma2 = as_matrix(sigma2, "sigma2")
    if mu.shape != sigma2.shape:
        raise ContractError(f"mu {mu.shape} and sigma2 {sigma2.shape} differ in shape")
    if np.any(sigma2 < 0):
        raise ContractError("sigma2 has negative entries")
    n = rng.standard_normal(mu.size).reshape(mu.shape)
    return mu + np.sqrt(sigma2) * n


def uniform_sample(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ContractError(f"shape must be positive, got ({rows}, {cols})")
    return rng.uniform(rows * cols).reshape(rows, cols)


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if not h > 0:
        raise ContractError("step h must be positive")
    x = np.array(at, dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn(x))
        flat[i] = orig - h
        down = float(loss_fn(x))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"loss is non-finite near index {np.unravel_index(i, x.shape)}")
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), the metric used for gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
