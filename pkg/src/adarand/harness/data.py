"""Synthetic source/target tasks and CSV datasets.

Synthetic inputs are ``x = A s + nuisance * n`` with ``A`` an ``m x q``
orthonormal embedding shared by both tasks and ``s`` drawn from Gaussian
class blobs in the latent space. Target class k is the union of source
blobs k, k+K, ..., k+(M-1)K (M modes per class, M=1 reuses the first K
blobs). Fresh target samples are rotated (every latent plane by the same
angle) and shifted, so a source-trained extractor is useful but not
matched.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from adarand.numerics import ContractError, RngStream


class CsvFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ContractError(f"inconsistent dataset shapes x={self.x.shape}, y={self.y.shape}")

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


class Splits(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset


def _embedding(rng: RngStream, m: int, q: int) -> np.ndarray:
    q_mat, r = np.linalg.qr(rng.standard_normal(m * q).reshape(m, q))
    return q_mat * np.sign(np.diag(r))


def _rotation(q: int, angle: float) -> np.ndarray:
    R = np.eye(q)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, q - 1, 2):
        R[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return R


def _blobs(rng: RngStream, centres: np.ndarray, per_class: int, spread: float) -> tuple[np.ndarray, np.ndarray]:
    K, q = centres.shape
    y = np.repeat(np.arange(K), per_class)
    s = centres[y] + spread * rng.standard_normal(y.size * q).reshape(y.size, q)
    return s, y


def _observe(rng: RngStream, s: np.ndarray, A: np.ndarray, nuisance: float) -> np.ndarray:
    n = rng.standard_normal(s.shape[0] * A.shape[0]).reshape(s.shape[0], A.shape[0])
    return s @ A.T + nuisance * n


def _check(spec) -> None:
    if not spec.spread > 0:
        raise ContractError("cluster spread must be positive")
    if spec.num_classes < 2 or spec.samples_per_class < 2:
        raise ContractError("need at least 2 classes and 2 samples per class")


def _source_centres(spec, rng: RngStream) -> np.ndarray:
    q = spec.latent_dim
    return spec.separation * rng.split("centres").standard_normal(spec.source_classes * q).reshape(-1, q)


def generate_source(spec, rng: RngStream) -> Dataset:
    """Labelled source task used for pretraining."""
    _check(spec)
    m, q = spec.input_dim, spec.latent_dim
    A = _embedding(rng.split("embedding"), m, q)
    centres = _source_centres(spec, rng)
    srng = rng.split("source")
    s, y = _blobs(srng, centres, spec.source_samples_per_class, spec.spread)
    return Dataset(_observe(srng, s, A, spec.nuisance), y, spec.source_classes)


def generate_synthetic(spec, rng: RngStream) -> Splits:
    """Target task splits; the training split is reduced to ``spec.fraction``."""
    _check(spec)
    m, q, K = spec.input_dim, spec.latent_dim, spec.num_classes
    if K * spec.modes_per_class > spec.source_classes:
        raise ContractError(
            f"target classes x modes ({K} x {spec.modes_per_class}) exceed source classes ({spec.source_classes})")
    A = _embedding(rng.split("embedding"), m, q)
    M = spec.modes_per_class
    centres = _source_centres(spec, rng)[:K * M]
    R = _rotation(q, spec.rotation)
    shift = spec.shift * np.ones(q) / np.sqrt(q)
    trng = rng.split("target")

    def draw(label, per_class):
        r = trng.split(label)
        y = np.repeat(np.arange(K), per_class)
        mode = np.minimum((r.split("mode").uniform(y.size) * M).astype(np.int64), M - 1)
        s = centres[mode * K + y] + spec.spread * r.standard_normal(y.size * q).reshape(y.size, q)
        return Dataset(_observe(r, s @ R.T + shift, A, spec.nuisance), y, K)

    pool = draw("pool", spec.samples_per_class)
    test = draw("test", spec.test_per_class)
    train, val = stratified_split(pool, spec.val_fraction, rng.split("split"))
    train = reduce_fraction(train, spec.fraction, rng.split("fraction"))
    return Splits(train, val, test)


def stratified_split(ds: Dataset, val_fraction: float, rng: RngStream) -> tuple[Dataset, Dataset]:
    """Per-class holdout of ``round(n_k * val_fraction)`` samples (at least 1 when n_k >= 2)."""
    train_idx, val_idx = [], []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.y == k)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(idx.size * val_fraction))
        n_val = min(max(n_val, 1 if idx.size >= 2 else 0), max(idx.size - 1, 0))
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    return ds.subset(np.sort(np.concatenate(train_idx))), ds.subset(np.sort(np.concatenate(val_idx)))


def reduce_fraction(ds: Dataset, fraction: float, rng: RngStream) -> Dataset:
    """Keep exactly ``floor(fraction * N)`` samples.

    Classes are visited round-robin over shuffled per-class orders, so
    every class survives whenever at least K samples are kept.
    """
    if not 0 < fraction <= 1:
        raise ContractError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return ds
    keep = int(np.floor(fraction * len(ds)))
    queues = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.y == k)
        queues.append(list(idx[rng.permutation(idx.size)]))
    order = []
    depth = 0
    while len(order) < keep:
        for k in rng.permutation(ds.num_classes):
            if depth < len(queues[k]):
                order.append(queues[k][depth])
        depth += 1
    return ds.subset(np.sort(np.array(order[:keep], dtype=np.int64)))


def load_csv_dataset(path, num_classes: int | None = None) -> Dataset:
    """Read ``f0,...,f{m-1},label`` rows; labels must be contiguous from 0."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(path, 1, "empty file") from None
        m = len(header) - 1
        expected = [f"f{i}" for i in range(m)] + ["label"]
        if m < 1 or [h.strip() for h in header] != expected:
            raise CsvFormatError(path, 1, f"header must be f0,...,f{{m-1}},label; got {','.join(header)}")
        xs, ys = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != m + 1:
                raise CsvFormatError(path, line, f"expected {m + 1} fields, found {len(row)}")
            try:
                feats = [float(v) for v in row[:m]]
            except ValueError:
                raise CsvFormatError(path, line, "non-numeric feature value") from None
            if not all(np.isfinite(feats)):
                raise CsvFormatError(path, line, "non-finite feature value")
            try:
                label = int(row[m])
            except ValueError:
                raise CsvFormatError(path, line, f"label {row[m]!r} is not an integer") from None
            if label < 0:
                raise CsvFormatError(path, line, "negative label")
            xs.append(feats)
            ys.append(label)
    if not ys:
        raise CsvFormatError(path, 2, "no data rows")
    present = sorted(set(ys))
    K = num_classes if num_classes is not None else present[-1] + 1
    if present != list(range(K)) and num_classes is None:
        missing = sorted(set(range(K)) - set(present))
        raise CsvFormatError(path, 1, f"labels are not contiguous from 0; missing {missing}")
    if present[-1] >= K:
        raise CsvFormatError(path, 1, f"label {present[-1]} exceeds class count {K}")
    return Dataset(np.array(xs), np.array(ys), K)


def save_csv_dataset(ds: Dataset, path) -> None:
    m = ds.x.shape[1]
    lines = [",".join([f"f{i}" for i in range(m)] + ["label"])]
    for row, label in zip(ds.x, ds.y):
        lines.append(",".join([repr(float(v)) for v in row] + [str(int(label))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_splits(spec, rng: RngStream) -> Splits:
    if spec.source == "synthetic-blobs":
        return generate_synthetic(spec, rng)
    train_pool = load_csv_dataset(spec.train_csv)
    test = load_csv_dataset(spec.test_csv, train_pool.num_classes)
    train, val = stratified_split(train_pool, spec.val_fraction, rng.split("split"))
    return Splits(reduce_fraction(train, spec.fraction, rng.split("fraction")), val, test)


def load_source(spec, rng: RngStream) -> Dataset:
    if spec.source == "synthetic-blobs":
        return generate_source(spec, rng)
    if not spec.source_csv:
        raise ContractError("csv-file datasets need source_csv for pretraining")
    return load_csv_dataset(spec.source_csv)
