"""Rectifier MLP feature extractor, bias-free linear head and Nesterov SGD."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from adarand.numerics import ContractError, NonFiniteError, RngStream, as_labels, as_matrix

CHECKPOINT_FORMAT = "adarand-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ExtractorParams:
    """Affine layers ``(W_l, b_l)`` with ReLU between them, none after the last."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ContractError("extractor needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ContractError(f"layer {i}: weight {w.shape} and bias {b.shape} do not compose")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ContractError(f"layer {i} input width {w.shape[0]} != previous output width")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ExtractorParams":
        return ExtractorParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for t in self.tensors():
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t, dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass
class ModelState:
    extractor: ExtractorParams
    head: np.ndarray  # d x K, no bias
    lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    buffers: list[np.ndarray] = field(default_factory=list)
    head_lr_mult: float = 1.0

    def __post_init__(self):
        if self.head.ndim != 2 or self.head.shape[0] != self.extractor.feature_dim:
            raise ContractError(
                f"head shape {self.head.shape} incompatible with feature dim {self.extractor.feature_dim}"
            )
        if not self.buffers:
            self.buffers = [np.zeros_like(p) for p in self.parameters()]

    @property
    def num_classes(self) -> int:
        return self.head.shape[1]

    def parameters(self) -> list[np.ndarray]:
        return self.extractor.tensors() + [self.head]

    def copy(self) -> "ModelState":
        return ModelState(
            self.extractor.copy(), self.head.copy(), self.lr, self.momentum, self.nesterov,
            [b.copy() for b in self.buffers], self.head_lr_mult,
        )


class TaggedFeatures(NamedTuple):
    """Features together with the fingerprint of the extractor that made them."""

    values: np.ndarray
    fingerprint: str


def init_extractor(rng: RngStream, widths: list[int]) -> ExtractorParams:
    """Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for W and b."""
    if len(widths) < 2:
        raise ContractError("widths must list the input width and at least one layer width")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append((2.0 * rng.uniform(fan_in * fan_out) - 1.0).reshape(fan_in, fan_out) * bound)
        biases.append((2.0 * rng.uniform(fan_out) - 1.0) * bound)
    return ExtractorParams(weights, biases)


def init_head(rng: RngStream, feature_dim: int, num_classes: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(feature_dim)
    return (2.0 * rng.uniform(feature_dim * num_classes) - 1.0).reshape(feature_dim, num_classes) * bound


def forward(params: ExtractorParams, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Features and the per-layer inputs needed by :func:`backward`."""
    h = as_matrix(x, "x")
    if h.shape[1] != params.input_dim:
        raise ContractError(f"x has {h.shape[1]} columns, extractor expects {params.input_dim}")
    cache = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.append(h)
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h, cache


def extract_features(params: ExtractorParams, x) -> np.ndarray:
    return forward(params, x)[0]


def tagged_features(params: ExtractorParams, x) -> TaggedFeatures:
    return TaggedFeatures(extract_features(params, x), params.fingerprint())


def backward(params: ExtractorParams, cache: list[np.ndarray], grad_features) -> list[np.ndarray]:
    """Gradients w.r.t. ``params.tensors()`` given dLoss/dFeatures."""
    g = np.asarray(grad_features, dtype=np.float64)
    grads: list[np.ndarray] = []
    for i in range(len(params.weights) - 1, -1, -1):
        h_in = cache[i]
        grads.append(g.sum(axis=0))
        grads.append(h_in.T @ g)
        if i:
            # h_in is the ReLU output of the previous layer: gate by h_in > 0
            g = (g @ params.weights[i].T) * (h_in > 0)
    grads.reverse()
    return grads


def logits(head, features) -> np.ndarray:
    return np.asarray(features) @ np.asarray(head)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ce_loss(head, features, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """Batch-mean softmax cross-entropy of ``features @ head``.

    Returns ``(loss, grad_head, grad_features)``.
    """
    head = as_matrix(head, "head")
    features = as_matrix(features, "features")
    if features.shape[1] != head.shape[0]:
        raise ContractError(f"features width {features.shape[1]} != head rows {head.shape[0]}")
    B = features.shape[0]
    if B < 1:
        raise ContractError("empty batch")
    y = as_labels(labels, head.shape[1], B)
    z = features @ head
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(B), y]))
    delta = softmax(z)
    delta[np.arange(B), y] -= 1.0
    delta /= B
    return loss, features.T @ delta, delta @ head.T


def accuracy(state: ModelState, x, labels) -> float:
    y = np.asarray(labels)
    if y.size == 0:
        return float("nan")
    pred = np.argmax(logits(state.head, extract_features(state.extractor, x)), axis=1)
    return float(np.mean(pred == y))


def sgd_step(state: ModelState, grads: list[np.ndarray]) -> ModelState:
    """One (Nesterov) momentum step, PyTorch convention, in place.

    ``v <- m v + g``; the update direction is ``g + m v`` with Nesterov,
    ``v`` otherwise.
    """
    params = state.parameters()
    if len(grads) != len(params):
        raise ContractError(f"expected {len(params)} gradients, got {len(grads)}")
    names = _param_names(state)
    for name, p, g in zip(names, params, grads):
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    m = state.momentum
    last = len(params) - 1
    for i, (p, g, v) in enumerate(zip(params, grads, state.buffers)):
        if m:
            v *= m
            v += g
            step = g + m * v if state.nesterov else v
        else:
            step = g
        lr = state.lr * state.head_lr_mult if i == last else state.lr
        p -= lr * step
    return state


def _param_names(state: ModelState) -> list[str]:
    names = []
    for i in range(len(state.extractor.weights)):
        names += [f"layer{i}.weight", f"layer{i}.bias"]
    return names + ["head"]


def save_checkpoint(path, tensors: dict[str, np.ndarray], kind: str, meta: dict | None = None) -> None:
    """JSON container; ``repr`` of float64 round-trips exactly."""
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(t.shape), "data": [float(v) for v in np.asarray(t, dtype=np.float64).ravel()]}
            for name, t in tensors.items()
        },
    }
    Path(path).write_text(json.dumps(record, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict]:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {record.get('version')}")
    tensors = {
        name: np.array(t["data"], dtype=np.float64).reshape(t["shape"]) for name, t in record["tensors"].items()
    }
    return record["kind"], tensors, record.get("meta", {})


def extractor_tensors(params: ExtractorParams) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"layer{i}.weight"] = w
        out[f"layer{i}.bias"] = b
    return out


def extractor_from_tensors(tensors: dict[str, np.ndarray]) -> ExtractorParams:
    n = sum(1 for k in tensors if k.endswith(".weight"))
    return ExtractorParams(
        [tensors[f"layer{i}.weight"] for i in range(n)], [tensors[f"layer{i}.bias"] for i in range(n)]
    )


def save_model(path, state: ModelState | ExtractorParams, meta: dict | None = None) -> None:
    if isinstance(state, ExtractorParams):
        save_checkpoint(path, extractor_tensors(state), "extractor", meta)
    else:
        tensors = extractor_tensors(state.extractor)
        tensors["head"] = state.head
        save_checkpoint(path, tensors, "model", meta)


def load_model(path) -> tuple[ExtractorParams, np.ndarray | None, dict]:
    """Extractor, head (None for extractor-only checkpoints) and metadata."""
    kind, tensors, meta = load_checkpoint(path)
    if kind not in ("extractor", "model"):
        raise ContractError(f"{path}: expected a model checkpoint, found {kind!r}")
    head = tensors.pop("head", None)
    return extractor_from_tensors(tensors), head, meta
