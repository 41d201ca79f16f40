"""Feature and parameter regularizers compared against AdaRand.

Every kind exposes the same two hooks to the training loop: ``penalty``
(value and gradient w.r.t. the batch features) and ``post_step_hook``
(prior maintenance after the model step). L2SP acts on parameters
instead and goes through :func:`l2sp_penalty`.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from adarand import priors
from adarand.model import ExtractorParams, ModelState, TaggedFeatures
from adarand.numerics import ContractError, RngStream, as_labels, as_matrix, gaussian_sample, uniform_sample

KINDS = (
    "FT",
    "FNP",
    "L2SP",
    "RandReg-Uniform01",
    "RandReg-StdNormal",
    "RandReg-PrecompStats",
    "RandReg-CP",
    "AdaRand",
)
CONDITIONAL = ("RandReg-CP", "AdaRand")
STOCHASTIC = ("RandReg-Uniform01", "RandReg-StdNormal", "RandReg-PrecompStats", "RandReg-CP", "AdaRand")


@dataclass(frozen=True)
class RegSpec:
    kind: str = "AdaRand"
    lam: float = 1.0
    alpha: float = 0.5
    xi: float = 0.1
    distance: str = "cosine"
    l2sp_head_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown regularizer kind {self.kind!r}; choose from {KINDS}")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ContractError(f"lambda must be finite and non-negative, got {self.lam}")


@dataclass(frozen=True)
class RegState:
    kind: str
    prior: priors.ConditionalPrior | None = None
    stats_mu: np.ndarray | None = None
    stats_sigma2: np.ndarray | None = None
    source: ExtractorParams | None = None

    @property
    def is_conditional(self) -> bool:
        return self.kind in CONDITIONAL


def build_state(spec: RegSpec, pretrained: ModelState | ExtractorParams,
                target_features: TaggedFeatures, labels, K: int) -> RegState:
    """Materialize what ``spec.kind`` needs from the pre-trained model.

    ``target_features`` must come from :func:`adarand.model.tagged_features`
    on the same pre-trained extractor; the fingerprint is checked.
    """
    extractor = pretrained.extractor if isinstance(pretrained, ModelState) else pretrained
    if not isinstance(target_features, TaggedFeatures):
        raise ContractError("target_features must be TaggedFeatures from the pre-trained extractor")
    if target_features.fingerprint != extractor.fingerprint():
        raise ContractError("target_features were not extracted with the pre-trained extractor")
    feats = target_features.values
    kind = spec.kind
    if kind in CONDITIONAL:
        prior = priors.init_from_features(feats, labels, K, spec.alpha, spec.xi, distance=spec.distance)
        return RegState(kind, prior=prior)
    if kind == "RandReg-PrecompStats":
        g = as_matrix(feats, "target_features")
        return RegState(kind, stats_mu=g.mean(axis=0), stats_sigma2=g.var(axis=0))
    if kind == "L2SP":
        return RegState(kind, source=extractor.copy())
    return RegState(kind)


def draw_reference(state: RegState, labels, rng: RngStream, B: int, d: int) -> np.ndarray:
    kind = state.kind
    if kind == "RandReg-Uniform01":
        return uniform_sample(rng, B, d)
    if kind == "RandReg-StdNormal":
        return gaussian_sample(rng, np.zeros((B, d)), np.ones((B, d)))
    if kind == "RandReg-PrecompStats":
        return gaussian_sample(rng, np.tile(state.stats_mu, (B, 1)), np.tile(state.stats_sigma2, (B, 1)))
    if kind in CONDITIONAL:
        if labels is None:
            raise ContractError(f"{kind} needs labels to draw class-conditional references")
        return priors.sample_reference(state.prior, as_labels(labels, length=B), rng)
    raise ContractError(f"{kind} draws no reference vectors")


def penalty(state: RegState, features, labels, rng: RngStream | None) -> tuple[float, np.ndarray]:
    """Batch mean of ``||g_i - z_i||^2`` and its gradient w.r.t. the features.

    References are constants: no gradient reaches the prior through here.
    FT and L2SP contribute nothing on the feature route.
    """
    g = as_matrix(features, "features")
    B, d = g.shape
    if state.kind in ("FT", "L2SP"):
        return 0.0, np.zeros_like(g)
    if state.kind == "FNP":
        diff = g
    else:
        if rng is None:
            raise ContractError(f"{state.kind} needs a noise stream")
        diff = g - draw_reference(state, labels, rng, B, d)
    value = float(np.sum(diff * diff) / B)
    return value, 2.0 * diff / B


def l2sp_penalty(current: ExtractorParams, source: ExtractorParams, head=None,
                 head_weight: float = 1.0) -> tuple[float, list[np.ndarray], np.ndarray | None]:
    """``||phi - phi_s||^2`` over all extractor tensors plus ``head_weight * ||W||^2``.

    Returns ``(value, extractor_grads, head_grad)``.
    """
    cur, src = current.tensors(), source.tensors()
    if len(cur) != len(src) or any(a.shape != b.shape for a, b in zip(cur, src)):
        raise ContractError("L2SP needs shape-congruent current and source extractors")
    diffs = [a - b for a, b in zip(cur, src)]
    value = float(sum(np.sum(t * t) for t in diffs))
    grads = [2.0 * t for t in diffs]
    head_grad = None
    if head is not None:
        W = np.asarray(head, dtype=np.float64)
        value += head_weight * float(np.sum(W * W))
        head_grad = 2.0 * head_weight * W
    return value, grads, head_grad


def post_step_hook(state: RegState, features, labels) -> RegState:
    """AdaRand: EMA of the running means, then one prior gradient step."""
    if state.kind != "AdaRand":
        return state
    prior = priors.ema_update(state.prior, features, labels)
    prior = priors.adaptive_step(prior)
    return replace(state, prior=prior)


def ada_loss(state: RegState) -> float | None:
    if state.kind != "AdaRand":
        return None
    return priors.ada_loss(state.prior)
