"""Pretraining on the source task and the fine-tuning loop."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from adarand import diagnostics, model, regularizers
from adarand.harness.config import ExperimentConfig, dump_config
from adarand.harness.data import Splits, load_source, load_splits
from adarand.numerics import ContractError, NonFiniteError, RngStream
from adarand.priors import save_prior

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "epoch",
    "lr",
    "train_loss",
    "l_cls",
    "reg_loss",
    "l_ada",
    "train_acc",
    "val_acc",
    "test_acc",
    "mean_feature_norm",
    "entropy",
    "cond_entropy",
    "mutual_info",
    "mean_ce_grad_norm",
)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient; ``epoch`` is 0-based."""

    def __init__(self, epoch: int, detail: str):
        super().__init__(f"diverged in epoch {epoch}: {detail}")
        self.epoch = epoch


def _step(state: model.ModelState, grads: list[np.ndarray], epoch: int) -> None:
    try:
        model.sgd_step(state, grads)
    except NonFiniteError as exc:
        raise DivergenceError(epoch, str(exc)) from None


def _streams(cfg: ExperimentConfig) -> dict[str, RngStream]:
    s = cfg.seeds
    return {name: RngStream(getattr(s, name), name) for name in ("init", "shuffle", "noise", "data")}


def _batches(perm: np.ndarray, batch_size: int):
    for start in range(0, perm.size, batch_size):
        yield perm[start:start + batch_size]


def pretrain(cfg: ExperimentConfig) -> tuple[model.ExtractorParams, dict]:
    """Train extractor + throwaway head with plain cross-entropy on the source task."""
    rng = _streams(cfg)
    src = load_source(cfg.dataset, rng["data"])
    p = cfg.pretrain
    extractor = model.init_extractor(rng["init"].split("extractor"), cfg.widths(src.x.shape[1]))
    head = model.init_head(rng["init"].split("source-head"), cfg.model.feature_dim, src.num_classes)
    state = model.ModelState(extractor, head, p.lr, p.momentum, p.nesterov)
    shuffle = rng["shuffle"].split("pretrain")
    for epoch in range(p.epochs):
        state.lr = p.lr_at(epoch)
        for idx in _batches(shuffle.permutation(len(src)), p.batch_size):
            g, cache = model.forward(state.extractor, src.x[idx])
            loss, g_head, g_feat = model.ce_loss(state.head, g, src.y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch, f"non-finite loss {loss}")
            grads = model.backward(state.extractor, cache, g_feat) + [g_head]
            if p.weight_decay:
                grads = [g + p.weight_decay * w for g, w in zip(grads, state.parameters())]
            _step(state, grads, epoch)
    # an untrained extractor is returned as initialized
    if p.hidden_norm is not None and p.epochs:
        rescale_hidden(state.extractor, src.x, p.hidden_norm)
    if p.feature_norm is not None and p.epochs:
        rescale_features(state, src.x, p.feature_norm)
    acc = model.accuracy(state, src.x, src.y)
    log.info("pretrained on %d source samples, train accuracy %.4f", len(src), acc)
    return state.extractor, {"source_train_acc": acc, "widths": cfg.widths(src.x.shape[1])}


def rescale_features(state: model.ModelState, x: np.ndarray, target: float) -> float:
    """Scale the last extractor layer so mean ||g||^2 on ``x`` equals ``target``.

    The head is scaled inversely, so source logits are unchanged.
    """
    g = model.extract_features(state.extractor, x)
    c = float(np.sqrt(target / np.mean(np.sum(g * g, axis=1))))
    state.extractor.weights[-1] *= c
    state.extractor.biases[-1] *= c
    state.head /= c
    return c


def rescale_hidden(params: model.ExtractorParams, x: np.ndarray, target: float) -> list[float]:
    """Set mean ||a||^2 of every hidden rectifier layer to ``target``.

    Rectifiers are positively homogeneous, so scaling a layer by c and the
    next layer's weights by 1/c leaves the features unchanged.
    """
    scales = []
    for i in range(len(params.weights) - 1):
        _, cache = model.forward(params, x)
        a = cache[i + 1]
        energy = float(np.mean(np.sum(a * a, axis=1)))
        c = np.sqrt(target / energy) if energy > 0 else 1.0
        params.weights[i] *= c
        params.biases[i] *= c
        params.weights[i + 1] /= c
        scales.append(float(c))
    return scales


def run_pretrain(cfg: ExperimentConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    extractor, meta = pretrain(cfg)
    path = out / "pretrained.json"
    model.save_model(path, extractor, meta)
    dump_config(cfg, out / "config.resolved.json")
    return path


@dataclass
class FinetuneResult:
    state: model.ModelState
    best: model.ModelState
    rows: list[dict]
    summary: dict
    reg: regularizers.RegState
    trajectory: list[str] = field(default_factory=list)  # parameter digest after each epoch
    projection: np.ndarray | None = None
    projection_labels: np.ndarray | None = None


def param_digest(state: model.ModelState) -> str:
    h = hashlib.sha256()
    for p in state.parameters():
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def finetune(cfg: ExperimentConfig, pretrained: model.ExtractorParams,
             splits: Splits | None = None) -> FinetuneResult:
    """Fine-tune ``pretrained`` on the target task with the configured regularizer."""
    rng = _streams(cfg)
    if splits is None:
        splits = load_splits(cfg.dataset, rng["data"])
    train, val, test = splits
    K = train.num_classes
    if train.x.shape[1] != pretrained.input_dim:
        raise ContractError(f"data has {train.x.shape[1]} inputs, extractor expects {pretrained.input_dim}")
    if pretrained.feature_dim != cfg.model.feature_dim:
        raise ContractError(f"checkpoint feature dim {pretrained.feature_dim} != config {cfg.model.feature_dim}")
    spec = cfg.reg.spec()
    if spec.kind in regularizers.CONDITIONAL:
        missing = np.flatnonzero(train.class_counts() == 0)
        if missing.size:
            raise ContractError(f"{spec.kind} needs every class in the training data; missing {missing.tolist()}")

    o = cfg.optim
    head = model.init_head(rng["init"].split("head"), pretrained.feature_dim, K)
    state = model.ModelState(pretrained.copy(), head, o.lr, o.momentum, o.nesterov, head_lr_mult=o.head_lr_mult)
    reg = regularizers.build_state(spec, pretrained, model.tagged_features(pretrained, train.x), train.y, K)
    lam = spec.lam
    noise = rng["noise"]
    shuffle = rng["shuffle"]
    n_diag = min(cfg.diagnostics.subset, len(train))
    diag_idx = np.sort(rng["data"].split("diag").permutation(len(train))[:n_diag])

    rows, trajectory = [], []
    best, best_val, best_epoch = state.copy(), -1.0, -1
    for epoch in range(o.epochs):
        state.lr = o.lr_at(epoch)
        sums = {"l_cls": 0.0, "reg": 0.0}
        for idx in _batches(shuffle.permutation(len(train)), o.batch_size):
            xb, yb = train.x[idx], train.y[idx]
            g, cache = model.forward(state.extractor, xb)
            pen, pen_grad = regularizers.penalty(reg, g, yb, noise)
            ce, g_head, g_feat = model.ce_loss(state.head, g, yb)
            l2sp_grads = None
            if spec.kind == "L2SP":
                pen, l2sp_grads, l2sp_head = regularizers.l2sp_penalty(
                    state.extractor, reg.source, state.head, spec.l2sp_head_weight)
            loss = ce + lam * pen
            if not np.isfinite(loss):
                raise DivergenceError(epoch, f"non-finite loss {loss}")
            if lam != 0:
                g_feat = g_feat + lam * pen_grad
            grads = model.backward(state.extractor, cache, g_feat) + [g_head]
            if l2sp_grads is not None and lam != 0:
                grads = [a + lam * b for a, b in zip(grads, l2sp_grads + [l2sp_head])]
            _step(state, grads, epoch)
            reg = regularizers.post_step_hook(reg, g, yb)
            sums["l_cls"] += ce * len(idx)
            sums["reg"] += pen * len(idx)

        n = len(train)
        l_cls, reg_loss = sums["l_cls"] / n, lam * sums["reg"] / n
        feats = model.extract_features(state.extractor, train.x[diag_idx])
        report = diagnostics.diagnose(feats, train.y[diag_idx], K, state.head, cfg.diagnostics.n_cap)
        val_acc = model.accuracy(state, val.x, val.y)
        row = {
            "epoch": epoch + 1,
            "lr": state.lr,
            "train_loss": l_cls + reg_loss,
            "l_cls": l_cls,
            "reg_loss": None if spec.kind == "FT" else reg_loss,
            "l_ada": regularizers.ada_loss(reg),
            "train_acc": model.accuracy(state, train.x, train.y),
            "val_acc": val_acc,
            "test_acc": model.accuracy(state, test.x, test.y),
            **report.as_dict(),
        }
        rows.append(row)
        trajectory.append(param_digest(state))
        if val_acc >= best_val:
            best, best_val, best_epoch = state.copy(), val_acc, epoch + 1

    summary, proj, proj_labels = _summarize(cfg, state, best, best_epoch, rows, test, pretrained)
    return FinetuneResult(state, best, rows, summary, reg, trajectory, proj, proj_labels)


def _pca_sample(cfg: ExperimentConfig, test) -> np.ndarray:
    n = min(cfg.diagnostics.pca_samples, len(test))
    perm = RngStream(cfg.seeds.data, "data").split("pca").permutation(len(test))
    return np.sort(perm[:n])


def _summarize(cfg, final, best, best_epoch, rows, test, pretrained) -> dict:
    idx = _pca_sample(cfg, test)
    feats = model.extract_features(best.extractor, test.x[idx])
    proj, explained = diagnostics.pca2(feats)
    scatter = diagnostics.scatter_ratio(proj, test.y[idx])
    last = rows[-1] if rows else {}
    summary = {
        "kind": cfg.reg.kind,
        "lambda": cfg.reg.lam,
        "epochs": len(rows),
        "best_epoch": best_epoch if rows else 0,
        "best_val_acc": max((r["val_acc"] for r in rows), default=None),
        "test_acc": model.accuracy(best, test.x, test.y),
        "final_test_acc": model.accuracy(final, test.x, test.y),
        "final": {k: last.get(k) for k in METRIC_FIELDS if k != "epoch"},
        "scatter_ratio": scatter.ratio,
        "scatter_degenerate": scatter.degenerate,
        "pca_explained": [float(v) for v in explained],
        "pretrained_fingerprint": pretrained.fingerprint(),
    }
    return summary, proj, test.y[idx]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(rows: list[dict], path) -> None:
    lines = [",".join(METRIC_FIELDS)]
    lines += [",".join(_fmt(r.get(k)) for k in METRIC_FIELDS) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics_csv(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    header = text[0].split(",")
    rows = []
    for line in text[1:]:
        vals = line.split(",")
        row = {}
        for k, v in zip(header, vals):
            row[k] = None if v == "" else (int(v) if k == "epoch" else float(v))
        rows.append(row)
    return rows


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_finetune(cfg: ExperimentConfig, pretrained_path, out) -> FinetuneResult:
    """Fine-tune from a checkpoint and write the run directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    extractor, _, _ = model.load_model(pretrained_path)
    dump_config(cfg, out / "config.resolved.json")
    result = finetune(cfg, extractor)
    write_metrics_csv(result.rows, out / "metrics.csv")
    write_json(result.summary, out / "summary.json")
    diagnostics.write_pca_csv(out / "pca.csv", result.projection, result.projection_labels)
    model.save_model(out / "model.json", result.best, {"best_epoch": result.summary["best_epoch"]})
    if result.reg.prior is not None:
        save_prior(out / "prior.json", result.reg.prior)
    return result
