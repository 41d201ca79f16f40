"""One-axis hyperparameter sweeps over seed replicates.

Layout under ``out``::

    pretrained/seed{r}.json        one source checkpoint per replicate
    {axis}={value}/seed{r}/        a fine-tuning run directory (or error.json)
    summary.csv                    mean and sample std per cell

Aggregates are recomputed from the per-run ``summary.json`` files, so the
summary table always agrees with what is on disk.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from adarand import model
from adarand.harness.config import ExperimentConfig
from adarand.harness.train import pretrain, run_finetune, write_json
from adarand.numerics import ContractError

log = logging.getLogger(__name__)

AXES = {
    "lambda": "reg.lambda",
    "alpha": "reg.alpha",
    "fraction": "dataset.fraction",
    "kind": "reg.kind",
}
SUMMARY_METRICS = ("test_acc", "final_test_acc", "best_val_acc", "scatter_ratio")


def parse_values(axis: str, text: str) -> list:
    """Split a comma-separated value list; numeric axes are parsed as floats."""
    if axis not in AXES:
        raise ContractError(f"unknown sweep axis {axis!r}; expected one of {sorted(AXES)}")
    items = [v.strip() for v in text.split(",") if v.strip()]
    if axis == "kind":
        return items
    try:
        return [float(v) for v in items]
    except ValueError as exc:
        raise ContractError(f"non-numeric value for axis {axis}: {exc}") from None


def cell_name(axis: str, value) -> str:
    return f"{axis}={value}"


def replicate(cfg: ExperimentConfig, r: int) -> ExperimentConfig:
    return cfg.model_copy(update={"seeds": cfg.seeds.offset(r)})


def _pretrain_key(cfg: ExperimentConfig) -> str:
    data = cfg.resolved()
    relevant = {k: data[k] for k in ("dataset", "model", "pretrain", "seeds")}
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()


def _pretrained_path(cfg: ExperimentConfig, out: Path, r: int) -> Path:
    """Checkpoint for replicate ``r``, reused only if it was built from the same settings."""
    rcfg = replicate(cfg, r)
    key = _pretrain_key(rcfg)
    path = out / "pretrained" / f"seed{r}.json"
    if path.exists() and model.load_model(path)[2].get("pretrain_key") == key:
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    extractor, meta = pretrain(rcfg)
    model.save_model(path, extractor, {**meta, "pretrain_key": key})
    return path


def _run_cell(args) -> dict:
    cfg_json, axis, value, ckpt, run_dir = args
    run_dir = Path(run_dir)
    try:
        (run_dir / "error.json").unlink(missing_ok=True)
        cfg = ExperimentConfig.model_validate(json.loads(cfg_json)).with_updates(**{AXES[axis]: value})
        run_finetune(cfg, ckpt, run_dir)
        return {"dir": str(run_dir), "ok": True}
    except Exception as exc:  # recorded per cell; the sweep carries on
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "summary.json").unlink(missing_ok=True)
        record = {"error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
        write_json(record, run_dir / "error.json")
        return {"dir": str(run_dir), "ok": False, "error": record["error"]}


def _stats(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    a = np.asarray(values, dtype=np.float64)
    std = float(a.std(ddof=1)) if a.size > 1 else None
    return float(a.mean()), std


def aggregate(out, axis: str, values: list, seeds: int) -> list[dict]:
    """Build summary rows from the run directories under ``out``."""
    out = Path(out)
    rows = []
    for v in values:
        per_metric = {m: [] for m in SUMMARY_METRICS}
        failed = 0
        for r in range(seeds):
            path = out / cell_name(axis, v) / f"seed{r}" / "summary.json"
            if not path.exists():
                failed += 1
                continue
            summary = json.loads(path.read_text(encoding="utf-8"))
            for m in SUMMARY_METRICS:
                if summary.get(m) is not None:
                    per_metric[m].append(summary[m])
        row = {"axis": axis, "value": v, "n_ok": seeds - failed, "n_failed": failed}
        for m in SUMMARY_METRICS:
            row[f"{m}_mean"], row[f"{m}_std"] = _stats(per_metric[m])
        rows.append(row)
    return rows


def write_summary_csv(rows: list[dict], path) -> None:
    cols = ["axis", "value", "n_ok", "n_failed"]
    cols += [f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")]

    def fmt(v):
        if v is None or (isinstance(v, float) and math.isnan(v)):
            return ""
        return repr(v) if isinstance(v, float) else str(v)

    lines = [",".join(cols)] + [",".join(fmt(row[c]) for c in cols) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sweep(cfg: ExperimentConfig, axis: str, values: list, seeds: int, out, workers: int = 1) -> list[dict]:
    """Fine-tune every (value, replicate) cell and write ``summary.csv``.

    Replicate ``r`` offsets every seed by ``r``. Pretraining does not depend
    on any sweepable field, so each replicate's checkpoint is shared by all
    values. With ``workers > 1`` cells run in separate processes; results
    do not depend on the worker count.
    """
    if axis not in AXES:
        raise ContractError(f"unknown sweep axis {axis!r}; expected one of {sorted(AXES)}")
    if not values:
        raise ContractError("sweep needs at least one value")
    if seeds < 1:
        raise ContractError("sweep needs at least one seed replicate")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpts = [_pretrained_path(cfg, out, r) for r in range(seeds)]

    jobs = []
    for v in values:
        for r in range(seeds):
            run_dir = out / cell_name(axis, v) / f"seed{r}"
            # the axis value is applied inside the cell so an invalid value fails only that cell
            jobs.append((replicate(cfg, r).model_dump_json(by_alias=True), axis, v, str(ckpts[r]), str(run_dir)))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]
    for res in results:
        if not res["ok"]:
            log.warning("sweep cell %s failed: %s", res["dir"], res["error"])

    rows = aggregate(out, axis, values, seeds)
    write_summary_csv(rows, out / "summary.csv")
    return rows
