"""Evaluation protocols: split evaluation, cross-region transfer, resolution sweeps,
and export of per-cell modality attention weights."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .geogrid import RegionDataset, aggregate_resolution
from .metrics import CalibrationStats, MetricsReport, calibrate, metrics
from .model import CarbonNet, ModelConfig
from .train import TrainConfig, TrainResult, train


def predict_log(net: CarbonNet, dataset: RegionDataset, idx=None) -> np.ndarray:
    return net.predict(net.prepare(dataset), idx)


def evaluate(net: CarbonNet, dataset: RegionDataset, split: Optional[str] = "test",
             space: str = "log") -> MetricsReport:
    """Metrics on one split (or every cell when ``split`` is None)."""
    idx = np.arange(len(dataset)) if split is None else dataset.split_indices(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    pred = predict_log(net, dataset, idx)
    truth = dataset.log_target[idx]
    if space == "tonnes":
        return metrics(np.expm1(truth), np.expm1(pred), space="tonnes")
    return metrics(truth, pred)


@dataclass
class TransferReport:
    direct: MetricsReport
    calibrated: Optional[MetricsReport]
    stats: Optional[CalibrationStats]
    source_tag: str
    n_cells: int

    def to_dict(self) -> dict:
        return {
            "source": self.source_tag,
            "n_cells": self.n_cells,
            "direct": self.direct.to_dict(),
            "calibrated": self.calibrated.to_dict() if self.calibrated else None,
            "calibration_stats": None if self.stats is None else {
                "mu": self.stats.mu, "sigma": self.stats.sigma,
                "mu_target": self.stats.mu_target, "sigma_target": self.stats.sigma_target},
        }


def transfer_eval(net: CarbonNet, source_tag: str, target: RegionDataset, use_calibration: bool = True,
                  split: Optional[str] = None, out_dir=None) -> TransferReport:
    """Apply a trained model to another region, with optional mean-deviation calibration.

    Calibration statistics use every prediction on the target region and the
    target's log-space emission mean/std; metrics cover ``split`` (default all).
    """
    net.config.check_dataset(target)
    pred = predict_log(net, target)
    y = target.log_target
    idx = np.arange(len(target)) if split is None else target.split_indices(split)
    direct = metrics(y[idx], pred[idx])
    calibrated = stats = None
    if use_calibration:
        stats = CalibrationStats.from_samples(pred, y)
        calibrated = metrics(y[idx], calibrate(pred, stats)[idx])
    report = TransferReport(direct, calibrated, stats, source_tag, len(idx))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "transfer_direct.json").write_text(direct.to_json() + "\n")
        if calibrated is not None:
            (out / "transfer_calibrated.json").write_text(calibrated.to_json() + "\n")
        (out / "transfer.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


@dataclass
class SweepCondition:
    factor: int
    n_cells: int
    report: MetricsReport
    result: TrainResult


def resolution_sweep(dataset: RegionDataset, factors: Sequence[int], model_config: ModelConfig,
                     train_config: TrainConfig, out_dir=None) -> list[SweepCondition]:
    """Aggregate to each factor, retrain from scratch, report test metrics.

    Factor 1 uses the dataset unchanged. Coarser datasets carry no stored
    split, so a stored-split config falls back to a seeded random split there.
    """
    conditions = []
    for f in factors:
        if f < 1:
            raise ValueError(f"factor must be >= 1, got {f}")
        ds = dataset if f == 1 else aggregate_resolution(dataset, f)
        tcfg = train_config
        if f > 1 and tcfg.split_mode == "dataset":
            tcfg = replace(tcfg, split_mode="random")
        result = train(ds, model_config, tcfg)
        report = evaluate(result.net, result.dataset, "test")
        conditions.append(SweepCondition(f, len(ds), report, result))
    if out_dir is not None:
        write_sweep(conditions, out_dir)
    return conditions


def write_sweep(conditions: list[SweepCondition], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["factor", "n_cells", "mae", "rmse", "r2", "spearman", "n_test"])
        for c in conditions:
            r = c.report
            w.writerow([c.factor, c.n_cells, repr(r.mae), repr(r.rmse), repr(r.r2), repr(r.spearman), r.n_samples])
            payload = {"factor": c.factor, "n_cells": c.n_cells, "test": r.to_dict(),
                       "best_epoch": c.result.history.best_epoch}
            (out / f"sweep_factor{c.factor}.json").write_text(json.dumps(payload, indent=2) + "\n")


def emission_deciles(emission: np.ndarray) -> np.ndarray:
    """Decile 0..9 of each value by average rank."""
    n = len(emission)
    ranks = rankdata(emission, method="average")
    return np.minimum(((ranks - 0.5) * 10 // n).astype(int), 9)


def attention_table(net: CarbonNet, dataset: RegionDataset) -> list[dict]:
    inputs = net.prepare(dataset)
    out = net.forward(inputs, np.arange(len(dataset)))
    dec = emission_deciles(dataset.emission)
    rows = []
    for i in range(len(dataset)):
        rows.append({
            "row": int(dataset.rows[i]), "col": int(dataset.cols[i]),
            "grid_weight_s": float(out.grid_weights[i, 0]), "grid_weight_p": float(out.grid_weights[i, 1]),
            "nbhd_weight_s": float(out.nbhd_weights[i, 0]), "nbhd_weight_p": float(out.nbhd_weights[i, 1]),
            "emission_decile": int(dec[i]),
        })
    return rows


def export_attention(net: CarbonNet, dataset: RegionDataset, path) -> list[dict]:
    rows = attention_table(net, dataset)
    cols = ["row", "col", "grid_weight_s", "grid_weight_p", "nbhd_weight_s", "nbhd_weight_p", "emission_decile"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return rows
