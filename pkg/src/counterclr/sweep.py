"""Sparsity sweep: train and evaluate across observed-ratio settings.

For every (ratio, method, seed) cell the harness calibrates the exposure
policy to the ratio, samples one MNAR observation set, trains the method
on a train/validation split of the observed cells, and evaluates on the
unobserved cells. Rows come out in deterministic (ratio, method, seed)
order; a ratio of 1.0 leaves no test cells and is recorded as such
rather than failing the whole sweep.
"""

from __future__ import annotations

import csv
import dataclasses
import math

import numpy as np

from .data import split as split_dataset
from .errors import ArgumentError
from .metrics import evaluate_predictions
from .simulate import calibrate_policy, sample_observations
from .train import train_method

__all__ = ["SWEEP_CSV_FIELDS", "sparsity_sweep", "write_sweep_csv", "sweep_summary"]

SWEEP_CSV_FIELDS = [
    "method",
    "observed_ratio",
    "seed",
    "mse",
    "mae",
    "ndcg_at_5",
    "n_users_ranked",
    "n_train",
    "n_test",
    "status",
]


def _predict_matrix(model):
    # CauNetModel and BaselineModel expose different spellings
    if hasattr(model, "predict_matrix"):
        return model.predict_matrix()
    from .caunet import predict_matrix

    return predict_matrix(model)


def sparsity_sweep(gt, ratios, methods, seeds, base_config, slope=2.0,
                   val_fraction=0.1):
    """Full (ratio x method x seed) grid of metric rows."""
    for ratio in ratios:
        if not 0.0 < ratio <= 1.0:
            raise ArgumentError(f"observed ratio {ratio} outside (0, 1]")
    rows = []
    for ratio in ratios:
        policy = calibrate_policy(gt, slope, ratio)
        for method in methods:
            for seed in seeds:
                observed, held_out = sample_observations(gt, policy, seed)
                row = {
                    "method": method,
                    "observed_ratio": ratio,
                    "seed": seed,
                    "n_train": observed.n_observed,
                    "n_test": held_out.n_observed,
                }
                if held_out.n_observed == 0:
                    row.update(
                        mse=math.nan, mae=math.nan, ndcg_at_5=math.nan,
                        n_users_ranked=0, status="no-test-cells",
                    )
                    rows.append(row)
                    continue
                config = dataclasses.replace(base_config, seed=seed)
                data = split_dataset(observed, val_fraction, seed)
                model, _ = train_method(data, config, method)
                report = evaluate_predictions(
                    _predict_matrix(model), held_out,
                    metadata={"method": method, "observed_ratio": ratio,
                              "seed": seed},
                )
                row.update(
                    mse=report.mse, mae=report.mae, ndcg_at_5=report.ndcg_at_5,
                    n_users_ranked=report.n_users_ranked, status="ok",
                )
                rows.append(row)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in SWEEP_CSV_FIELDS})


def sweep_summary(rows, method, metric="mse"):
    """Mean metric per observed ratio for one method, sorted by ratio."""
    by_ratio = {}
    for row in rows:
        if row["method"] == method and row["status"] == "ok":
            by_ratio.setdefault(row["observed_ratio"], []).append(row[metric])
    return {
        ratio: float(np.mean(values))
        for ratio, values in sorted(by_ratio.items())
    }
