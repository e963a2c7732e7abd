"""Pointwise and ranking metrics over held-out rating pairs.

nDCG@k uses the raw true rating as gain and a log2(rank+1) discount.
Items are ranked by predicted rating descending with ties broken by item
index ascending, the ideal ordering ranks by true rating descending, and
only users with at least two held-out items are ranked. Those choices
are echoed into every report's metadata so result tables stay
self-describing.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ArgumentError

__all__ = ["MetricReport", "pointwise_metrics", "ndcg_at_k", "evaluate_predictions"]

NDCG_DEFINITION = "gain=raw rating, discount=log2(rank+1), min 2 test items per user"


@dataclasses.dataclass
class MetricReport:
    """Metric values plus the experiment coordinates that produced them."""

    mse: float
    mae: float
    ndcg_at_5: float
    n_users_ranked: int
    metadata: dict

    def csv_fields(self):
        out = dict(self.metadata)
        out.update(
            mse=self.mse, mae=self.mae, ndcg_at_5=self.ndcg_at_5,
            n_users_ranked=self.n_users_ranked,
        )
        return out


def _test_predictions(pred_matrix, test):
    if test.n_observed == 0:
        raise ArgumentError("empty test set")
    pred_matrix = np.asarray(pred_matrix, dtype=np.float64)
    if pred_matrix.shape != (test.n_users, test.n_items):
        raise ArgumentError(
            f"prediction matrix shape {pred_matrix.shape} does not match "
            f"universe {(test.n_users, test.n_items)}"
        )
    return pred_matrix[test.users, test.items]


def pointwise_metrics(pred_matrix, test):
    """(mse, mae) over the test pairs."""
    pred = _test_predictions(pred_matrix, test)
    err = pred - test.ratings
    return float(np.mean(err**2)), float(np.mean(np.abs(err)))


def _dcg(gains):
    ranks = np.arange(1, len(gains) + 1)
    return float(np.sum(gains / np.log2(ranks + 1)))


def ndcg_at_k(pred_matrix, test, k=5):
    """Mean per-user nDCG@k over users with >= 2 test items."""
    if k < 1:
        raise ArgumentError("k must be >= 1")
    pred = _test_predictions(pred_matrix, test)
    values = []
    for u in np.unique(test.users):
        rows = np.flatnonzero(test.users == u)
        if len(rows) < 2:
            continue
        items = test.items[rows]
        truth = test.ratings[rows]
        scores = pred[rows]
        # predicted order: score descending, item index ascending on ties
        order = np.lexsort((items, -scores))
        ideal = np.sort(truth)[::-1]
        dcg = _dcg(truth[order][:k])
        idcg = _dcg(ideal[:k])
        if idcg > 0:
            values.append(dcg / idcg)
    if not values:
        raise ArgumentError("no users with >= 2 test items to rank")
    return float(np.mean(values)), len(values)


def evaluate_predictions(pred_matrix, test, metadata=None):
    """Build the full metric report for one prediction matrix."""
    mse, mae = pointwise_metrics(pred_matrix, test)
    ndcg, n_ranked = ndcg_at_k(pred_matrix, test, k=5)
    meta = {"ndcg_definition": NDCG_DEFINITION}
    if metadata:
        meta.update(metadata)
    return MetricReport(
        mse=mse, mae=mae, ndcg_at_5=ndcg, n_users_ranked=n_ranked, metadata=meta
    )
