"""Classical debiasing estimators and their shared propensity model.

The estimator functions are pure array computations so they can be
checked by exact enumeration over exposure patterns; the training-side
wrappers in `train` reuse them through the autodiff engine. Throughout,
`errors` means per-pair squared prediction errors e_{u,i}.

The propensity model is a logistic regression on the concatenated
(frozen) user/item embeddings plus per-user, per-item, and global bias
terms, fit on the observation indicator with 1:1 uniform negative
sampling. Predictions are clipped from below before any division.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .errors import ArgumentError

__all__ = [
    "naive_loss",
    "ips_loss",
    "snips_loss",
    "dr_loss",
    "PropensityModel",
    "fit_propensity",
]


def _errors(predictions, ratings):
    predictions = np.asarray(predictions, dtype=np.float64)
    ratings = np.asarray(ratings, dtype=np.float64)
    if predictions.size == 0:
        raise ArgumentError("empty batch")
    return (predictions - ratings) ** 2


def naive_loss(predictions, ratings):
    """Mean squared error over observed pairs only."""
    return float(_errors(predictions, ratings).mean())


def ips_loss(predictions, ratings, propensities, n_total_pairs):
    """Inverse-propensity estimate of the all-pairs mean error.

    sum over observed pairs of e/p, divided by the total number of
    user-item pairs. Propensities are expected to be pre-clipped.
    """
    err = _errors(predictions, ratings)
    propensities = np.asarray(propensities, dtype=np.float64)
    return float(np.sum(err / propensities) / n_total_pairs)


def snips_loss(predictions, ratings, propensities):
    """Self-normalized variant: (sum e/p) / (sum 1/p).

    Invariant to rescaling all propensities by a common factor; for a
    single pair it returns that pair's error exactly.
    """
    err = _errors(predictions, ratings)
    inv = 1.0 / np.asarray(propensities, dtype=np.float64)
    return float(np.sum(err * inv) / np.sum(inv))


def dr_loss(imputed_errors, observed_mask, observed_errors, propensities):
    """Doubly robust estimate over a sample of all user-item pairs.

    mean over the sample of [e_hat + o * (e - e_hat) / p]. `observed_errors`
    only matters where the mask is 1. Unbiased when either the imputed
    errors or the propensities are correct.
    """
    imputed = np.asarray(imputed_errors, dtype=np.float64)
    if imputed.size == 0:
        raise ArgumentError("empty batch")
    mask = np.asarray(observed_mask, dtype=np.float64)
    err = np.asarray(observed_errors, dtype=np.float64)
    p = np.asarray(propensities, dtype=np.float64)
    return float(np.mean(imputed + mask * (err - imputed) / p))


@dataclasses.dataclass
class PropensityModel:
    """Logistic observation-probability model over pair features."""

    feature_weights: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: float
    user_table: np.ndarray
    item_table: np.ndarray
    clip: float

    def logits(self, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        features = np.concatenate(
            [self.user_table[users], self.item_table[items]], axis=1
        )
        return (
            features @ self.feature_weights
            + self.user_bias[users]
            + self.item_bias[items]
            + self.global_bias
        )

    def predict(self, users, items):
        """Clipped observation probabilities in [clip, 1)."""
        return np.clip(expit(self.logits(users, items)), self.clip, 1.0)


def fit_propensity(dataset, tables, clip=0.05, seed=0, epochs=30,
                   batch_size=1024, learning_rate=0.05):
    """Fit the logistic propensity model on the observation indicator.

    Each epoch pairs every observed (u, i) with one unobserved pair
    drawn uniformly; the embedding tables stay frozen and only the
    logistic weights train.
    """
    n_users, n_items = dataset.n_users, dataset.n_items
    k = tables.user_table.shape[1]
    params = ad.ParamSet([
        ad.ParamBlock("w", np.zeros(2 * k)),
        ad.ParamBlock("bu", np.zeros(n_users), decay=False),
        ad.ParamBlock("bi", np.zeros(n_items), decay=False),
        ad.ParamBlock("b0", np.asarray(0.0), decay=False),
    ])
    state = ad.adam_init(params, learning_rate)
    mask, _ = dataset.dense()
    unobserved = np.flatnonzero(mask.ravel() == 0.0)
    rng = np.random.default_rng(seed)
    user_feat = tables.user_table
    item_feat = tables.item_table

    def loss_fn_for(users, items, labels):
        features = np.concatenate([user_feat[users], item_feat[items]], axis=1)

        def loss_fn(leaves):
            logits = (
                (ad.Tensor(features) * leaves["w"]).sum(axis=1)
                + ad.take_rows(leaves["bu"], users)
                + ad.take_rows(leaves["bi"], items)
                + leaves["b0"]
            )
            return (ad.softplus(logits) - logits * labels).mean()

        return loss_fn

    n_obs = dataset.n_observed
    for _ in range(epochs):
        order = rng.permutation(n_obs)
        for start in range(0, n_obs, batch_size):
            take = order[start:start + batch_size]
            pos_u, pos_i = dataset.users[take], dataset.items[take]
            if unobserved.size:
                neg_flat = rng.choice(unobserved, size=len(take))
                neg_u, neg_i = neg_flat // n_items, neg_flat % n_items
                users = np.concatenate([pos_u, neg_u])
                items = np.concatenate([pos_i, neg_i])
                labels = np.concatenate([np.ones(len(take)), np.zeros(len(take))])
            else:
                users, items, labels = pos_u, pos_i, np.ones(len(take))
            _, grads = ad.value_and_grad(loss_fn_for(users, items, labels), params)
            ad.adam_step(state, params, grads)
    return PropensityModel(
        feature_weights=params["w"].values.copy(),
        user_bias=params["bu"].values.copy(),
        item_bias=params["bi"].values.copy(),
        global_bias=float(params["b0"].values),
        user_table=user_feat.copy(),
        item_table=item_feat.copy(),
        clip=clip,
    )
