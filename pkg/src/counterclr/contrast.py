"""Preference-distribution embeddings and the user-level contrastive loss.

A user's rating vector is summarized by K sigmoid-smoothed threshold
averages: component k is the mean of sigmoid(tau * (t_k - r_i)) over the
covered items, with thresholds t_k spaced evenly from just above r_min
up to r_max. As tau grows this converges to the empirical CDF of the
vector sampled at the thresholds, and unlike a hard CDF it is
differentiable in every rating.

The contrastive objective treats each user's exposure-vector embedding
as the query and the non-exposure embeddings of all batch users as keys:
softmax over scaled inner products, with the user's own key as the
positive. Predicted ratings enter the extractor raw (no clipping to the
rating scale): clipping would flatten gradients exactly where training
has to move predictions.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .caunet import EXPOSURE_B, EXPOSURE_W, NONEXPOSURE_B, NONEXPOSURE_W
from .data import RatingScale
from .errors import ArgumentError

__all__ = [
    "RatingVectorPair",
    "PreferenceEmbedding",
    "thresholds",
    "extract_preference_t",
    "extract_preference",
    "rating_vectors_t",
    "assemble_rating_vectors",
    "contrastive_loss_t",
    "contrastive_loss",
]


@dataclasses.dataclass
class RatingVectorPair:
    """Per-item exposure/non-exposure ratings for one user.

    The exposure vector carries the true rating wherever the pair is
    observed and the predicted exposure rating elsewhere; the
    non-exposure vector is predicted everywhere.
    """

    exposure: np.ndarray
    nonexposure: np.ndarray
    item_subset: np.ndarray | None = None


@dataclasses.dataclass
class PreferenceEmbedding:
    """K-component smoothed-CDF summary of one rating vector."""

    values: np.ndarray
    tau: float
    scale: RatingScale


def thresholds(k_dim, scale):
    """t_k = (k/K) r_max + ((K-k)/K) r_min for k = 1..K."""
    k = np.arange(1, k_dim + 1, dtype=np.float64)
    return (k / k_dim) * scale.r_max + ((k_dim - k) / k_dim) * scale.r_min


def extract_preference_t(r_vec, k_dim, scale, tau):
    """Tape version over (B, M) rating-vector tensors; returns (B, K)."""
    n_items = r_vec.shape[1]
    t = thresholds(k_dim, scale)
    diff = (-r_vec.reshape(r_vec.shape[0], n_items, 1)) + t[None, None, :]
    return ad.sigmoid(diff * tau).mean(axis=1)


def extract_preference(r_vec, k_dim, scale, tau):
    """Smoothed-CDF embedding of one rating vector."""
    r_vec = np.asarray(r_vec, dtype=np.float64)
    if r_vec.ndim != 1 or r_vec.size < 1:
        raise ArgumentError("rating vector must be 1-D and nonempty")
    if k_dim < 1:
        raise ArgumentError("embedding dimension must be >= 1")
    if tau <= 0:
        raise ArgumentError("tau must be positive")
    values = extract_preference_t(ad.Tensor(r_vec[None, :]), k_dim, scale, tau)
    return PreferenceEmbedding(values=values.value[0], tau=tau, scale=scale)


def rating_vectors_t(model, leaves, users, obs_mask, obs_ratings,
                     item_subset=None):
    """Exposure/non-exposure rating-vector tensors for a user batch.

    Returns two (B, M') tensors where M' is the item-subset size (all
    items if no subset). `obs_mask` and `obs_ratings` are the dense
    observation indicator and rating matrices of the training data;
    observed positions contribute their true ratings as constants, so
    gradient flows only through predicted entries.
    """
    users = np.asarray(users, dtype=np.int64)
    if item_subset is None:
        items = np.arange(model.n_items)
    else:
        items = np.asarray(item_subset, dtype=np.int64)
        if items.size == 0:
            raise ArgumentError("item subset must be nonempty")
    n_u, n_i = len(users), len(items)
    z = bb.grid_pair_z_t(model.encoder, leaves, users, items)
    r1 = ((z * leaves[EXPOSURE_W]).sum(axis=1) + leaves[EXPOSURE_B]).reshape(n_u, n_i)
    r0 = ((z * leaves[NONEXPOSURE_W]).sum(axis=1) + leaves[NONEXPOSURE_B]).reshape(n_u, n_i)
    mask = obs_mask[np.ix_(users, items)]
    truth = obs_ratings[np.ix_(users, items)]
    exposure = r1 * (1.0 - mask) + mask * truth
    return exposure, r0


def assemble_rating_vectors(model, dataset, u, item_subset=None):
    """Rating-vector pair for one user of a dataset, as plain arrays."""
    if not 0 <= u < model.n_users:
        raise ArgumentError(f"user index {u} out of range [0, {model.n_users})")
    obs_mask, obs_ratings = dataset.dense()
    leaves = model.params.leaves()
    exposure, nonexposure = rating_vectors_t(
        model, leaves, np.asarray([u]), obs_mask, obs_ratings, item_subset
    )
    return RatingVectorPair(
        exposure=exposure.value[0],
        nonexposure=nonexposure.value[0],
        item_subset=None if item_subset is None else np.asarray(item_subset),
    )


def contrastive_loss_t(f_exposure, f_nonexposure, temperature):
    """Sum over batch users of the softmax pull-together loss.

    Logits are inner products of exposure embeddings against every
    non-exposure embedding in the batch, divided by the temperature; the
    diagonal is the positive pair. Rows are reduced with max-subtracted
    log-sum-exp, so a constant shift of a row's logits cancels exactly.
    """
    logits = (f_exposure @ f_nonexposure.T) * (1.0 / temperature)
    n = logits.shape[0]
    diag = (logits * np.eye(n)).sum(axis=1)
    return (ad.logsumexp(logits, axis=1) - diag).sum()


def contrastive_loss(batch_users, f_exposure, f_nonexposure, temperature):
    """Batch contrastive loss over per-user embedding pairs, as a float.

    `batch_users` must not contain duplicates: every non-diagonal row
    entry is meant to be a genuinely different user.
    """
    batch_users = list(batch_users)
    if len(batch_users) == 0:
        raise ArgumentError("contrastive batch must contain at least one user")
    if len(set(batch_users)) != len(batch_users):
        raise ArgumentError("duplicate users in contrastive batch")
    if temperature <= 0:
        raise ArgumentError("temperature must be positive")
    f1 = np.asarray(f_exposure, dtype=np.float64)
    f0 = np.asarray(f_nonexposure, dtype=np.float64)
    if f1.shape != f0.shape or f1.ndim != 2 or f1.shape[0] != len(batch_users):
        raise ArgumentError("embedding arrays must both be (batch, K)")
    out = contrastive_loss_t(ad.Tensor(f1), ad.Tensor(f0), temperature)
    return float(out.value)
