"""The causal three-headed network and its training loss.

On top of the shared representation z sit an exposure rating head, a
structurally identical non-exposure rating head, and a propensity head.
The non-exposure head never receives gradient updates: it is created as
an exact copy of the exposure head and afterwards only tracks it through
the exponential-moving-average `momentum_update`. The propensity head is
a fixed random projection followed by a sigmoid; it is trained only in
the sense that the representation feeding it is trained.

The training loss combines a propensity-weighted squared error over
observed pairs (the inverse-propensity divisor is clipped from below and
treated as a constant during differentiation) with a binary
cross-entropy of the propensity against the observation indicator.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import backbone as bb
from .data import RatingScale
from .errors import ArgumentError, NumericalError

__all__ = [
    "CauNetModel",
    "PredictionBundle",
    "init_caunet",
    "forward_t",
    "forward",
    "predict_matrix",
    "momentum_update",
    "base_loss_t",
    "propensity_loss_t",
    "causal_loss",
]

EXPOSURE_W = "head_exposure_w"
EXPOSURE_B = "head_exposure_b"
NONEXPOSURE_W = "head_nonexposure_w"
NONEXPOSURE_B = "head_nonexposure_b"
PROPENSITY_VEC = "propensity_vector"


@dataclasses.dataclass
class CauNetModel:
    """Parameter set plus the hyperparameters the loss needs."""

    n_users: int
    n_items: int
    scale: RatingScale
    encoder: bb.EncoderConfig
    params: ad.ParamSet
    alpha: float = 1.0
    momentum: float = 0.999
    propensity_clip: float = 0.05

    def embedding_tables(self):
        return bb.EmbeddingTables(
            self.params[bb.USER_EMB].values, self.params[bb.ITEM_EMB].values
        )

    def copy(self):
        return dataclasses.replace(self, params=self.params.copy())


@dataclasses.dataclass
class PredictionBundle:
    """Per-pair exposure rating, non-exposure rating, and propensity."""

    r1_hat: np.ndarray
    r0_hat: np.ndarray
    o_hat: np.ndarray


def init_caunet(n_users, n_items, scale, encoder, rng, alpha=1.0,
                momentum=0.999, propensity_clip=0.05):
    """Build a fresh model; draw order is embeddings, encoder, heads.

    The exposure head starts with Gaussian weights and its bias at the
    scale midpoint so initial predictions sit mid-scale; the non-exposure
    head starts as an exact copy. The propensity vector has Gaussian
    entries scaled by 1/sqrt(z_dim) and is frozen afterwards.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ArgumentError("momentum must be in [0, 1]")
    if not 0.0 < propensity_clip <= 1.0:
        raise ArgumentError("propensity_clip must be in (0, 1]")
    blocks = bb.init_embedding_blocks(n_users, n_items, encoder.k, rng)
    blocks += bb.init_encoder_blocks(encoder, rng)
    p = bb.head_dim(encoder)
    w2 = bb.WEIGHT_INIT_STD * rng.standard_normal(p)
    b2 = np.asarray(scale.midpoint)
    blocks.append(ad.ParamBlock(EXPOSURE_W, w2))
    blocks.append(ad.ParamBlock(EXPOSURE_B, b2, decay=False))
    blocks.append(ad.ParamBlock(NONEXPOSURE_W, w2.copy(), trainable=False))
    blocks.append(ad.ParamBlock(NONEXPOSURE_B, b2.copy(), trainable=False, decay=False))
    h = rng.standard_normal(p) / np.sqrt(p)
    blocks.append(ad.ParamBlock(PROPENSITY_VEC, h, trainable=False))
    return CauNetModel(
        n_users=n_users,
        n_items=n_items,
        scale=scale,
        encoder=encoder,
        params=ad.ParamSet(blocks),
        alpha=alpha,
        momentum=momentum,
        propensity_clip=propensity_clip,
    )


def _affine_head(leaves, w_name, b_name, z):
    return (z * leaves[w_name]).sum(axis=1) + leaves[b_name]


def encode_pairs_t(model, leaves, users, items):
    return bb.pair_z_t(model.encoder, leaves, users, items)


def forward_t(model, leaves, users, items, z=None):
    """Tape forward: (r1_hat, r0_hat, propensity logit), each (B,)."""
    if z is None:
        z = encode_pairs_t(model, leaves, users, items)
    r1 = _affine_head(leaves, EXPOSURE_W, EXPOSURE_B, z)
    r0 = _affine_head(leaves, NONEXPOSURE_W, NONEXPOSURE_B, z)
    o_logit = (z * leaves[PROPENSITY_VEC]).sum(axis=1)
    return r1, r0, o_logit


def forward(model, u, i):
    """Predict the exposure/non-exposure ratings and the propensity."""
    users = np.atleast_1d(np.asarray(u, dtype=np.int64))
    items = np.atleast_1d(np.asarray(i, dtype=np.int64))
    if users.size and (users.min() < 0 or users.max() >= model.n_users):
        raise ArgumentError(f"user index out of range [0, {model.n_users})")
    if items.size and (items.min() < 0 or items.max() >= model.n_items):
        raise ArgumentError(f"item index out of range [0, {model.n_items})")
    leaves = model.params.leaves()
    r1, r0, o_logit = forward_t(model, leaves, users, items)
    values = (r1.value, r0.value, expit(o_logit.value))
    for name, v in zip(("r1_hat", "r0_hat", "o_hat"), values):
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite {name} in forward pass")
    if np.isscalar(u):
        return PredictionBundle(*(float(v[0]) for v in values))
    return PredictionBundle(*values)


def predict_matrix(model):
    """Exposure-rating predictions for every (user, item) pair."""
    users = np.repeat(np.arange(model.n_users), model.n_items)
    items = np.tile(np.arange(model.n_items), model.n_users)
    bundle = forward(model, users, items)
    return bundle.r1_hat.reshape(model.n_users, model.n_items)


def momentum_update(model):
    """W3 <- m * W3 + (1 - m) * W2, elementwise, in place."""
    m = model.momentum
    for w3_name, w2_name in (
        (NONEXPOSURE_W, EXPOSURE_W),
        (NONEXPOSURE_B, EXPOSURE_B),
    ):
        w3 = model.params[w3_name].values
        w3 *= m
        w3 += (1.0 - m) * model.params[w2_name].values


def clipped_propensity(model, o_logit_value):
    """Constant (stop-gradient) inverse-propensity divisor for the base loss."""
    return np.clip(expit(o_logit_value), model.propensity_clip, 1.0)


def base_loss_t(model, leaves, users, items, ratings, z=None, divisor=None):
    """Mean propensity-weighted squared error over an observed batch.

    The divisor is the clipped propensity evaluated as a plain array, so
    no gradient flows through it into the representation. By default it
    is recomputed from the current parameters and then frozen (the
    training behavior); passing `divisor` pins it to an explicit array,
    which is what a finite-difference sweep of this loss needs.
    """
    if len(np.atleast_1d(users)) == 0:
        raise ArgumentError("base loss needs a nonempty observed batch")
    r1, _, o_logit = forward_t(model, leaves, users, items, z=z)
    if divisor is None:
        divisor = clipped_propensity(model, o_logit.value)
    err = r1 - np.asarray(ratings, dtype=np.float64)
    return (err.square() * (1.0 / divisor)).mean()


def propensity_loss_t(model, leaves, users, items, labels, z=None,
                      weights=None):
    """Binary cross-entropy of the propensity against labels in {0,1}.

    Without `weights` this is the plain mean over the batch. A weight
    vector (summing to 1) turns it into an importance-weighted mean;
    the trainer uses that to keep 1:1 positive/negative sampling an
    unbiased, calibration-preserving estimate of the all-pairs average,
    where positives really make up only the observed fraction.
    """
    _, _, o_logit = forward_t(model, leaves, users, items, z=z)
    labels = np.asarray(labels, dtype=np.float64)
    # softplus(x) - x*y == -[y*log(sigmoid) + (1-y)*log(1-sigmoid)]
    bce = ad.softplus(o_logit) - o_logit * labels
    if weights is None:
        return bce.mean()
    return (bce * np.asarray(weights, dtype=np.float64)).sum()


def causal_loss(model, observed_batch, propensity_batch=None):
    """Weighted base loss plus alpha times the propensity loss, as a float.

    `observed_batch` is (users, items, ratings) over observed pairs;
    `propensity_batch` is (users, items, labels) mixing observed (1) and
    unobserved (0) pairs. With alpha == 0 or no propensity batch, only
    the base term is evaluated.
    """
    users, items, ratings = observed_batch
    if len(np.atleast_1d(users)) == 0:
        raise ArgumentError("causal loss needs a nonempty observed batch")
    leaves = model.params.leaves()
    total = base_loss_t(model, leaves, users, items, ratings)
    if propensity_batch is not None and model.alpha != 0.0:
        pu, pi, labels = propensity_batch
        total = total + model.alpha * propensity_loss_t(model, leaves, pu, pi, labels)
    value = float(total.value)
    if not np.isfinite(value):
        raise NumericalError("causal loss is non-finite")
    return value
