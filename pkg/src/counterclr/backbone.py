"""Embeddings, the concatenated pair representation, and the encoders.

Two encoder modes exist. ``mf`` keeps the concatenated embedding pair as
the representation (identity encoder, no weights), so downstream heads
are affine in (e_u, e_i); the classical dot-product predictor is kept
separately for the reweighting baselines. ``ncf`` runs the pair through
a feed-forward stack with tanh between layers; tanh is everywhere
differentiable, which keeps finite-difference gradient checks clean.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError

__all__ = [
    "EmbeddingTables",
    "EncoderConfig",
    "USER_EMB",
    "ITEM_EMB",
    "init_embedding_blocks",
    "init_encoder_blocks",
    "pair_embedding_t",
    "pair_embedding",
    "mf_predict_t",
    "mf_predict",
    "encode_t",
    "encode",
    "head_dim",
    "pair_z_t",
    "grid_pair_z_t",
]

USER_EMB = "user_embeddings"
ITEM_EMB = "item_embeddings"

EMBEDDING_INIT_STD = 0.1
WEIGHT_INIT_STD = 0.1


@dataclasses.dataclass(frozen=True)
class EmbeddingTables:
    """Plain-array view of the two embedding tables."""

    user_table: np.ndarray
    item_table: np.ndarray

    @property
    def k(self):
        return self.user_table.shape[1]


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    """Shape of the representation z produced from the 2K pair vector."""

    mode: str
    k: int
    hidden_dims: tuple = ()
    z_dim: int = 0

    def __post_init__(self):
        if self.mode not in ("mf", "ncf"):
            raise ArgumentError(f"unknown encoder mode {self.mode!r}")
        if self.k < 1:
            raise ArgumentError("embedding dimension must be >= 1")
        if self.mode == "mf":
            # identity encoder on the concatenation
            object.__setattr__(self, "hidden_dims", ())
            object.__setattr__(self, "z_dim", 2 * self.k)
        else:
            if not self.hidden_dims:
                object.__setattr__(self, "hidden_dims", (2 * self.k,))
            if self.z_dim <= 0:
                object.__setattr__(self, "z_dim", self.k)

    def layer_dims(self):
        """(in, out) pairs for the affine layers of the ncf stack."""
        dims = (2 * self.k, *self.hidden_dims, self.z_dim)
        return list(zip(dims[:-1], dims[1:]))


def init_embedding_blocks(n_users, n_items, k, rng, std=EMBEDDING_INIT_STD):
    """Zero-mean Gaussian tables, drawn user table first."""
    return [
        ad.ParamBlock(USER_EMB, std * rng.standard_normal((n_users, k))),
        ad.ParamBlock(ITEM_EMB, std * rng.standard_normal((n_items, k))),
    ]


def init_encoder_blocks(config, rng, std=WEIGHT_INIT_STD):
    """Gaussian weights and zero biases, one (w, b) pair per affine layer."""
    if config.mode == "mf":
        return []
    blocks = []
    for idx, (d_in, d_out) in enumerate(config.layer_dims()):
        blocks.append(
            ad.ParamBlock(f"encoder_w{idx}", std * rng.standard_normal((d_in, d_out)))
        )
        blocks.append(
            ad.ParamBlock(f"encoder_b{idx}", np.zeros(d_out), decay=False)
        )
    return blocks


def _check_indices(n_users, n_items, users, items):
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    if users.size and (users.min() < 0 or users.max() >= n_users):
        raise ArgumentError(f"user index out of range [0, {n_users})")
    if items.size and (items.min() < 0 or items.max() >= n_items):
        raise ArgumentError(f"item index out of range [0, {n_items})")
    return users, items


def pair_embedding_t(leaves, users, items):
    """(B, 2K) tensor: user embedding rows then item embedding rows."""
    e_u = ad.take_rows(leaves[USER_EMB], users)
    e_i = ad.take_rows(leaves[ITEM_EMB], items)
    return ad.concat([e_u, e_i], axis=1)


def pair_embedding(tables, u, i):
    """Concatenation (e_u, e_i), user part first."""
    users, items = _check_indices(
        tables.user_table.shape[0], tables.item_table.shape[0], u, i
    )
    out = np.concatenate(
        [tables.user_table[users], tables.item_table[items]], axis=1
    )
    return out[0] if np.isscalar(u) else out


def mf_predict_t(leaves, users, items):
    """Row-wise inner products of the two embedding tables."""
    e_u = ad.take_rows(leaves[USER_EMB], users)
    e_i = ad.take_rows(leaves[ITEM_EMB], items)
    return (e_u * e_i).sum(axis=1)


def mf_predict(tables, u, i):
    """Classical dot-product rating prediction e_u . e_i."""
    users, items = _check_indices(
        tables.user_table.shape[0], tables.item_table.shape[0], u, i
    )
    out = np.einsum("ij,ij->i", tables.user_table[users], tables.item_table[items])
    return float(out[0]) if np.isscalar(u) else out


def encode_t(config, leaves, x):
    """Map (B, 2K) pair tensors to (B, z_dim) representations."""
    if config.mode == "mf":
        return x
    h = x
    n_layers = len(config.layer_dims())
    for idx in range(n_layers):
        h = h @ leaves[f"encoder_w{idx}"] + leaves[f"encoder_b{idx}"]
        if idx < n_layers - 1:
            h = ad.tanh(h)
    return h


def encode(config, blocks, x):
    """Array-in, array-out convenience wrapper around encode_t."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != 2 * config.k:
        raise ArgumentError(
            f"expected pair vectors of length {2 * config.k}, got {x.shape[1]}"
        )
    leaves = {name: ad.Tensor(values) for name, values in blocks.items()}
    out = encode_t(config, leaves, ad.Tensor(x)).value
    return out[0] if single else out


def head_dim(config):
    """Width of the representation the rating/propensity heads consume.

    In mf mode this is K: the heads see the elementwise product
    e_u * e_i, so an affine head strictly contains the classical
    dot-product predictor (weights all ones, bias zero). Feeding the
    raw concatenation instead would hand the heads per-user/per-item
    linear terms, which under exposure bias act as a fast memorization
    channel for the biased per-user means and wreck extrapolation to
    unobserved cells.
    """
    if config.mode == "mf":
        return config.k
    return config.z_dim


def _features_from_parts(config, leaves, e_u, e_i):
    if config.mode == "mf":
        return e_u * e_i
    return encode_t(config, leaves, ad.concat([e_u, e_i], axis=1))


def pair_z_t(config, leaves, users, items):
    """(B, head_dim) representation tensors for index-aligned pairs."""
    e_u = ad.take_rows(leaves[USER_EMB], users)
    e_i = ad.take_rows(leaves[ITEM_EMB], items)
    return _features_from_parts(config, leaves, e_u, e_i)


def grid_pair_z_t(config, leaves, users, items):
    """Representations for the full users x items grid, row-major.

    Built from repeat/tile so the backward pass reduces with reshape
    sums instead of scatter-adds over B*M gathered rows.
    """
    e_u = ad.repeat_rows(ad.take_rows(leaves[USER_EMB], users), len(items))
    e_i = ad.tile_rows(ad.take_rows(leaves[ITEM_EMB], items), len(users))
    return _features_from_parts(config, leaves, e_u, e_i)
