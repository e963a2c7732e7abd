"""Training loops: the full causal-contrastive objective and baselines.

Per step the main loop (1) draws an observed minibatch, (2) adds one
uniformly drawn unobserved companion per observed pair for the
propensity term, (3) draws a user sub-batch, assembles its rating
vectors, and computes the contrastive term, (4) takes one Adam step on
all trainable blocks, and (5) applies the momentum update to the
non-exposure head. Model selection keeps the epoch with the lowest
validation MSE; training stops early after `patience` epochs without
improvement.

Every random decision comes from one of four child streams spawned from
the config seed (init, batch order, propensity negatives, contrastive
users), so switching a term off (alpha or beta = 0) leaves the other
streams untouched and runs are reproducible bit for bit.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
import time

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import caunet as cn
from . import contrast as ct
from .baselines import fit_propensity
from .errors import ArgumentError, NumericalError, TrainingError

__all__ = [
    "TrainConfig",
    "TrainReport",
    "BaselineModel",
    "BASELINE_METHODS",
    "full_objective_loss",
    "train_counterclr",
    "train_baseline",
    "train_method",
    "grid_search",
]

BASELINE_METHODS = ("naive", "ips", "snips", "dr")


@dataclasses.dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    mode: str = "mf"
    k: int = 10
    hidden_dims: tuple | None = None
    z_dim: int | None = None
    alpha: float = 1.0
    beta: float = 1.0
    temperature: float = 0.07
    tau: float = 1.0
    momentum: float = 0.999
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    batch_size: int = 512
    epochs: int = 100
    seed: int = 0
    contrastive_users_per_batch: int = 64
    contrastive_item_subset: int | None = None
    propensity_clip: float = 0.05
    patience: int = 10
    selection: str = "snips"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.k < 1:
            raise ArgumentError("batch_size, epochs, and k must be positive")
        for name in ("temperature", "tau", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ArgumentError(f"{name} must be positive")
        for name in ("alpha", "beta", "weight_decay"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be nonnegative")
        if not 0.0 <= self.momentum <= 1.0:
            raise ArgumentError("momentum must be in [0, 1]")
        if self.selection not in ("snips", "plain"):
            raise ArgumentError("selection must be 'snips' or 'plain'")

    def encoder_config(self):
        return bb.EncoderConfig(
            mode=self.mode,
            k=self.k,
            hidden_dims=tuple(self.hidden_dims) if self.hidden_dims else (),
            z_dim=self.z_dim or 0,
        )

    def to_dict(self):
        out = dataclasses.asdict(self)
        if out["hidden_dims"] is not None:
            out["hidden_dims"] = list(out["hidden_dims"])
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ArgumentError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if data.get("hidden_dims") is not None:
            data["hidden_dims"] = tuple(data["hidden_dims"])
        return cls(**data)


@dataclasses.dataclass
class TrainReport:
    """Per-epoch loss components, validation metrics, and the winner."""

    method: str
    epochs: list
    best_epoch: int
    best_val_mse: float
    wall_clock_seconds: float
    config: dict


def _spawn_rngs(seed):
    init_ss, batch_ss, pro_ss, con_ss = np.random.SeedSequence(seed).spawn(4)
    return (
        np.random.default_rng(init_ss),
        np.random.default_rng(batch_ss),
        np.random.default_rng(pro_ss),
        np.random.default_rng(con_ss),
    )


def _val_mse(predict_pairs, split):
    val = split.validation
    pred = predict_pairs(val.users, val.items)
    return float(np.mean((pred - val.ratings) ** 2))


def _check_split(split):
    if split.train.n_observed == 0:
        raise ArgumentError("training set is empty")
    if split.validation.n_observed == 0:
        raise ArgumentError("model selection needs a nonempty validation set")


def full_objective_loss(model, dataset, alpha, beta, temperature, tau):
    """Closure computing the complete objective on a whole dataset.

    Deterministic by construction: the base term runs over every
    observed pair, the propensity term over every cell with its true
    indicator, and the contrastive term over every user with full
    rating vectors. The inverse-propensity divisor is pinned at the
    model's current parameters, so the closure is exactly the function
    whose gradient one training step follows and stays valid under
    finite-difference perturbation. Intended for gradient verification
    at desk scale, not for training.
    """
    if dataset.n_observed == 0:
        raise ArgumentError("need at least one observed pair")
    mask, dense_ratings = dataset.dense()
    all_users = np.repeat(np.arange(dataset.n_users), dataset.n_items)
    all_items = np.tile(np.arange(dataset.n_items), dataset.n_users)
    labels = mask[all_users, all_items]
    users = dataset.users
    items = dataset.items
    ratings = dataset.ratings
    con_users = np.arange(dataset.n_users)
    base_leaves = model.params.leaves()
    _, _, o_logit = cn.forward_t(model, base_leaves, users, items)
    divisor = cn.clipped_propensity(model, o_logit.value)

    def loss_fn(leaves):
        total = cn.base_loss_t(model, leaves, users, items, ratings,
                               divisor=divisor)
        if alpha > 0:
            total = total + alpha * cn.propensity_loss_t(
                model, leaves, all_users, all_items, labels
            )
        if beta > 0:
            r1_vec, r0_vec = ct.rating_vectors_t(
                model, leaves, con_users, mask, dense_ratings
            )
            f1 = ct.extract_preference_t(r1_vec, model.encoder.k, dataset.scale, tau)
            f0 = ct.extract_preference_t(r0_vec, model.encoder.k, dataset.scale, tau)
            total = total + beta * ct.contrastive_loss_t(f1, f0, temperature)
        return total

    return loss_fn


def train_counterclr(split, config):
    """Train the three-headed model with the full weighted objective."""
    _check_split(split)
    train = split.train
    init_rng, batch_rng, pro_rng, con_rng = _spawn_rngs(config.seed)
    model = cn.init_caunet(
        train.n_users, train.n_items, train.scale, config.encoder_config(),
        init_rng, alpha=config.alpha, momentum=config.momentum,
        propensity_clip=config.propensity_clip,
    )
    state = ad.adam_init(
        model.params, config.learning_rate, weight_decay=config.weight_decay
    )
    mask, dense_ratings = train.dense()
    unobserved = np.flatnonzero(mask.ravel() == 0.0)
    n_con_users = min(config.contrastive_users_per_batch, train.n_users)
    # observed fraction: calibration weight for 1:1 sampled propensity batches
    observed_fraction = train.n_observed / (train.n_users * train.n_items)
    val = split.validation

    def val_metrics():
        """(plain val MSE, self-normalized inverse-propensity val MSE).

        Validation pairs are themselves exposure-biased, so the plain
        mean systematically prefers the least debiased epochs; the
        weighted form divides each squared error by the model's own
        clipped propensity and is the method's estimate of the all-pairs
        MSE. Which one drives model selection is config.selection.
        """
        leaves = model.params.leaves()
        r1, _, o_logit = cn.forward_t(model, leaves, val.users, val.items)
        err = (r1.value - val.ratings) ** 2
        inv = 1.0 / cn.clipped_propensity(model, o_logit.value)
        return float(err.mean()), float((err * inv).sum() / inv.sum())

    start_time = time.perf_counter()
    history = []
    best_val = math.inf
    best_params = None
    best_epoch = -1
    since_best = 0
    for epoch in range(config.epochs):
        order = batch_rng.permutation(train.n_observed)
        sums = {"l_base": 0.0, "l_pro": 0.0, "l_con": 0.0, "total": 0.0}
        n_steps = 0
        for lo in range(0, train.n_observed, config.batch_size):
            take = order[lo:lo + config.batch_size]
            users = train.users[take]
            items = train.items[take]
            ratings = train.ratings[take]
            if config.alpha > 0 and unobserved.size:
                neg = pro_rng.choice(unobserved, size=len(take))
                pro_users = np.concatenate([users, neg // train.n_items])
                pro_items = np.concatenate([items, neg % train.n_items])
                pro_labels = np.concatenate(
                    [np.ones(len(take)), np.zeros(len(take))]
                )
                pro_weights = np.concatenate([
                    np.full(len(take), observed_fraction / len(take)),
                    np.full(len(take), (1.0 - observed_fraction) / len(take)),
                ])
            else:
                pro_users = None
            if config.beta > 0:
                con_users = con_rng.choice(
                    train.n_users, size=n_con_users, replace=False
                )
                if config.contrastive_item_subset is not None:
                    con_items = con_rng.choice(
                        train.n_items,
                        size=min(config.contrastive_item_subset, train.n_items),
                        replace=False,
                    )
                else:
                    con_items = None

            parts = {}

            def loss_fn(leaves):
                total = cn.base_loss_t(model, leaves, users, items, ratings)
                parts["l_base"] = float(total.value)
                parts["l_pro"] = 0.0
                parts["l_con"] = 0.0
                if config.alpha > 0 and pro_users is not None:
                    l_pro = cn.propensity_loss_t(
                        model, leaves, pro_users, pro_items, pro_labels,
                        weights=pro_weights,
                    )
                    parts["l_pro"] = float(l_pro.value)
                    total = total + config.alpha * l_pro
                if config.beta > 0:
                    r1_vec, r0_vec = ct.rating_vectors_t(
                        model, leaves, con_users, mask, dense_ratings,
                        item_subset=con_items,
                    )
                    f1 = ct.extract_preference_t(
                        r1_vec, config.k, train.scale, config.tau
                    )
                    f0 = ct.extract_preference_t(
                        r0_vec, config.k, train.scale, config.tau
                    )
                    l_con = ct.contrastive_loss_t(
                        f1, f0, config.temperature
                    ) * (1.0 / len(con_users))
                    parts["l_con"] = float(l_con.value)
                    total = total + config.beta * l_con
                for name, value in parts.items():
                    if not math.isfinite(value):
                        raise NumericalError(f"{name} is non-finite")
                return total

            try:
                loss, grads = ad.value_and_grad(loss_fn, model.params)
            except NumericalError as exc:
                raise TrainingError(
                    f"diverged at epoch {epoch}, step {n_steps}: {exc}"
                ) from exc
            ad.adam_step(state, model.params, grads)
            cn.momentum_update(model)
            sums["l_base"] += parts["l_base"]
            sums["l_pro"] += parts["l_pro"]
            sums["l_con"] += parts["l_con"]
            sums["total"] += loss
            n_steps += 1
        val_mse, val_snips = val_metrics()
        history.append({
            "epoch": epoch,
            "l_base": sums["l_base"] / n_steps,
            "l_pro": sums["l_pro"] / n_steps,
            "l_con": sums["l_con"] / n_steps,
            "total": sums["total"] / n_steps,
            "val_mse": val_mse,
            "val_snips": val_snips,
        })
        metric = val_snips if config.selection == "snips" else val_mse
        if metric < best_val:
            best_val = metric
            best_params = model.params.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                break
    model.params = best_params
    report = TrainReport(
        method="counterclr",
        epochs=history,
        best_epoch=best_epoch,
        best_val_mse=best_val,
        wall_clock_seconds=time.perf_counter() - start_time,
        config=config.to_dict(),
    )
    return model, report


@dataclasses.dataclass
class BaselineModel:
    """A reweighting-baseline predictor: dot product or encoder + head."""

    n_users: int
    n_items: int
    scale: object
    encoder: bb.EncoderConfig | None
    params: ad.ParamSet
    method: str

    def predict_t(self, leaves, users, items):
        if self.encoder is None:
            return bb.mf_predict_t(leaves, users, items)
        x = bb.pair_embedding_t(leaves, users, items)
        z = bb.encode_t(self.encoder, leaves, x)
        return (z * leaves["head_w"]).sum(axis=1) + leaves["head_b"]

    def predict_pairs(self, users, items):
        return self.predict_t(self.params.leaves(), users, items).value

    def predict_matrix(self):
        users = np.repeat(np.arange(self.n_users), self.n_items)
        items = np.tile(np.arange(self.n_items), self.n_users)
        return self.predict_pairs(users, items).reshape(self.n_users, self.n_items)

    def embedding_tables(self):
        return bb.EmbeddingTables(
            self.params[bb.USER_EMB].values, self.params[bb.ITEM_EMB].values
        )

    def copy(self):
        return dataclasses.replace(self, params=self.params.copy())


def _init_baseline(train, config, init_rng, method):
    blocks = bb.init_embedding_blocks(
        train.n_users, train.n_items, config.k, init_rng
    )
    encoder = None
    if config.mode == "ncf":
        encoder = config.encoder_config()
        blocks += bb.init_encoder_blocks(encoder, init_rng)
        blocks.append(ad.ParamBlock(
            "head_w", bb.WEIGHT_INIT_STD * init_rng.standard_normal(encoder.z_dim)
        ))
        blocks.append(ad.ParamBlock(
            "head_b", np.asarray(train.scale.midpoint), decay=False
        ))
    return BaselineModel(
        n_users=train.n_users, n_items=train.n_items, scale=train.scale,
        encoder=encoder, params=ad.ParamSet(blocks), method=method,
    )


def _init_imputation(train, init_rng, k=4):
    """Tiny dot-product regressor for imputed per-pair errors."""
    blocks = [
        ad.ParamBlock("imp_user", 0.1 * init_rng.standard_normal((train.n_users, k))),
        ad.ParamBlock("imp_item", 0.1 * init_rng.standard_normal((train.n_items, k))),
        ad.ParamBlock("imp_bias", np.asarray(0.0), decay=False),
    ]
    return ad.ParamSet(blocks)


def _imputed_errors_t(leaves, users, items):
    e_u = ad.take_rows(leaves["imp_user"], users)
    e_i = ad.take_rows(leaves["imp_item"], items)
    return (e_u * e_i).sum(axis=1) + leaves["imp_bias"]


def train_baseline(split, config, method):
    """Train one of the reference estimators on the shared backbones.

    naive: plain MSE on observed pairs. ips/snips: propensity-weighted
    variants using the shared logistic propensity model (fit against a
    naive pretrain's frozen embeddings). dr: doubly robust objective
    with a jointly trained error-imputation model.
    """
    if method not in BASELINE_METHODS:
        raise ArgumentError(
            f"unknown baseline {method!r}; expected one of {BASELINE_METHODS}"
        )
    _check_split(split)
    train = split.train
    start_time = time.perf_counter()

    propensities = None
    if method in ("ips", "snips", "dr"):
        pretrain_cfg = dataclasses.replace(
            config, epochs=max(10, config.epochs // 3)
        )
        pretrained, _ = train_baseline(split, pretrain_cfg, "naive")
        prop_model = fit_propensity(
            train, pretrained.embedding_tables(),
            clip=config.propensity_clip, seed=config.seed,
        )
        propensities = prop_model.predict(train.users, train.items)

    init_rng, batch_rng, pro_rng, _ = _spawn_rngs(config.seed)
    model = _init_baseline(train, config, init_rng, method)
    state = ad.adam_init(
        model.params, config.learning_rate, weight_decay=config.weight_decay
    )
    imp_params = imp_state = None
    if method == "dr":
        imp_params = _init_imputation(train, init_rng)
        imp_state = ad.adam_init(imp_params, config.learning_rate)
    mask, _ = train.dense()
    n_total = train.n_users * train.n_items

    history = []
    best_val = math.inf
    best_params = None
    best_epoch = -1
    since_best = 0
    for epoch in range(config.epochs):
        order = batch_rng.permutation(train.n_observed)
        loss_sum = 0.0
        n_steps = 0
        for lo in range(0, train.n_observed, config.batch_size):
            take = order[lo:lo + config.batch_size]
            users = train.users[take]
            items = train.items[take]
            ratings = train.ratings[take]
            p_batch = propensities[take] if propensities is not None else None
            if method == "dr":
                flat = pro_rng.integers(0, n_total, size=len(take))
                d_users, d_items = flat // train.n_items, flat % train.n_items

            def loss_fn(leaves):
                err = (model.predict_t(leaves, users, items)
                       - ratings).square()
                if method == "naive":
                    return err.mean()
                if method == "ips":
                    return (err * (1.0 / p_batch)).mean()
                if method == "snips":
                    inv = 1.0 / p_batch
                    return (err * (inv / inv.sum())).sum()
                # dr: observed correction plus imputed error on a D-sample
                imp_obs = _imputed_errors_t(imp_params.leaves(), users, items).value
                imp_d = _imputed_errors_t(imp_params.leaves(), d_users, d_items).value
                corr = ((err - imp_obs) * (1.0 / p_batch)).sum()
                denom = len(take) + len(d_users)
                return (corr + float(imp_d.sum())) * (1.0 / denom)

            try:
                loss, grads = ad.value_and_grad(loss_fn, model.params)
            except NumericalError as exc:
                raise TrainingError(
                    f"{method} diverged at epoch {epoch}, step {n_steps}: {exc}"
                ) from exc
            ad.adam_step(state, model.params, grads)
            if method == "dr":
                pred = model.predict_pairs(users, items)
                target = (pred - ratings) ** 2

                def imp_loss_fn(leaves):
                    e_hat = _imputed_errors_t(leaves, users, items)
                    return ((e_hat - target).square() * (1.0 / p_batch)).mean()

                _, imp_grads = ad.value_and_grad(imp_loss_fn, imp_params)
                ad.adam_step(imp_state, imp_params, imp_grads)
            loss_sum += loss
            n_steps += 1
        val_mse = _val_mse(model.predict_pairs, split)
        history.append({
            "epoch": epoch,
            "l_base": loss_sum / n_steps,
            "l_pro": 0.0,
            "l_con": 0.0,
            "total": loss_sum / n_steps,
            "val_mse": val_mse,
        })
        if val_mse < best_val:
            best_val = val_mse
            best_params = model.params.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                break
    model.params = best_params
    report = TrainReport(
        method=method,
        epochs=history,
        best_epoch=best_epoch,
        best_val_mse=best_val,
        wall_clock_seconds=time.perf_counter() - start_time,
        config=config.to_dict(),
    )
    return model, report


def train_method(split, config, method):
    """Dispatch on the method name; returns (model, report)."""
    if method == "counterclr":
        return train_counterclr(split, config)
    return train_baseline(split, config, method)


def grid_search(split, base_config, grid, method="counterclr"):
    """Evaluate a config lattice, ranking points by validation MSE.

    `grid` maps TrainConfig field names to candidate lists; the lattice
    is their cartesian product over sorted key order. A point whose
    training diverges is recorded with an infinite metric instead of
    aborting the search. Returns (best_config, rows).
    """
    if not grid:
        raise ArgumentError("grid must be nonempty")
    keys = sorted(grid)
    rows = []
    best = (math.inf, None)
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        config = dataclasses.replace(base_config, **overrides)
        try:
            _, report = train_method(split, config, method)
            val_mse = report.best_val_mse
            status = "ok"
        except TrainingError:
            val_mse = math.inf
            status = "diverged"
        rows.append({**overrides, "val_mse": val_mse, "status": status})
        if val_mse < best[0]:
            best = (val_mse, config)
    if best[1] is None:
        raise NumericalError("every grid point diverged")
    return best[1], rows
