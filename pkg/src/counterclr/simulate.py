"""Synthetic ground truth and positively-oriented MNAR exposure sampling.

Ground truth is a low-rank Gaussian factor product plus Gaussian noise,
min-max rescaled into the rating scale. Exposure is per-cell independent
Bernoulli with probability logistic(slope * (r - midscale) + intercept);
with slope > 0 higher-rated cells are more likely observed, which is the
selection bias the rest of the package exists to undo. The intercept is
calibrated by bisection so the expected observed ratio hits an exact
target.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import expit, logit

from .data import InteractionDataset, RatingScale
from .errors import ArgumentError, NumericalError

__all__ = [
    "SyntheticGroundTruth",
    "ExposurePolicy",
    "generate_ground_truth",
    "calibrate_policy",
    "sample_observations",
]

_BISECT_MAX_ITER = 200
_RATIO_TOL = 1e-6


@dataclasses.dataclass(frozen=True)
class SyntheticGroundTruth:
    """Fully known N x M rating matrix plus how it was generated."""

    full_matrix: np.ndarray
    scale: RatingScale
    gen_params: dict

    @property
    def n_users(self):
        return self.full_matrix.shape[0]

    @property
    def n_items(self):
        return self.full_matrix.shape[1]


@dataclasses.dataclass(frozen=True)
class ExposurePolicy:
    """P(observe | rating) = logistic(slope * (r - midscale) + intercept)."""

    slope: float
    intercept: float
    target_ratio: float

    def probabilities(self, ratings, scale):
        ratings = np.asarray(ratings, dtype=np.float64)
        return expit(self.slope * (ratings - scale.midpoint) + self.intercept)


SPREAD_SIGMAS = 1.2


def generate_ground_truth(n_users, n_items, rank, noise_std, scale, seed,
                          factors=None, spread_sigmas=SPREAD_SIGMAS):
    """Draw A (N x rank), B (M x rank), return rescale(A @ B.T + noise).

    The affine rescale sends the raw mean to midscale and +-spread_sigmas
    raw standard deviations to the scale bounds before clipping, so the
    resulting ratings cover the whole scale with visible mass at both
    ends, like explicit-feedback star ratings do. Factor and noise
    entries come from one seeded generator in the fixed order A, B,
    noise, making the output a pure function of the arguments. `factors`
    overrides (A, B) for tests that need a degenerate matrix.
    """
    if rank > min(n_users, n_items):
        raise ArgumentError(
            f"rank {rank} exceeds min(n_users, n_items) = {min(n_users, n_items)}"
        )
    if noise_std < 0:
        raise ArgumentError("noise_std must be nonnegative")
    if spread_sigmas <= 0:
        raise ArgumentError("spread_sigmas must be positive")
    rng = np.random.default_rng(seed)
    if factors is None:
        a = rng.standard_normal((n_users, rank))
        b = rng.standard_normal((n_items, rank))
    else:
        a, b = (np.asarray(f, dtype=np.float64) for f in factors)
    raw = a @ b.T
    if noise_std > 0:
        raw = raw + noise_std * rng.standard_normal((n_users, n_items))
    sigma = raw.std()
    if sigma > 0:
        half_span = 0.5 * scale.span
        full = scale.midpoint + (raw - raw.mean()) * (
            half_span / (spread_sigmas * sigma)
        )
    else:
        full = np.full_like(raw, scale.midpoint)
    full = np.clip(full, scale.r_min, scale.r_max)
    return SyntheticGroundTruth(
        full_matrix=full,
        scale=scale,
        gen_params={
            "n_users": int(n_users),
            "n_items": int(n_items),
            "rank": int(rank),
            "noise_std": float(noise_std),
            "seed": int(seed),
            "spread_sigmas": float(spread_sigmas),
        },
    )


def calibrate_policy(gt, slope, target_ratio):
    """Find the intercept whose mean exposure probability hits the target.

    slope == 0 has the analytic solution logit(target); otherwise the
    bracket is expanded until it straddles the target and bisected. The
    mean is continuous and strictly increasing in the intercept, so the
    iteration cap is a safety net, not an expected exit.
    """
    if not 0.0 < target_ratio <= 1.0:
        raise ArgumentError(f"target_ratio must be in (0, 1], got {target_ratio}")
    if slope < 0:
        raise ArgumentError("slope must be nonnegative")
    if target_ratio == 1.0:
        # expit(750) == 1.0 exactly in float64
        return ExposurePolicy(slope=slope, intercept=750.0, target_ratio=1.0)
    if slope == 0.0:
        return ExposurePolicy(
            slope=0.0, intercept=float(logit(target_ratio)), target_ratio=target_ratio
        )
    shifted = gt.full_matrix - gt.scale.midpoint

    def achieved(intercept):
        return float(expit(slope * shifted + intercept).mean())

    lo, hi = -1.0, 1.0
    while achieved(lo) > target_ratio:
        lo *= 2.0
    while achieved(hi) < target_ratio:
        hi *= 2.0
    intercept = 0.5 * (lo + hi)
    for _ in range(_BISECT_MAX_ITER):
        intercept = 0.5 * (lo + hi)
        ratio = achieved(intercept)
        if abs(ratio - target_ratio) <= _RATIO_TOL:
            return ExposurePolicy(
                slope=slope, intercept=intercept, target_ratio=target_ratio
            )
        if ratio < target_ratio:
            lo = intercept
        else:
            hi = intercept
    raise NumericalError(
        f"intercept bisection did not reach {target_ratio} within "
        f"{_BISECT_MAX_ITER} iterations (last ratio {achieved(intercept)})"
    )


def sample_observations(gt, policy, seed):
    """Observe each cell independently with its policy probability.

    Returns (observed, held_out): the observed cells carry their true
    ratings and form the training pool; every unobserved cell goes to
    the held-out dataset, also with its true rating.
    """
    probs = policy.probabilities(gt.full_matrix, gt.scale)
    rng = np.random.default_rng(seed)
    draws = rng.random(probs.shape)
    mask = draws < probs
    obs_u, obs_i = np.nonzero(mask)
    miss_u, miss_i = np.nonzero(~mask)
    observed = InteractionDataset(
        gt.n_users, gt.n_items, obs_u, obs_i,
        gt.full_matrix[obs_u, obs_i], gt.scale,
    )
    held_out = InteractionDataset(
        gt.n_users, gt.n_items, miss_u, miss_i,
        gt.full_matrix[miss_u, miss_i], gt.scale,
    )
    return observed, held_out
