"""Estimator arithmetic, unbiasedness by enumeration, and the propensity fit."""

import itertools

import numpy as np
import pytest

from counterclr.backbone import EmbeddingTables
from counterclr.baselines import (
    dr_loss,
    fit_propensity,
    ips_loss,
    naive_loss,
    snips_loss,
)
from counterclr.data import InteractionDataset, RatingScale
from counterclr.errors import ArgumentError

SCALE = RatingScale(1.0, 5.0)


class TestNaive:
    def test_perfect_predictions(self):
        assert naive_loss([3.0, 4.0], [3.0, 4.0]) == 0.0

    def test_single_pair(self):
        assert naive_loss([5.0], [3.0]) == 4.0

    def test_two_pairs(self):
        assert naive_loss([2.0, 6.0], [1.0, 3.0]) == 5.0

    def test_empty_rejected(self):
        with pytest.raises(ArgumentError):
            naive_loss([], [])


class TestIps:
    def test_unit_propensities_reduce_to_normalized_sse(self):
        loss = ips_loss([2.0, 4.0], [1.0, 1.0], [1.0, 1.0], n_total_pairs=10)
        assert loss == pytest.approx((1.0 + 9.0) / 10)

    def test_single_pair_arithmetic(self):
        assert ips_loss([1.0], [0.0], [0.25], 1) == pytest.approx(4.0)


class TestSnips:
    def test_constant_propensity_is_plain_mean(self):
        loss = snips_loss([2.0, 4.0], [1.0, 1.0], [0.3, 0.3])
        assert loss == pytest.approx(5.0)

    def test_single_pair_ignores_propensity(self):
        for p in (0.01, 0.4, 0.999):
            assert snips_loss([4.0], [2.0], [p]) == pytest.approx(4.0)

    def test_hand_mixed_weights(self):
        # weights 1/p: 2, 4, 10; errors 1, 4, 9
        # (2 + 16 + 90) / (2 + 4 + 10) = 108/16
        loss = snips_loss([2.0, 3.0, 6.0], [1.0, 1.0, 3.0], [0.5, 0.25, 0.1])
        assert loss == pytest.approx(108.0 / 16.0)

    def test_global_rescaling_invariance_exact(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(1, 5, 20)
        truth = rng.uniform(1, 5, 20)
        p = rng.uniform(0.05, 0.9, 20)
        a = snips_loss(pred, truth, p)
        b = snips_loss(pred, truth, p * 0.125)
        # dividing all propensities by a power of two is exact in floats
        assert a == b


class TestDr:
    def test_perfect_imputation_identity(self):
        # with e_hat == e everywhere the estimator equals the full mean
        # regardless of the propensities
        rng = np.random.default_rng(1)
        e = rng.uniform(0, 4, 12)
        mask = rng.random(12) < 0.5
        p = rng.uniform(0.05, 0.95, 12)
        loss = dr_loss(e, mask, e, p)
        assert loss == pytest.approx(e.mean(), rel=1e-12)

    def test_full_observation_unit_propensity(self):
        e = np.array([1.0, 2.0, 3.0])
        imputed = np.array([9.0, 9.0, 9.0])
        loss = dr_loss(imputed, np.ones(3), e, np.ones(3))
        assert loss == pytest.approx(2.0)

    def test_empty_rejected(self):
        with pytest.raises(ArgumentError):
            dr_loss([], [], [], [])


class TestEnumerationUnbiasedness:
    """Exact expectation over every exposure pattern of a 12-cell grid."""

    def setup_method(self):
        rng = np.random.default_rng(7)
        self.n = 12
        self.errors = rng.uniform(0.0, 4.0, self.n)
        self.p = rng.uniform(0.15, 0.9, self.n)
        self.imputed = rng.uniform(0.0, 4.0, self.n)  # deliberately wrong
        self.full_loss = self.errors.mean()

    def enumerate_expectation(self, estimator):
        total = 0.0
        for pattern in itertools.product((0, 1), repeat=self.n):
            mask = np.asarray(pattern, dtype=float)
            prob = np.prod(np.where(mask == 1, self.p, 1.0 - self.p))
            total += prob * estimator(mask)
        return total

    def test_ips_expectation_equals_full_loss(self):
        def estimator(mask):
            idx = mask == 1
            if not idx.any():
                return 0.0
            return float(np.sum(self.errors[idx] / self.p[idx]) / self.n)

        assert self.enumerate_expectation(estimator) == pytest.approx(
            self.full_loss, abs=1e-10
        )

    def test_dr_expectation_equals_full_loss(self):
        def estimator(mask):
            return dr_loss(self.imputed, mask, self.errors, self.p)

        assert self.enumerate_expectation(estimator) == pytest.approx(
            self.full_loss, abs=1e-10
        )

    def test_naive_expectation_is_biased_here(self):
        # errors positively correlated with propensity: plain mean over
        # observed must drift from the full mean
        errors = self.p * 4.0

        def estimator(mask):
            idx = mask == 1
            if not idx.any():
                return 0.0
            return float(errors[idx].mean())

        value = self.enumerate_expectation(estimator)
        assert abs(value - errors.mean()) > 0.05


class TestMonteCarloUnbiasedness:
    def test_ips_and_dr_match_full_loss_within_2pct(self):
        rng = np.random.default_rng(3)
        n_users, n_items = 200, 300
        errors = rng.uniform(0.0, 4.0, n_users * n_items)
        # propensities correlated with the errors: strongly MNAR
        p = np.clip(0.05 + 0.2 * errors / 4.0 + rng.uniform(0, 0.1, errors.size),
                    0.05, 0.95)
        imputed = rng.uniform(0.0, 4.0, errors.size)
        full_loss = errors.mean()
        ips_vals, dr_vals = [], []
        for _ in range(1000):
            mask = rng.random(errors.size) < p
            ips_vals.append(np.sum(errors[mask] / p[mask]) / errors.size)
            dr_vals.append(dr_loss(imputed, mask, errors, p))
        assert np.mean(ips_vals) == pytest.approx(full_loss, rel=0.02)
        assert np.mean(dr_vals) == pytest.approx(full_loss, rel=0.02)


class TestAllEstimatorsCoincide:
    def test_unit_propensity_full_observation_exact_imputation(self):
        rng = np.random.default_rng(9)
        pred = rng.uniform(1, 5, 15)
        truth = rng.uniform(1, 5, 15)
        e = (pred - truth) ** 2
        ones = np.ones(15)
        naive = naive_loss(pred, truth)
        ips = ips_loss(pred, truth, ones, 15)
        snips = snips_loss(pred, truth, ones)
        dr = dr_loss(e, ones, e, ones)
        assert naive == pytest.approx(ips, rel=1e-12)
        assert naive == pytest.approx(snips, rel=1e-12)
        assert naive == pytest.approx(dr, rel=1e-12)


class TestPropensityModel:
    def test_learns_marginal_rate_and_clips(self):
        rng = np.random.default_rng(4)
        n_users, n_items, k = 30, 40, 4
        tables = EmbeddingTables(
            rng.normal(0, 0.1, (n_users, k)), rng.normal(0, 0.1, (n_items, k))
        )
        # observe ~25% of cells uniformly at random
        mask = rng.random((n_users, n_items)) < 0.25
        users, items = np.nonzero(mask)
        ds = InteractionDataset(
            n_users, n_items, users, items, np.full(len(users), 3.0), SCALE
        )
        model = fit_propensity(ds, tables, clip=0.05, seed=0, epochs=20)
        all_u = np.repeat(np.arange(n_users), n_items)
        all_i = np.tile(np.arange(n_items), n_users)
        probs = model.predict(all_u, all_i)
        assert np.all(probs >= 0.05) and np.all(probs < 1.0)
        # 1:1 sampling balances classes, so the learned probabilities
        # sit near 1/2 for a uniform-exposure dataset
        assert 0.3 < probs.mean() < 0.7

    def test_separates_high_from_low_propensity_users(self):
        rng = np.random.default_rng(5)
        n_users, n_items, k = 40, 50, 4
        tables = EmbeddingTables(
            rng.normal(0, 0.5, (n_users, k)), rng.normal(0, 0.5, (n_items, k))
        )
        p_user = np.where(np.arange(n_users) < 20, 0.6, 0.05)
        mask = rng.random((n_users, n_items)) < p_user[:, None]
        users, items = np.nonzero(mask)
        ds = InteractionDataset(
            n_users, n_items, users, items, np.full(len(users), 3.0), SCALE
        )
        model = fit_propensity(ds, tables, clip=0.02, seed=0, epochs=40)
        hi = model.predict(np.arange(0, 20).repeat(5), np.tile(np.arange(5), 20))
        lo = model.predict(np.arange(20, 40).repeat(5), np.tile(np.arange(5), 20))
        assert hi.mean() > lo.mean() + 0.2
