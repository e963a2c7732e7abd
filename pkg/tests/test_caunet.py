"""Three-headed network: forward, momentum tracking, and the causal loss."""

import numpy as np
import pytest

from counterclr import autodiff as ad
from counterclr import backbone as bb
from counterclr import caunet as cn
from counterclr.data import RatingScale
from counterclr.errors import ArgumentError

SCALE = RatingScale(1.0, 5.0)


def make_model(mode="mf", k=3, n_users=4, n_items=5, seed=0, **kw):
    encoder = bb.EncoderConfig(mode=mode, k=k)
    rng = np.random.default_rng(seed)
    return cn.init_caunet(n_users, n_items, SCALE, encoder, rng, **kw)


class TestForward:
    def test_zero_representation_gives_half_propensity(self):
        model = make_model()
        model.params[bb.USER_EMB].values[...] = 0.0
        bundle = cn.forward(model, 0, 0)
        assert bundle.o_hat == pytest.approx(0.5)

    def test_heads_start_identical(self):
        model = make_model()
        bundle = cn.forward(
            model, np.arange(4).repeat(5), np.tile(np.arange(5), 4)
        )
        np.testing.assert_array_equal(bundle.r1_hat, bundle.r0_hat)

    def test_hand_set_heads_oracle(self):
        # affine head on z = e_u * e_i: w.z + b, frozen hand computation
        model = make_model(k=2)
        model.params[bb.USER_EMB].values[0] = [1.0, 2.0]
        model.params[bb.ITEM_EMB].values[0] = [1.5, -0.2]
        # z = [1.5, -0.4]
        model.params[cn.EXPOSURE_W].values[...] = [0.2, 0.6]
        model.params[cn.EXPOSURE_B].values[...] = 3.0
        bundle = cn.forward(model, 0, 0)
        assert bundle.r1_hat == pytest.approx(3.06, rel=1e-12)

    def test_index_validation(self):
        model = make_model()
        with pytest.raises(ArgumentError):
            cn.forward(model, 4, 0)

    def test_predict_matrix_shape_and_content(self):
        model = make_model()
        pm = cn.predict_matrix(model)
        assert pm.shape == (4, 5)
        single = cn.forward(model, 2, 3)
        assert pm[2, 3] == pytest.approx(single.r1_hat)

    def test_propensity_increasing_in_projection(self):
        model = make_model(seed=3)
        users = np.arange(4).repeat(5)
        items = np.tile(np.arange(5), 4)
        leaves = model.params.leaves()
        _, _, logit = cn.forward_t(model, leaves, users, items)
        bundle = cn.forward(model, users, items)
        order = np.argsort(logit.value)
        assert np.all(np.diff(bundle.o_hat[order]) >= 0)


class TestMomentumUpdate:
    def test_m_one_is_identity(self):
        model = make_model(momentum=1.0)
        model.params[cn.EXPOSURE_W].values[...] += 1.0
        before = model.params[cn.NONEXPOSURE_W].values.copy()
        cn.momentum_update(model)
        np.testing.assert_array_equal(model.params[cn.NONEXPOSURE_W].values, before)

    def test_m_zero_copies_exposure_head(self):
        model = make_model(momentum=0.0)
        model.params[cn.EXPOSURE_W].values[...] += 1.0
        cn.momentum_update(model)
        np.testing.assert_array_equal(
            model.params[cn.NONEXPOSURE_W].values,
            model.params[cn.EXPOSURE_W].values,
        )

    def test_geometric_approach(self):
        # with W2 fixed at 1 and W3 starting at 0: W3_n = 1 - m^n
        model = make_model(momentum=0.999)
        model.params[cn.EXPOSURE_W].values[...] = 1.0
        model.params[cn.NONEXPOSURE_W].values[...] = 0.0
        for n in (1, 5, 50):
            model.params[cn.NONEXPOSURE_W].values[...] = 0.0
            for _ in range(n):
                cn.momentum_update(model)
            np.testing.assert_allclose(
                model.params[cn.NONEXPOSURE_W].values,
                1.0 - 0.999**n,
                rtol=1e-12,
            )

    @pytest.mark.parametrize("m", [0.0, 0.9, 0.999])
    def test_contraction_rate_exact(self, m):
        # ||W3 - W2|| after n steps = m^n * ||W3_0 - W2|| with W2 frozen.
        # W2 is pinned at zero so the shrinking difference is represented
        # exactly; against a nonzero W2 the identity drowns in roundoff
        # once m^n approaches machine epsilon.
        model = make_model(momentum=m, seed=5)
        rng = np.random.default_rng(8)
        model.params[cn.EXPOSURE_W].values[...] = 0.0
        model.params[cn.EXPOSURE_B].values[...] = 0.0
        model.params[cn.NONEXPOSURE_W].values[...] = rng.normal(size=3)
        model.params[cn.NONEXPOSURE_B].values[...] = 0.0
        initial = np.linalg.norm(model.params[cn.NONEXPOSURE_W].values)
        n = 200
        for _ in range(n):
            cn.momentum_update(model)
        now = np.linalg.norm(model.params[cn.NONEXPOSURE_W].values)
        assert now == pytest.approx(m**n * initial, rel=1e-10, abs=1e-300)


class TestCausalLoss:
    def test_single_pair_arithmetic(self):
        # r=4, r1_hat=3, o_hat=0.5, alpha=0 -> (1)^2 / 0.5 = 2
        model = make_model(k=2, alpha=0.0)
        model.params[bb.USER_EMB].values[0] = [1.0, 0.0]
        model.params[bb.ITEM_EMB].values[0] = [1.0, 0.0]
        model.params[cn.EXPOSURE_W].values[...] = [1.0, 0.0]
        model.params[cn.EXPOSURE_B].values[...] = 2.0   # r1_hat = 3
        h = model.params[cn.PROPENSITY_VEC]
        h.values[...] = 0.0                              # o_hat = 0.5
        loss = cn.causal_loss(model, ([0], [0], [4.0]))
        assert loss == pytest.approx(2.0)

    def test_cross_entropy_at_half(self):
        # base loss 0 (perfect prediction), one observed pro pair at o_hat=0.5
        model = make_model(k=2, alpha=1.0)
        model.params[bb.USER_EMB].values[0] = [1.0, 0.0]
        model.params[bb.ITEM_EMB].values[0] = [3.0, 0.0]
        model.params[cn.EXPOSURE_W].values[...] = [1.0, 0.0]
        model.params[cn.EXPOSURE_B].values[...] = 0.0    # r1_hat = 3
        model.params[cn.PROPENSITY_VEC].values[...] = 0.0
        loss = cn.causal_loss(
            model, ([0], [0], [3.0]), propensity_batch=([0], [0], [1.0])
        )
        assert loss == pytest.approx(np.log(2.0), rel=1e-12)

    def test_propensity_clipping_floors_divisor(self):
        model = make_model(k=2, alpha=0.0, propensity_clip=0.05)
        model.params[bb.USER_EMB].values[0] = [1.0, 0.0]
        model.params[bb.ITEM_EMB].values[0] = [1.0, 0.0]
        model.params[cn.EXPOSURE_W].values[...] = [1.0, 0.0]
        model.params[cn.EXPOSURE_B].values[...] = 2.0    # r1_hat = 3
        # push raw o_hat near 0.01: logit = -4.6
        model.params[cn.PROPENSITY_VEC].values[...] = [-4.59512, 0.0]
        bundle = cn.forward(model, 0, 0)
        assert bundle.o_hat < 0.05
        loss = cn.causal_loss(model, ([0], [0], [4.0]))
        assert loss == pytest.approx(1.0 / 0.05, rel=1e-12)

    def test_empty_batch_rejected(self):
        model = make_model()
        with pytest.raises(ArgumentError):
            cn.causal_loss(model, ([], [], []))

    def test_clip_one_reduces_to_plain_sse_mean(self):
        model = make_model(k=3, alpha=0.0, propensity_clip=1.0, seed=2)
        users = np.array([0, 1, 2, 3])
        items = np.array([0, 1, 2, 3])
        ratings = np.array([2.0, 3.0, 4.0, 5.0])
        bundle = cn.forward(model, users, items)
        expected = np.mean((bundle.r1_hat - ratings) ** 2)
        loss = cn.causal_loss(model, (users, items, ratings))
        assert loss == pytest.approx(expected, rel=1e-12)


class TestStopGradientDecision:
    def test_base_loss_grads_match_frozen_divisor_run(self):
        # the inverse-propensity path must contribute no gradient: grads
        # with the live divisor equal grads with the divisor pinned
        model = make_model(mode="ncf", k=3, seed=4)
        model.params.randomize(np.random.default_rng(0))
        users = np.array([0, 1, 2])
        items = np.array([1, 2, 4])
        ratings = np.array([2.0, 4.5, 3.0])

        leaves = model.params.leaves()
        _, _, o_logit = cn.forward_t(model, leaves, users, items)
        pinned = cn.clipped_propensity(model, o_logit.value)

        _, live = ad.value_and_grad(
            lambda lv: cn.base_loss_t(model, lv, users, items, ratings), model.params
        )
        _, frozen = ad.value_and_grad(
            lambda lv: cn.base_loss_t(model, lv, users, items, ratings,
                                      divisor=pinned),
            model.params,
        )
        for name in live:
            np.testing.assert_array_equal(live[name], frozen[name])

    def test_total_loss_has_no_gradient_for_w3_or_h(self):
        model = make_model(mode="mf", k=3, seed=6, alpha=1.0)
        names = {b.name for b in model.params.trainable()}
        assert cn.NONEXPOSURE_W not in names
        assert cn.NONEXPOSURE_B not in names
        assert cn.PROPENSITY_VEC not in names
