"""Pair embeddings, dot-product prediction, and the two encoders."""

import numpy as np
import pytest

from counterclr import autodiff as ad
from counterclr import backbone as bb
from counterclr.errors import ArgumentError


def tables_from(user, item):
    return bb.EmbeddingTables(
        np.asarray(user, dtype=float), np.asarray(item, dtype=float)
    )


class TestPairEmbedding:
    def test_concatenation_order(self):
        tables = tables_from([[1.0, 2.0]], [[3.0, 4.0]])
        np.testing.assert_array_equal(
            bb.pair_embedding(tables, 0, 0), [1.0, 2.0, 3.0, 4.0]
        )

    def test_zero_tables(self):
        tables = tables_from(np.zeros((2, 3)), np.zeros((2, 3)))
        np.testing.assert_array_equal(bb.pair_embedding(tables, 1, 1), np.zeros(6))

    def test_out_of_range_index(self):
        tables = tables_from(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ArgumentError):
            bb.pair_embedding(tables, 2, 0)


class TestMfPredict:
    def test_inner_product(self):
        tables = tables_from([[1.0, 2.0]], [[3.0, 4.0]])
        assert bb.mf_predict(tables, 0, 0) == 11.0

    def test_orthogonal_embeddings(self):
        tables = tables_from([[1.0, 0.0]], [[0.0, 1.0]])
        assert bb.mf_predict(tables, 0, 0) == 0.0

    def test_all_ones_gives_k(self):
        k = 7
        tables = tables_from(np.ones((1, k)), np.ones((1, k)))
        assert bb.mf_predict(tables, 0, 0) == k

    def test_vectorized(self):
        rng = np.random.default_rng(0)
        tables = tables_from(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
        users = np.array([0, 3])
        items = np.array([2, 1])
        out = bb.mf_predict(tables, users, items)
        expected = [tables.user_table[u] @ tables.item_table[i]
                    for u, i in zip(users, items)]
        np.testing.assert_allclose(out, expected)


class TestEncoderConfig:
    def test_mf_mode_forces_identity_dims(self):
        cfg = bb.EncoderConfig(mode="mf", k=6)
        assert cfg.z_dim == 12
        assert cfg.hidden_dims == ()

    def test_ncf_defaults(self):
        cfg = bb.EncoderConfig(mode="ncf", k=6)
        assert cfg.hidden_dims == (12,)
        assert cfg.z_dim == 6
        assert cfg.layer_dims() == [(12, 12), (12, 6)]

    def test_unknown_mode_rejected(self):
        with pytest.raises(ArgumentError):
            bb.EncoderConfig(mode="deep", k=4)

    def test_head_dim(self):
        assert bb.head_dim(bb.EncoderConfig(mode="mf", k=6)) == 6
        assert bb.head_dim(bb.EncoderConfig(mode="ncf", k=6, z_dim=9)) == 9


class TestEncode:
    def test_mf_mode_is_bitwise_identity(self):
        cfg = bb.EncoderConfig(mode="mf", k=2)
        x = np.array([1.0, 2.0, 3.0, 4.0])
        out = bb.encode(cfg, {}, x)
        np.testing.assert_array_equal(out, x)

    def test_ncf_zero_weights_give_zero(self):
        cfg = bb.EncoderConfig(mode="ncf", k=2)
        blocks = {
            "encoder_w0": np.zeros((4, 4)),
            "encoder_b0": np.zeros(4),
            "encoder_w1": np.zeros((4, 2)),
            "encoder_b1": np.zeros(2),
        }
        out = bb.encode(cfg, blocks, np.array([1.0, -1.0, 2.0, 0.5]))
        np.testing.assert_array_equal(out, np.zeros(2))

    def test_ncf_hand_forward_oracle(self):
        # frozen from an independent evaluation of tanh(Wx+b) then w.h+c
        cfg = bb.EncoderConfig(mode="ncf", k=1, hidden_dims=(2,), z_dim=1)
        blocks = {
            "encoder_w0": np.array([[0.5, 0.25], [-1.0, 0.75]]),
            "encoder_b0": np.array([0.1, -0.3]),
            "encoder_w1": np.array([[2.0], [-0.5]]),
            "encoder_b1": np.array([0.05]),
        }
        out = bb.encode(cfg, blocks, np.array([0.3, -0.2]))
        assert out[0] == pytest.approx(1.0729767096754088, rel=1e-12)

    def test_wrong_input_width_rejected(self):
        cfg = bb.EncoderConfig(mode="mf", k=3)
        with pytest.raises(ArgumentError):
            bb.encode(cfg, {}, np.zeros(4))


class TestPairZ:
    def test_mf_z_is_elementwise_product(self):
        rng = np.random.default_rng(1)
        blocks = bb.init_embedding_blocks(3, 4, 2, rng)
        params = ad.ParamSet(blocks)
        leaves = params.leaves()
        cfg = bb.EncoderConfig(mode="mf", k=2)
        z = bb.pair_z_t(cfg, leaves, np.array([0, 2]), np.array([1, 3]))
        expected = (params[bb.USER_EMB].values[[0, 2]]
                    * params[bb.ITEM_EMB].values[[1, 3]])
        np.testing.assert_array_equal(z.value, expected)

    def test_grid_matches_pairwise(self):
        rng = np.random.default_rng(2)
        params = ad.ParamSet(bb.init_embedding_blocks(4, 5, 3, rng))
        cfg = bb.EncoderConfig(mode="mf", k=3)
        users = np.array([1, 3])
        items = np.array([0, 2, 4])
        grid = bb.grid_pair_z_t(cfg, params.leaves(), users, items)
        pair_u = np.repeat(users, len(items))
        pair_i = np.tile(items, len(users))
        direct = bb.pair_z_t(cfg, params.leaves(), pair_u, pair_i)
        np.testing.assert_array_equal(grid.value, direct.value)

    def test_embedding_gradients_touch_only_batch_rows(self):
        rng = np.random.default_rng(3)
        params = ad.ParamSet(bb.init_embedding_blocks(6, 7, 2, rng))
        cfg = bb.EncoderConfig(mode="mf", k=2)

        def loss_fn(leaves):
            z = bb.pair_z_t(cfg, leaves, np.array([1, 4]), np.array([2, 2]))
            return z.square().sum()

        _, grads = ad.value_and_grad(loss_fn, params)
        touched_users = np.flatnonzero(np.abs(grads[bb.USER_EMB]).sum(axis=1))
        touched_items = np.flatnonzero(np.abs(grads[bb.ITEM_EMB]).sum(axis=1))
        assert set(touched_users) <= {1, 4}
        assert set(touched_items) <= {2}
