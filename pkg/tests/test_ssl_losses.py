"""Tests for the three pretraining objectives and the Sinkhorn assignment."""

import numpy as np
import pytest
from gradcheck import fd_gradients, max_rel_err

from patchssl.errors import NumericError
from patchssl.selfsup import (
    NtXentConfig,
    SwavState,
    byol_loss,
    ema_update,
    nt_xent_loss,
    sinkhorn_assign,
    swav_codes,
    swav_loss,
    swav_loss_with_codes,
)


class TestNtXent:
    def test_identical_embeddings_give_ln3(self):
        e = np.tile(np.array([0.3, -1.2, 0.5]), (4, 1))
        loss, _ = nt_xent_loss(e, NtXentConfig(temperature=0.5))
        assert loss == pytest.approx(np.log(3.0), abs=1e-12)

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        e = rng.normal(size=(6, 5))
        config = NtXentConfig(temperature=0.5)
        _, grad = nt_xent_loss(e, config)
        numeric = fd_gradients(lambda: nt_xent_loss(e, config)[0], [e])
        assert max_rel_err([grad], numeric) <= 1e-5

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        e = rng.normal(size=(8, 7))
        config = NtXentConfig()
        base, _ = nt_xent_loss(e, config)
        global_scaled, _ = nt_xent_loss(3.7 * e, config)
        per_row = e * rng.uniform(0.1, 10.0, size=(8, 1))
        row_scaled, _ = nt_xent_loss(per_row, config)
        assert abs(global_scaled - base) < 1e-6
        assert abs(row_scaled - base) < 1e-6

    def test_pair_permutation_invariance(self):
        rng = np.random.default_rng(5)
        e = rng.normal(size=(8, 6))
        config = NtXentConfig()
        base, _ = nt_xent_loss(e, config)
        # permute the 4 pairs as blocks: pair order (2, 0, 3, 1)
        order = [4, 5, 0, 1, 6, 7, 2, 3]
        permuted, _ = nt_xent_loss(e[order], config)
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_loss_drops_as_positive_similarity_rises(self):
        # e1 rotates toward e0 in a plane orthogonal to every other view,
        # so only the (0,1) similarity changes
        basis = np.eye(8)
        losses = []
        for theta in (1.2, 0.8, 0.4, 0.1):
            e = np.stack(
                [
                    basis[0],
                    np.cos(theta) * basis[0] + np.sin(theta) * basis[1],
                    basis[2],
                    basis[3],
                    basis[4],
                    basis[5],
                ]
            )
            losses.append(nt_xent_loss(e, NtXentConfig())[0])
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_gradient_orthogonal_to_each_embedding(self):
        rng = np.random.default_rng(6)
        e = rng.normal(size=(6, 5))
        _, grad = nt_xent_loss(e, NtXentConfig())
        radial = np.abs(np.sum(grad * e, axis=1))
        assert np.max(radial) < 1e-12

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            nt_xent_loss(np.ones((5, 3)), NtXentConfig())  # odd count
        with pytest.raises(ValueError):
            nt_xent_loss(np.ones((2, 3)), NtXentConfig())  # single pair
        bad = np.ones((4, 3))
        bad[2] = 0.0
        with pytest.raises(NumericError):
            nt_xent_loss(bad, NtXentConfig())
        with pytest.raises(ValueError):
            NtXentConfig(temperature=0.0)


class TestByol:
    def test_aligned_vectors_zero_loss(self):
        p = np.array([[1.0, 2.0, 3.0], [0.5, 0.0, -1.0]])
        loss, grad = byol_loss(p, 4.0 * p)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, np.zeros_like(p), atol=1e-12)

    def test_orthogonal_vectors_loss_two(self):
        p = np.array([[1.0, 0.0]])
        t = np.array([[0.0, 5.0]])
        loss, _ = byol_loss(p, t)
        assert loss == pytest.approx(2.0, abs=1e-12)

    @pytest.mark.parametrize("seed", [7, 8, 9])
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.normal(size=(5, 4))
        t = rng.normal(size=(5, 4))
        _, grad = byol_loss(p, t)
        numeric = fd_gradients(lambda: byol_loss(p, t)[0], [p])
        assert max_rel_err([grad], numeric) <= 1e-5

    def test_scale_invariance(self):
        rng = np.random.default_rng(10)
        p = rng.normal(size=(6, 5))
        t = rng.normal(size=(6, 5))
        base, _ = byol_loss(p, t)
        scaled, _ = byol_loss(2.5 * p, 0.3 * t)
        assert abs(scaled - base) < 1e-6

    def test_gradient_exists_only_for_online_side(self):
        p = np.random.default_rng(11).normal(size=(3, 4))
        t = np.random.default_rng(12).normal(size=(3, 4))
        result = byol_loss(p, t)
        assert len(result) == 2  # loss and the online gradient, nothing else
        assert result[1].shape == p.shape

    def test_rejects_zero_norm_and_mismatch(self):
        good = np.ones((2, 3))
        zero = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        with pytest.raises(NumericError):
            byol_loss(zero, good)
        with pytest.raises(NumericError):
            byol_loss(good, zero)
        with pytest.raises(ValueError):
            byol_loss(np.ones((2, 3)), np.ones((2, 4)))


class TestEmaUpdate:
    def test_decay_one_keeps_target(self):
        t = [np.array([1.0, 2.0])]
        o = [np.array([5.0, 5.0])]
        np.testing.assert_array_equal(ema_update(t, o, 1.0)[0], t[0])

    def test_decay_zero_copies_online(self):
        t = [np.array([1.0, 2.0])]
        o = [np.array([5.0, 5.0])]
        np.testing.assert_array_equal(ema_update(t, o, 0.0)[0], o[0])

    def test_reference_value(self):
        out = ema_update([np.array(1.0)], [np.array(0.0)], 0.99)
        assert out[0] == pytest.approx(0.99, abs=1e-15)

    def test_shape_and_length_mismatch(self):
        with pytest.raises(ValueError):
            ema_update([np.zeros(2)], [np.zeros(3)], 0.5)
        with pytest.raises(ValueError):
            ema_update([np.zeros(2)], [np.zeros(2), np.zeros(2)], 0.5)
        with pytest.raises(ValueError):
            ema_update([np.zeros(2)], [np.zeros(2)], 1.5)


def sinkhorn_oracle(scores, epsilon, iters=2000):
    """Independent Sinkhorn in u/v scaling form, run to convergence."""
    b, p = scores.shape
    kernel = np.exp((scores - scores.max(axis=1, keepdims=True)) / epsilon)
    row_target = np.ones(b)
    col_target = np.full(p, b / p)
    u = np.ones(b)
    v = np.ones(p)
    for _ in range(iters):
        v = col_target / (kernel.T @ u)
        u = row_target / (kernel @ v)
    return u[:, np.newaxis] * kernel * v[np.newaxis, :]


class TestSinkhorn:
    def test_uniform_scores_give_exact_uniform(self):
        q = sinkhorn_assign(np.full((64, 8), 3.7), epsilon=0.05, iters=3)
        np.testing.assert_array_equal(q, np.full((64, 8), 1.0 / 8.0))

    def test_marginals_after_convergence(self):
        # scores shaped like the caller produces them: cosines between
        # random unit embeddings and unit prototypes
        rng = np.random.default_rng(13)
        z = unit_rows(rng.normal(size=(64, 64)))
        protos = unit_rows(rng.normal(size=(8, 64)))
        q = sinkhorn_assign(z @ protos.T, epsilon=0.05, iters=50)
        np.testing.assert_allclose(q.sum(axis=1), np.ones(64), atol=1e-6)
        np.testing.assert_allclose(q.sum(axis=0), np.full(8, 8.0), atol=1e-6)
        assert np.all(q >= 0)

    def test_rows_sum_to_one_even_after_few_iters(self):
        rng = np.random.default_rng(14)
        q = sinkhorn_assign(rng.normal(size=(16, 4)), epsilon=0.1, iters=1)
        np.testing.assert_allclose(q.sum(axis=1), np.ones(16), atol=1e-12)

    def test_diagonal_scores_converge_to_permutation(self):
        scores = np.full((6, 6), -5.0)
        np.fill_diagonal(scores, 5.0)
        q = sinkhorn_assign(scores, epsilon=0.5, iters=3)
        np.testing.assert_allclose(q, np.eye(6), atol=1e-3)

    def test_matches_independent_oracle(self):
        rng = np.random.default_rng(15)
        scores = rng.normal(size=(32, 5))
        mine = sinkhorn_assign(scores, epsilon=0.2, iters=50)
        reference = sinkhorn_oracle(scores, epsilon=0.2)
        np.testing.assert_allclose(mine, reference, atol=1e-9)

    def test_large_scores_do_not_overflow(self):
        scores = np.array([[1e5, -1e5], [-1e5, 1e5]])
        q = sinkhorn_assign(scores, epsilon=0.05, iters=3)
        assert np.all(np.isfinite(q))

    def test_bad_inputs(self):
        with pytest.raises(NumericError):
            sinkhorn_assign(np.array([[np.inf, 1.0]]), 0.05, 3)
        with pytest.raises(ValueError):
            sinkhorn_assign(np.ones((2, 2)), 0.0, 3)
        with pytest.raises(ValueError):
            sinkhorn_assign(np.ones(4), 0.05, 3)


def unit_rows(arr):
    return arr / np.linalg.norm(arr, axis=1, keepdims=True)


class TestSwav:
    def make_state(self, seed=0, p=4, m=6, capacity=50):
        rng = np.random.default_rng(seed)
        state = SwavState(
            unit_rows(rng.normal(size=(p, m))),
            queue_capacity=capacity,
            temperature=0.1,
            sinkhorn_epsilon=0.05,
            sinkhorn_iters=3,
        )
        return state

    def test_symmetric_prototypes_give_ln2(self):
        # both prototypes at equal angle to the (identical) embeddings:
        # predictions are uniform over 2, codes sum to 1 per row
        emb = np.tile(np.array([1.0, 0.0]), (4, 1))
        protos = np.array([[0.8, 0.6], [0.8, -0.6]])
        state = SwavState(protos, queue_capacity=0, temperature=0.1)
        loss, _, _, _ = swav_loss(emb, emb.copy(), state)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    @pytest.mark.parametrize("seed", [16, 17, 18])
    def test_gradients_match_finite_differences_with_frozen_codes(self, seed):
        rng = np.random.default_rng(seed)
        emb_a = rng.normal(size=(5, 6))
        emb_b = rng.normal(size=(5, 6))
        protos = unit_rows(rng.normal(size=(4, 6)))
        codes_a = rng.uniform(0.1, 1.0, size=(5, 4))
        codes_a /= codes_a.sum(axis=1, keepdims=True)
        codes_b = rng.uniform(0.1, 1.0, size=(5, 4))
        codes_b /= codes_b.sum(axis=1, keepdims=True)

        _, grad_a, grad_b, grad_c = swav_loss_with_codes(
            emb_a, emb_b, protos, codes_a, codes_b, temperature=0.1
        )

        def loss():
            return swav_loss_with_codes(
                emb_a, emb_b, protos, codes_a, codes_b, temperature=0.1
            )[0]

        numeric = fd_gradients(loss, [emb_a, emb_b, protos])
        assert max_rel_err([grad_a, grad_b, grad_c], numeric) <= 1e-5

    def test_scale_invariance_in_embeddings(self):
        rng = np.random.default_rng(19)
        emb_a = rng.normal(size=(6, 5))
        emb_b = rng.normal(size=(6, 5))
        protos = unit_rows(rng.normal(size=(3, 5)))
        codes = np.full((6, 3), 1.0 / 3.0)
        base, *_ = swav_loss_with_codes(emb_a, emb_b, protos, codes, codes, 0.1)
        scaled, *_ = swav_loss_with_codes(
            5.0 * emb_a, 0.25 * emb_b, protos, codes, codes, 0.1
        )
        assert abs(scaled - base) < 1e-6

    def test_queue_fifo_contract(self):
        state = self.make_state(capacity=5)
        rng = np.random.default_rng(20)
        lengths = []
        for _ in range(4):
            emb = rng.normal(size=(2, 6))
            swav_loss(emb, rng.normal(size=(2, 6)), state)
            lengths.append(len(state.queue))
        assert lengths == [2, 4, 5, 5]

    def test_queue_rows_are_normalized_view_a(self):
        state = self.make_state(capacity=10)
        rng = np.random.default_rng(21)
        emb_a = rng.normal(size=(3, 6))
        swav_loss(emb_a, rng.normal(size=(3, 6)), state)
        stored = state.queue_matrix()
        np.testing.assert_allclose(stored, unit_rows(emb_a), atol=1e-12)

    def test_queue_changes_codes(self):
        rng = np.random.default_rng(22)
        emb = rng.normal(size=(4, 6))
        fresh = self.make_state(seed=1, capacity=20)
        warm = self.make_state(seed=1, capacity=20)
        warm_fill = rng.normal(size=(8, 6))
        swav_loss(warm_fill, warm_fill.copy(), warm)
        codes_fresh = swav_codes(emb, fresh)
        codes_warm = swav_codes(emb, warm)
        np.testing.assert_allclose(codes_fresh.sum(axis=1), np.ones(4), atol=1e-12)
        np.testing.assert_allclose(codes_warm.sum(axis=1), np.ones(4), atol=1e-12)
        assert not np.allclose(codes_fresh, codes_warm)

    def test_codes_do_not_mutate_queue(self):
        state = self.make_state(capacity=10)
        rng = np.random.default_rng(23)
        swav_loss(rng.normal(size=(3, 6)), rng.normal(size=(3, 6)), state)
        before = len(state.queue)
        swav_codes(rng.normal(size=(4, 6)), state)
        assert len(state.queue) == before

    def test_empty_batch_rejected(self):
        state = self.make_state()
        with pytest.raises(ValueError):
            swav_loss(np.zeros((0, 6)), np.zeros((0, 6)), state)

    def test_prototype_renormalization(self):
        state = self.make_state()
        state.prototypes *= 3.0
        state.renormalize_prototypes()
        np.testing.assert_allclose(
            np.linalg.norm(state.prototypes, axis=1), np.ones(4), atol=1e-12
        )
        state.prototypes[1] = 0.0
        with pytest.raises(NumericError):
            state.renormalize_prototypes()
