import math

import numpy as np
import pytest

from routedistill import graph as G
from routedistill import tensor as T
from routedistill.backbone import attention_head
from routedistill.tensor import Tape, Tensor


def params_for(d, d_a=4, d_c=6, seed=0):
    return G.init_capsule_params(np.random.default_rng(seed), d, d_a, d_c)


class TestAffinity:
    def test_zero_projections_give_all_ones(self):
        p = params_for(4)
        p.phi.data[...] = 0.0
        p.psi.data[...] = 0.0
        aff = G.build_affinity(Tensor(np.random.default_rng(0).standard_normal((5, 4))), p.phi, p.psi)
        np.testing.assert_array_equal(aff.data, np.ones((5, 5)))

    def test_identity_projection_row_matches_hand_dot_products(self):
        # h = [[1,0],[0,1],[1,1]], phi = psi = identity: row 0 affinities are
        # exp of the dot products (1, 0, 1) -> (e, 1, e)
        h = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
        eye = Tensor(np.eye(2))
        aff = G.build_affinity(h, eye, eye)
        np.testing.assert_allclose(aff.data[0], [math.e, 1.0, math.e], rtol=1e-15)

    def test_strictly_positive(self):
        p = params_for(6)
        h = Tensor(np.random.default_rng(1).standard_normal((4, 6)))
        assert np.all(G.build_affinity(h, p.phi, p.psi).data > 0)

    def test_overflow_guard_raises(self):
        p = params_for(2, d_a=2)
        p.phi.data[...] = np.eye(2) * 30
        p.psi.data[...] = np.eye(2) * 30
        h = Tensor(np.ones((3, 2)))
        with pytest.raises(G.AffinityOverflowError, match="rescale"):
            G.build_affinity(h, p.phi, p.psi)

    def test_too_few_tokens_rejected(self):
        p = params_for(4)
        with pytest.raises(T.ShapeError):
            G.build_affinity(Tensor(np.ones((1, 4))), p.phi, p.psi)


class TestTopkNormalize:
    def test_e_1_e_row_with_tie_rule(self):
        aff = Tensor(np.array([[math.e, 1.0, math.e]] * 3))
        adj = G.topk_normalize(aff, 2)
        np.testing.assert_array_equal(adj.indices[0], [0, 2])
        np.testing.assert_allclose(adj.weights.data[0], [0.5, 0.5], atol=1e-12)

    def test_k_equals_n_reduces_to_softmax(self):
        rng = np.random.default_rng(2)
        for seed in range(20):
            r = np.random.default_rng(seed)
            h = Tensor(r.standard_normal((6, 8)))
            p = params_for(8, seed=seed)
            aff = G.build_affinity(h, p.phi, p.psi)
            adj = G.topk_normalize(aff, 6)
            logits = (h.data @ p.phi.data) @ (h.data @ p.psi.data).T
            sm = np.exp(logits - logits.max(-1, keepdims=True))
            sm /= sm.sum(-1, keepdims=True)
            assert np.abs(adj.weights.data - sm).max() < 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        aff = Tensor(np.exp(rng.standard_normal((7, 7))))
        for k in (1, 3, 7):
            adj = G.topk_normalize(aff, k)
            np.testing.assert_allclose(adj.weights.data.sum(-1), 1.0, atol=1e-9)
            assert np.all(adj.weights.data > 0)

    def test_k_above_n_rejected(self):
        with pytest.raises(T.ShapeError):
            G.topk_normalize(Tensor(np.ones((3, 3))), 4)

    def test_deterministic_tie_selection(self):
        aff = Tensor(np.ones((4, 4)))
        a = G.topk_normalize(aff, 2).indices
        b = G.topk_normalize(aff, 2).indices
        assert np.array_equal(a, b)
        np.testing.assert_array_equal(a[0], [0, 1])


class TestMessagePassing:
    def test_self_loop_identity_weights(self):
        # adjacency fixed to self-loops with identity transforms: two ReLUs
        d = 4
        h = Tensor(np.random.default_rng(4).standard_normal((5, d)))
        p = params_for(d)
        p.w1.data[...] = np.eye(d)
        p.w2.data[...] = np.eye(d)
        adj = G.SparseAdjacency(
            indices=np.arange(5)[:, None], weights=Tensor(np.ones((5, 1)))
        )
        out = G.message_pass(h, adj, p)
        np.testing.assert_array_equal(out.data, np.maximum(h.data, 0.0))

    def test_all_negative_transform_clips_to_zero(self):
        d = 3
        h = Tensor(np.abs(np.random.default_rng(5).standard_normal((4, d))))
        p = params_for(d)
        p.w1.data[...] = -np.eye(d)
        adj = G.SparseAdjacency(
            indices=np.arange(4)[:, None], weights=Tensor(np.ones((4, 1)))
        )
        out = T.relu(G.aggregate(h, adj, p.w1))
        assert np.all(out.data == 0)

    def test_matches_dense_loop_oracle(self):
        # brute force: materialize the masked dense adjacency, loop over (i, j)
        rng = np.random.default_rng(6)
        n, d, k = 4, 3, 2
        h = Tensor(rng.standard_normal((n, d)))
        p = params_for(d, d_a=2, d_c=3, seed=6)
        aff = G.build_affinity(h, p.phi, p.psi)
        adj = G.topk_normalize(aff, k)
        fast = G.message_pass(h, adj, p)

        dense = np.zeros((n, n))
        for i in range(n):
            for j, w in zip(adj.indices[i], adj.weights.data[i]):
                dense[i, j] = w
        cur = h.data
        for wmat in (p.w1.data, p.w2.data):
            nxt = np.zeros
            nxt = np.zeros_like(cur)
            msgs = cur @ wmat
            for i in range(n):
                acc = np.zeros(d)
                for j in range(n):
                    acc += dense[i, j] * msgs[j]
                nxt[i] = np.maximum(acc, 0.0)
            cur = nxt
        np.testing.assert_allclose(fast.data, cur, atol=1e-12)


class TestAttentionPool:
    def test_zero_pooling_weight_gives_row_mean(self):
        d = 5
        p = params_for(d, d_c=d)
        p.wp.data[...] = 0.0
        p.proj.data[...] = np.eye(d)
        h = Tensor(np.random.default_rng(7).standard_normal((6, d)))
        cap = G.attention_pool(h, p)
        np.testing.assert_allclose(cap.data, h.data.mean(0), atol=1e-12)

    def test_dominant_row_saturates(self):
        d = 3
        p = params_for(d, d_c=d)
        p.proj.data[...] = np.eye(d)
        p.wp.data[...] = np.array([100.0, 0.0, 0.0])
        h = np.zeros((4, d))
        h[2] = (1.0, 2.0, 3.0)  # score 100, others 0
        cap = G.attention_pool(Tensor(h), p)
        np.testing.assert_allclose(cap.data, h[2], atol=1e-8)

    def test_alpha_sums_to_one(self):
        d = 4
        p = params_for(d)
        h = Tensor(np.random.default_rng(8).standard_normal((5, d)) * 3)
        wp_col = T.reshape(p.wp, (d, 1))
        scores = T.reshape(T.matmul(h, wp_col), (5,))
        alpha = T.softmax(scores)
        assert abs(alpha.data.sum() - 1.0) < 1e-12


class TestEncapsulate:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        h = Tensor(0.7 * rng.standard_normal((5, 6)))
        p = params_for(6, d_a=3, d_c=4, seed=9)

        def build():
            _, s = G.encapsulate(h, p, k=3)
            return T.sumsq(s)

        for param in (p.phi, p.wp, p.proj):
            param.grad = None
            with Tape() as tape:
                loss = build()
            T.backward(tape, loss)
            fd = T.finite_diff_grad(lambda _: build().item(), param, eps=1e-5)
            assert T.rel_err(param.grad, fd.data) < 1e-5

    def test_complete_graph_matches_single_head_attention(self):
        # phi / psi fold in the 1/sqrt(dh) score scale; aggregation with the
        # value projection then equals the attention head pre-activation
        rng = np.random.default_rng(10)
        d = 8
        wq = Tensor(0.4 * rng.standard_normal((d, d)))
        wk = Tensor(0.4 * rng.standard_normal((d, d)))
        wv = Tensor(0.4 * rng.standard_normal((d, d)))
        s = d ** 0.25
        p = params_for(d, d_a=d, d_c=d)
        p.phi = Tensor(wq.data / s)
        p.psi = Tensor(wk.data / s)
        h = Tensor(rng.standard_normal((6, d)))
        adj = G.topk_normalize(G.build_affinity(h, p.phi, p.psi), k=6)
        messages = G.aggregate(h, adj, wv)
        attn = attention_head(h, wq, wk, wv)
        assert np.abs(messages.data - attn.data).max() < 1e-9

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(11)
        for seed in range(10):
            r = np.random.default_rng(seed)
            h = Tensor(r.standard_normal((6, 5)))
            p = params_for(5, seed=seed + 50)
            perm = r.permutation(6)
            _, s_orig = G.encapsulate(h, p, k=3)
            _, s_perm = G.encapsulate(Tensor(h.data[perm]), p, k=3)
            # float summation order differs under permutation; capsules agree
            # to reordering roundoff
            np.testing.assert_allclose(s_perm.data, s_orig.data, atol=1e-12)

    def test_adjacency_permutes_consistently(self):
        rng = np.random.default_rng(12)
        h = Tensor(rng.standard_normal((5, 4)))
        p = params_for(4, seed=12)
        perm = np.array([3, 0, 4, 1, 2])
        adj_o, _ = G.encapsulate(h, p, k=2)
        adj_p, _ = G.encapsulate(Tensor(h.data[perm]), p, k=2)
        inv = np.argsort(perm)
        for new_i, old_i in enumerate(perm):
            assert set(inv[adj_o.indices[old_i]]) == set(adj_p.indices[new_i])


class TestStandardization:
    def test_calibrated_capsules_center(self):
        rng = np.random.default_rng(13)
        p = params_for(6, d_c=4, seed=13)
        batch = Tensor(rng.standard_normal((32, 5, 6)))
        raw = G.encapsulate(batch, p, k=3)[1].data
        G.set_standardization(p, raw)
        assert p.calibrated
        cal = G.encapsulate(batch, p, k=3)[1].data
        np.testing.assert_allclose(cal.mean(axis=0), 0.0, atol=1e-9)
        assert np.all(p.std_var > 0)

    def test_mlp_capsule_runs_and_standardizes(self):
        rng = np.random.default_rng(14)
        p = params_for(6, d_c=4, seed=14)
        h = Tensor(rng.standard_normal((8, 5, 6)))
        raw = G.mlp_capsule(h, p)
        assert raw.shape == (8, 4)
        G.set_standardization(p, raw.data)
        cal = G.encode_capsule(h, p, k=3, encoder="mlp")
        np.testing.assert_allclose(cal.data.mean(axis=0), 0.0, atol=1e-9)

    def test_unknown_encoder_rejected(self):
        p = params_for(4)
        with pytest.raises(ValueError):
            G.encode_capsule(Tensor(np.ones((3, 4))), p, k=2, encoder="fancy")
