import numpy as np
import pytest

from eta_ctr.attention import (
    AttentionParams,
    EmptySequenceError,
    Engine,
    attention_backward,
    attention_forward,
    attention_weights,
    init_attention,
    lti,
    lti_backward,
    lti_forward,
    target_attention,
)
from eta_ctr.hashing import new_planes
from eta_ctr.numeric import ShapeError, backward_check
from eta_ctr.retrieval import RetrievalError, freeze_fingerprints


def identity_params(d=2):
    eye = np.eye(d)[None]
    return AttentionParams(W_Q=eye.copy(), W_K=eye.copy(), W_V=eye.copy(), W_O=np.eye(d))


def value_path(row, p):
    # softmax weight 1 on a single key: concat_h(row W_V[h]) W_O
    return np.concatenate([row @ p.W_V[h] for h in range(p.heads)]) @ p.W_O


class TestTargetAttention:
    def test_single_key(self):
        rng = np.random.default_rng(0)
        p = init_attention(rng, 6, heads=2)
        row = rng.normal(size=6)
        for t in (rng.normal(size=6), 100 * rng.normal(size=6)):
            np.testing.assert_allclose(target_attention(t[None], row[None], p), value_path(row, p), atol=1e-12)

    def test_identical_rows(self):
        rng = np.random.default_rng(1)
        p = init_attention(rng, 6, heads=3)
        row = rng.normal(size=6)
        t = rng.normal(size=(1, 6))
        w = attention_weights(t, np.tile(row, (5, 1))[None], np.ones((1, 5), bool), p)
        np.testing.assert_allclose(w, 0.2, atol=1e-12)
        np.testing.assert_allclose(target_attention(t, np.tile(row, (5, 1)), p), value_path(row, p), atol=1e-12)

    def test_hand_example(self):
        out = target_attention(np.array([[1.0, 0.0]]), np.eye(2), identity_params())
        w = np.exp(1 / np.sqrt(2)) / (np.exp(1 / np.sqrt(2)) + 1)
        np.testing.assert_allclose(out, [w, 1 - w], atol=1e-12)
        np.testing.assert_allclose(out, [0.6697615, 0.3302385], atol=1e-7)

    def test_empty_sequence(self):
        with pytest.raises(EmptySequenceError):
            target_attention(np.ones((1, 2)), np.zeros((0, 2)), identity_params())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            target_attention(np.ones((1, 3)), np.ones((4, 3)), identity_params())

    def test_params_shape_checked(self):
        with pytest.raises(ShapeError):
            AttentionParams(W_Q=np.ones((2, 4, 2)), W_K=np.ones((2, 4, 2)), W_V=np.ones((2, 4, 2)), W_O=np.ones((3, 4)))

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(2)
        p = init_attention(rng, 8)
        mask = rng.random((5, 12)) < 0.7
        mask[:, 0] = True
        w = attention_weights(rng.normal(size=(5, 8)), rng.normal(size=(5, 12, 8)), mask, p)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(w[np.broadcast_to(~mask[:, None, :], w.shape)] == 0)

    def test_head_permutation(self):
        rng = np.random.default_rng(3)
        p = init_attention(rng, 6, heads=3)
        perm = np.array([2, 0, 1])
        rows = np.arange(p.heads * p.d_v).reshape(p.heads, p.d_v)[perm].ravel()
        q = AttentionParams(W_Q=p.W_Q[perm], W_K=p.W_K[perm], W_V=p.W_V[perm], W_O=p.W_O[rows])
        t, E = rng.normal(size=(1, 6)), rng.normal(size=(7, 6))
        np.testing.assert_allclose(target_attention(t, E, q), target_attention(t, E, p), atol=1e-12)

    def test_gradients_all_inputs(self):
        rng = np.random.default_rng(4)
        p = init_attention(rng, 4, heads=2)
        mask = np.array([[True, True, False], [True, True, True]])
        up = rng.normal(size=(2, 4))
        params = dict(p.as_dict(), q=rng.normal(size=(2, 4)), X=rng.normal(size=(2, 3, 4)))

        def f(pr):
            ap = AttentionParams(**{k: pr[k] for k in ("W_Q", "W_K", "W_V", "W_O")})
            out, cache = attention_forward(pr["q"], pr["X"], mask, ap)
            dq, dX, grads = attention_backward(cache, up)
            return float((out * up).sum()), dict(grads, q=dq, X=dX)

        assert backward_check(f, params, eps=1e-6) <= 1e-6


def clustered_instance(rng, n_clusters=8, L=64, d=8, noise=0.05):
    centers = rng.normal(size=(n_clusters, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = rng.integers(0, n_clusters, L)
    E = centers[labels] + noise * rng.normal(size=(L, d))
    c = int(labels[rng.integers(L)])
    t = centers[c] + noise * rng.normal(size=d)
    return E, t, int((labels == c).sum()), labels, c


class TestEngine:
    def test_unknown_engine(self):
        with pytest.raises(RetrievalError):
            Engine("bogus")

    def test_eta_needs_planes(self):
        with pytest.raises(RetrievalError):
            Engine("eta")

    def test_frozen_needs_store(self):
        with pytest.raises(RetrievalError):
            Engine("eta-frozen", planes=new_planes(4, 8, 0))

    def test_eta_agrees_with_exact_on_clusters(self):
        rng = np.random.default_rng(10)
        eta, ex = Engine("eta", new_planes(8, 512, 1)), Engine("exact")
        agree = 0
        for _ in range(200):
            E, t, k, _, _ = clustered_instance(rng)
            a, _ = eta.select(t[None], E[None], np.array([len(E)]), k)
            b, _ = ex.select(t[None], E[None], np.array([len(E)]), k)
            agree += set(a[0].tolist()) == set(b[0].tolist())
        assert agree >= 190

    def test_frozen_positional_store(self):
        rng = np.random.default_rng(11)
        E = rng.normal(size=(20, 4))
        planes = new_planes(4, 64, 2)
        frozen = Engine("eta-frozen", planes, freeze_fingerprints(E, planes))
        fresh = Engine("eta", planes)
        t = rng.normal(size=(1, 4))
        a, _ = frozen.select(t, E[None], np.array([20]), 5)
        b, _ = fresh.select(t, E[None], np.array([20]), 5)
        assert np.array_equal(a, b)


class TestLTI:
    def test_k_at_least_L_equals_full_attention(self):
        rng = np.random.default_rng(5)
        p = init_attention(rng, 6)
        E, t = rng.normal(size=(9, 6)), rng.normal(size=(1, 6))
        np.testing.assert_allclose(lti(t, E, 20, Engine("exact"), p), target_attention(t, E, p), atol=1e-12)

    def test_hard_empty_uses_no_context(self):
        rng = np.random.default_rng(6)
        p = init_attention(rng, 4)
        nc = rng.normal(size=4)
        out = lti(rng.normal(size=(1, 4)), rng.normal(size=(5, 4)), 3, Engine("hard"), p, nc,
                  categories=np.array([1, 1, 2, 2, 3]), target_category=9)
        assert np.array_equal(out, nc)
        assert np.all(np.isfinite(out))

    def test_hard_empty_gradient_goes_to_no_context(self):
        rng = np.random.default_rng(7)
        p = init_attention(rng, 4)
        kw = dict(target_cats=np.array([9]), seq_cats=np.array([[1, 2, 3]]))
        _, cache = lti_forward(rng.normal(size=(1, 4)), rng.normal(size=(1, 3, 4)), np.array([3]), 2,
                               Engine("hard"), p, np.zeros(4), **kw)
        up = rng.normal(size=(1, 4))
        dq, dseqs, grads, dnc = lti_backward(cache, up)
        np.testing.assert_allclose(dnc, up[0])
        assert not dseqs.any() and not dq.any()

    def test_rejects_empty_and_bad_k(self):
        p = init_attention(np.random.default_rng(0), 4)
        with pytest.raises(EmptySequenceError):
            lti(np.ones((1, 4)), np.zeros((0, 4)), 2, Engine("exact"), p)
        with pytest.raises(ValueError):
            lti(np.ones((1, 4)), np.ones((3, 4)), 0, Engine("exact"), p)

    def test_permuting_non_selected_rows(self):
        rng = np.random.default_rng(8)
        p = init_attention(rng, 8)
        planes = new_planes(8, 64, 3)
        E, t = rng.normal(size=(30, 8)), rng.normal(size=(1, 8))
        for engine in (Engine("exact"), Engine("eta", planes)):
            idx, _ = engine.select(t, E[None], np.array([30]), 6)
            rest = np.setdiff1d(np.arange(30), idx[0])
            E2 = E.copy()
            E2[rest] = E[rng.permutation(rest)]
            assert np.array_equal(lti(t, E2, 6, engine, p), lti(t, E, 6, engine, p))

    def test_selection_order_does_not_matter(self):
        # selected rows are fed in sequence order, so the output equals attention over the sorted subset
        rng = np.random.default_rng(9)
        p = init_attention(rng, 4)
        E, t = rng.normal(size=(12, 4)), rng.normal(size=(1, 4))
        idx, _ = Engine("exact").select(t, E[None], np.array([12]), 5)
        want = target_attention(t, E[np.sort(idx[0])], p)
        np.testing.assert_allclose(lti(t, E, 5, Engine("exact"), p), want, atol=1e-12)

    @pytest.mark.parametrize("name", ["exact", "eta", "hard"])
    def test_gradients_selected_and_not(self, name):
        rng = np.random.default_rng(12)
        d, L, k = 4, 8, 3
        p = init_attention(rng, d)
        planes = new_planes(d, 32, 4)
        engine = Engine(name, planes if name == "eta" else None)
        t = rng.normal(size=(2, d))
        seqs = rng.normal(size=(2, L, d))
        lengths = np.array([L, 6])
        kw = {}
        if name == "hard":
            kw = dict(target_cats=np.array([1, 1]), seq_cats=rng.integers(0, 2, (2, L)))
        up = rng.normal(size=(2, d))
        _, cache = lti_forward(t, seqs, lengths, k, engine, p, np.zeros(d), **kw)
        idx, counts = engine.select(t, seqs, lengths, k, **kw)
        _, dseqs, _, _ = lti_backward(cache, up)
        for r in range(2):
            sel = set(idx[r, : counts[r]].tolist())
            for i in range(L):
                if i not in sel:
                    assert not dseqs[r, i].any()

        # finite differences with selection held fixed at the base point
        sel_mask = np.zeros((2, L), bool)
        for r in range(2):
            sel_mask[r, idx[r, : counts[r]]] = True

        def f(pr):
            X = np.where(sel_mask[:, :, None], pr["seqs"], 0.0)
            ap = AttentionParams(**{key: pr[key] for key in ("W_Q", "W_K", "W_V", "W_O")})
            out, c = attention_forward(pr["t"], X, sel_mask, ap)
            dq, dX, grads = attention_backward(c, up)
            return float((out * up).sum()), dict(grads, t=dq, seqs=np.where(sel_mask[:, :, None], dX, 0.0))

        params = dict(p.as_dict(), t=t.copy(), seqs=seqs.copy())
        assert backward_check(f, params, eps=1e-6) <= 1e-3

        # the lti backward agrees with that fixed-selection gradient
        _, grads_ref = f(params)
        np.testing.assert_allclose(dseqs, grads_ref["seqs"], atol=1e-12)
