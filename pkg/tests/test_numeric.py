import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from eta_ctr import attention as att
from eta_ctr.numeric import (
    NumericError,
    ShapeError,
    backward_check,
    linear,
    linear_backward,
    masked_softmax,
    matmul,
    matmul_backward,
    relu,
    relu_backward,
    sigmoid,
    softmax_backward,
    softmax_rows,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for t in range(a.shape[1]):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.5, -2.0], [0.25, 7.0]])
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_hand_product(self):
        assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-6)

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a, b, c = rng.normal(size=(4, 5)), rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
            left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
            np.testing.assert_allclose(left, right, rtol=1e-5, atol=1e-9)

    def test_backward(self):
        rng = np.random.default_rng(5)
        params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
        up = rng.normal(size=(3, 2))

        def f(p):
            da, db = matmul_backward(p["a"], p["b"], up)
            return float((matmul(p["a"], p["b"]) * up).sum()), {"a": da, "b": db}

        assert backward_check(f, params, eps=1e-5) < 1e-7


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3] * 3])

    def test_no_overflow(self):
        out = softmax_rows([[1000.0, 0.0]])
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-6)

    def test_reference_values(self):
        np.testing.assert_allclose(softmax_rows([[1.0, 2.0, 3.0]]), [[0.09003, 0.24473, 0.66524]], atol=1e-5)

    @given(arrays(np.float64, (4, 6), elements=finite), finite)
    def test_rows_sum_to_one_and_shift_invariance(self, x, c):
        p = softmax_rows(x)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(softmax_rows(x + c), p, atol=1e-9)

    def test_masked_rows(self):
        x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        mask = np.array([[True, False, True], [False, False, False]])
        p = masked_softmax(x, mask)
        np.testing.assert_allclose(p[0], softmax_rows([[1.0, 3.0]])[0][[0, 0, 1]] * [1, 0, 1])
        assert np.array_equal(p[1], np.zeros(3))

    def test_backward(self):
        rng = np.random.default_rng(6)
        params = {"x": rng.normal(size=(3, 5))}
        up = rng.normal(size=(3, 5))

        def f(p):
            s = softmax_rows(p["x"])
            return float((s * up).sum()), {"x": softmax_backward(s, up)}

        assert backward_check(f, params, eps=1e-6) < 1e-7


class TestElementwise:
    def test_sigmoid_extremes(self):
        out = sigmoid(np.array([-800.0, 0.0, 800.0]))
        assert out.tolist() == [0.0, 0.5, 1.0]

    def test_sigmoid_matches_formula(self):
        x = np.linspace(-20, 20, 81)
        np.testing.assert_allclose(sigmoid(x), 1 / (1 + np.exp(-x)), rtol=1e-12)

    def test_relu_and_backward(self):
        x = np.array([-1.0, 0.0, 2.0])
        assert relu(x).tolist() == [0.0, 0.0, 2.0]
        assert relu_backward(x, np.ones(3)).tolist() == [0.0, 0.0, 1.0]

    def test_linear_backward(self):
        rng = np.random.default_rng(7)
        params = {"x": rng.normal(size=(4, 3)), "w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}
        up = rng.normal(size=(4, 2))

        def f(p):
            dx, dw, db = linear_backward(p["x"], p["w"], up)
            return float((linear(p["x"], p["w"], p["b"]) * up).sum()), {"x": dx, "w": dw, "b": db}

        assert backward_check(f, params, eps=1e-6) < 1e-7


class TestBackwardCheck:
    def test_quadratic_is_exact(self):
        params = {"w": np.array([3.0])}
        err = backward_check(lambda p: (float(p["w"][0] ** 2), {"w": 2 * p["w"]}), params)
        assert err == pytest.approx(0.0, abs=1e-9)

    def test_detects_wrong_gradient(self):
        params = {"w": np.array([3.0])}
        assert backward_check(lambda p: (float(p["w"][0] ** 2), {"w": 3 * p["w"]}), params) == pytest.approx(0.5, abs=1e-6)

    def test_params_restored(self):
        params = {"w": np.array([3.0, -1.0])}
        before = params["w"].copy()
        backward_check(lambda p: (float((p["w"] ** 2).sum()), {"w": 2 * p["w"]}), params)
        assert np.array_equal(params["w"], before)

    def test_non_finite_objective(self):
        with pytest.raises(NumericError):
            backward_check(lambda p: (float("nan"), {"w": p["w"]}), {"w": np.array([1.0])})

    def test_two_layer_mlp_bce(self):
        # 1 input -> 3 hidden -> 1 output: 3 + 3 + 3 + 1 = 10 parameters
        rng = np.random.default_rng(8)
        x = rng.normal(size=(6, 1))
        y = np.array([1, 0, 1, 1, 0, 0], dtype=float)
        params = {"W0": rng.normal(size=(1, 3)), "b0": rng.normal(size=3), "W1": rng.normal(size=(3, 1)),
                  "b1": rng.normal(size=1)}
        assert sum(v.size for v in params.values()) == 10

        def f(p):
            z0 = linear(x, p["W0"], p["b0"])
            h = relu(z0)
            prob = sigmoid(linear(h, p["W1"], p["b1"])[:, 0])
            value = -np.mean(y * np.log(prob) + (1 - y) * np.log(1 - prob))
            dz1 = ((prob - y) / len(y))[:, None]
            dh, dW1, db1 = linear_backward(h, p["W1"], dz1)
            _, dW0, db0 = linear_backward(x, p["W0"], relu_backward(z0, dh))
            return float(value), {"W0": dW0, "b0": db0, "W1": dW1, "b1": db1}

        assert backward_check(f, params, eps=1e-4) <= 1e-3

    def test_attention_wq(self):
        rng = np.random.default_rng(9)
        p = att.init_attention(rng, 4, heads=2)
        q = rng.normal(size=(3, 4))
        X = rng.normal(size=(3, 5, 4))
        mask = np.ones((3, 5), bool)
        up = rng.normal(size=(3, 4))
        params = p.as_dict()

        def f(pr):
            ap = att.AttentionParams(**pr)
            out, cache = att.attention_forward(q, X, mask, ap)
            _, _, grads = att.attention_backward(cache, up)
            return float((out * up).sum()), grads

        assert backward_check(f, params, eps=1e-4, names=["W_Q"]) <= 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_shapes_property(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    out = matmul(a, b)
    assert out.shape == (n, m)
    assert np.all(np.isfinite(out))
