"""Tensor-core ops: forward values against independent oracles, gradients
against central finite differences, and tape semantics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasmae import tensor as T
from dasmae.errors import ContractError, InputError, ShapeError

from gradcheck import assert_gradients_match


def param(arr):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

class TestMatmul:
    def test_identity(self, rng):
        b = rng.normal(size=(3, 2))
        out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(b))
        np.testing.assert_allclose(out.data, b)

    def test_scalar_case(self):
        out = T.matmul(T.Tensor([[2.0]]), T.Tensor([[3.0]]))
        assert out.data[0, 0] == pytest.approx(6.0)

    def test_against_triple_loop(self, rng):
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(4, 3))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        np.testing.assert_allclose(out.data, expected, rtol=1e-5)

    def test_shape_error_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_gradients_2d(self, rng):
        params = {"a": param(rng.normal(size=(3, 4))),
                  "b": param(rng.normal(size=(4, 2)))}
        assert_gradients_match(
            lambda: T.mean(T.matmul(params["a"], params["b"])), params)

    def test_gradients_batched(self, rng):
        params = {"a": param(rng.normal(size=(2, 3, 4))),
                  "b": param(rng.normal(size=(2, 4, 3)))}
        assert_gradients_match(
            lambda: T.mean(T.matmul(params["a"], params["b"])), params,
            coords_per_tensor=12)

    def test_gradients_broadcast_rhs(self, rng):
        params = {"a": param(rng.normal(size=(2, 3, 4))),
                  "w": param(rng.normal(size=(4, 5)))}
        assert_gradients_match(
            lambda: T.mean(T.matmul(params["a"], params["w"])), params,
            coords_per_tensor=12)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)

    @given(st.floats(min_value=-50, max_value=50))
    @settings(max_examples=25, deadline=None)
    def test_shift_invariance(self, shift):
        x = np.array([0.3, -1.2, 2.0, 0.0])
        a = T.softmax(T.Tensor(x), axis=0).data
        b = T.softmax(T.Tensor(x + shift), axis=0).data
        np.testing.assert_allclose(a, b, atol=1e-6)
        T.reset_tape()

    def test_against_exp_normalize_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        e = np.exp(x.astype(np.float64))
        expected = e / e.sum()
        out = T.softmax(T.Tensor(x), axis=0)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_rows_sum_to_one(self, rng):
        x = rng.normal(scale=5.0, size=(6, 9))
        out = T.softmax(T.Tensor(x), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-6)
        assert np.all(out.data > 0)

    def test_axis_out_of_range(self):
        with pytest.raises(ContractError):
            T.softmax(T.Tensor(np.zeros((2, 2))), axis=2)

    def test_gradients(self, rng):
        params = {"x": param(rng.normal(size=(3, 5)))}
        weights = T.Tensor(rng.normal(size=(3, 5)))
        assert_gradients_match(
            lambda: T.mean(T.mul(T.softmax(params["x"], axis=-1), weights)),
            params, coords_per_tensor=15)


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------

class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = T.layer_norm(T.Tensor(np.full((2, 6), 3.5)),
                           T.Tensor(np.ones(6)), T.Tensor(np.zeros(6)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-5)

    def test_zero_mean_unit_variance(self, rng):
        x = rng.normal(size=(4, 16)) * 3 + 1
        out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(16)),
                           T.Tensor(np.zeros(16)), eps=1e-8).data
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_zero_gamma_gives_beta(self, rng):
        x = rng.normal(size=(3, 5))
        beta = np.array([1.0, -2.0, 0.5, 0.0, 3.0])
        out = T.layer_norm(T.Tensor(x), T.Tensor(np.zeros(5)), T.Tensor(beta))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (3, 5)), atol=1e-7)

    def test_affine_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.layer_norm(T.Tensor(np.zeros((2, 4))), T.Tensor(np.ones(3)),
                         T.Tensor(np.zeros(3)))

    def test_gradients(self, rng):
        params = {"x": param(rng.normal(size=(3, 6))),
                  "gamma": param(rng.normal(size=6)),
                  "beta": param(rng.normal(size=6))}
        weights = T.Tensor(rng.normal(size=(3, 6)))
        assert_gradients_match(
            lambda: T.mean(T.mul(T.layer_norm(params["x"], params["gamma"],
                                              params["beta"]), weights)),
            params, coords_per_tensor=18)


# ---------------------------------------------------------------------------
# gelu
# ---------------------------------------------------------------------------

class TestGelu:
    def test_zero(self):
        assert T.gelu(T.Tensor([0.0])).data[0] == 0.0

    def test_positive_asymptote(self):
        assert abs(T.gelu(T.Tensor([10.0])).data[0] - 10.0) < 1e-3

    def test_negative_asymptote(self):
        assert abs(T.gelu(T.Tensor([-10.0])).data[0]) < 1e-3

    def test_tanh_form(self):
        x = 0.7
        u = math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)
        expected = 0.5 * x * (1 + math.tanh(u))
        assert T.gelu(T.Tensor([x])).data[0] == pytest.approx(expected, rel=1e-6)

    def test_gradients(self, rng):
        params = {"x": param(rng.normal(size=7))}
        assert_gradients_match(lambda: T.mean(T.gelu(params["x"])), params)


# ---------------------------------------------------------------------------
# cross_entropy
# ---------------------------------------------------------------------------

class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.cross_entropy(T.Tensor(np.zeros((4, 6))), np.zeros(4, dtype=int))
        assert float(loss.data) == pytest.approx(math.log(6), abs=1e-4)

    def test_confident_correct(self):
        logits = np.zeros((2, 4), dtype=np.float32)
        logits[0, 1] = 1000.0
        logits[1, 3] = 1000.0
        loss = T.cross_entropy(T.Tensor(logits), np.array([1, 3]))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-6)

    def test_against_double_precision_oracle(self, rng):
        logits = rng.normal(size=(2, 5))
        labels = np.array([3, 0])
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        expected = -np.mean(logp[np.arange(2), labels])
        loss = T.cross_entropy(T.Tensor(logits), labels)
        assert float(loss.data) == pytest.approx(expected, rel=1e-5)

    def test_out_of_range_label(self):
        with pytest.raises(InputError):
            T.cross_entropy(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradient_is_softmax_minus_onehot(self, rng):
        logits = param(rng.normal(size=(3, 4)))
        labels = np.array([1, 0, 2])
        loss = T.cross_entropy(logits, labels)
        T.backward(loss)
        e = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(3), labels] -= 1
        np.testing.assert_allclose(logits.grad, p / 3, atol=1e-9)

    def test_gradients_fd(self, rng):
        params = {"logits": param(rng.normal(size=(2, 4)))}
        labels = np.array([2, 1])
        assert_gradients_match(
            lambda: T.cross_entropy(params["logits"], labels), params)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

class TestStructuralOps:
    def test_reshape_transpose_roundtrip(self, rng):
        x = rng.normal(size=(2, 3, 4))
        out = T.transpose(T.reshape(T.Tensor(x), (6, 4)), (1, 0))
        np.testing.assert_array_equal(out.data, x.reshape(6, 4).T)

    def test_concat_and_narrow(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
        cat = T.concat([T.Tensor(a), T.Tensor(b)], axis=0)
        np.testing.assert_array_equal(T.narrow(cat, 0, 2, 4).data, b)

    def test_take_rows_gathers(self, rng):
        table = rng.normal(size=(5, 3))
        idx = np.array([[0, 4], [2, 2]])
        out = T.take_rows(T.Tensor(table), idx)
        np.testing.assert_array_equal(out.data, table[idx])

    def test_gather_tokens(self, rng):
        x = rng.normal(size=(2, 4, 3))
        idx = np.array([[1, 3], [0, 0]])
        out = T.gather_tokens(T.Tensor(x), idx)
        np.testing.assert_array_equal(out.data[0], x[0, [1, 3]])
        np.testing.assert_array_equal(out.data[1], x[1, [0, 0]])

    def test_structural_gradients(self, rng):
        params = {
            "a": param(rng.normal(size=(2, 3))),
            "b": param(rng.normal(size=(2, 3))),
            "table": param(rng.normal(size=(4, 3))),
            "tok": param(rng.normal(size=(2, 4, 3))),
        }
        idx = np.array([0, 2, 2, 1])
        gidx = np.array([[1, 1], [3, 0]])
        w = T.Tensor(rng.normal(size=(2, 2, 3)))

        def loss_fn():
            cat = T.concat([params["a"], params["b"]], axis=0)
            took = T.take_rows(params["table"], idx)
            gathered = T.gather_tokens(params["tok"], gidx)
            s1 = T.mean(T.mul(T.narrow(cat, 0, 1, 2), T.Tensor(np.ones((2, 3)))))
            s2 = T.mean(T.broadcast_to(T.reshape(T.mean(took, axis=0), (1, 3)),
                                       (5, 3)))
            s3 = T.mean(T.mul(gathered, w))
            return T.add(T.add(s1, s2), s3)

        assert_gradients_match(loss_fn, params, coords_per_tensor=12)

    def test_mean_and_sum_gradients(self, rng):
        params = {"x": param(rng.normal(size=(3, 4)))}
        assert_gradients_match(lambda: T.sum_all(params["x"]), params)
        assert_gradients_match(
            lambda: T.mean(T.mul(T.mean(params["x"], axis=1),
                                 T.Tensor(np.array([1.0, -2.0, 0.5])))), params)

    def test_add_mul_broadcast_gradients(self, rng):
        params = {"x": param(rng.normal(size=(2, 3, 4))),
                  "bias": param(rng.normal(size=4)),
                  "row": param(rng.normal(size=(3, 4)))}
        assert_gradients_match(
            lambda: T.mean(T.mul(T.add(T.add(params["x"], params["bias"]),
                                       params["row"]), 1.7)),
            params, coords_per_tensor=10)


# ---------------------------------------------------------------------------
# backward / tape semantics
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = param(rng.normal(size=(3, 4)))
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_squares(self, rng):
        x = param(rng.normal(size=7))
        T.backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_non_scalar_loss_rejected(self, rng):
        x = param(rng.normal(size=3))
        with pytest.raises(ContractError):
            T.backward(T.mul(x, 2.0))

    def test_accumulation_without_reset(self, rng):
        x = param(rng.normal(size=4))
        T.reset_tape()
        T.backward(T.sum_all(x))
        T.reset_tape()
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, 2 * np.ones(4))
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_multiple_paths_sum(self, rng):
        x = param(rng.normal(size=3))
        y = T.add(T.mul(x, 2.0), T.mul(x, 3.0))
        T.backward(T.sum_all(y))
        np.testing.assert_allclose(x.grad, 5 * np.ones(3), rtol=1e-12)

    def test_each_node_visited_once(self, rng):
        # shared subexpression used twice: gradient must be exact, tape
        # walk must not double-count
        x = param(np.array([2.0]))
        shared = T.mul(x, x)
        out = T.add(shared, shared)
        T.backward(T.sum_all(out))
        np.testing.assert_allclose(x.grad, [8.0])

    def test_no_grad_suppresses_recording(self, rng):
        x = param(rng.normal(size=3))
        T.reset_tape()
        with T.no_grad():
            T.sum_all(T.mul(x, x))
        assert len(T.active_tape()) == 0

    def test_determinism_bit_identical(self, rng):
        x_data = rng.normal(size=(4, 4)).astype(np.float32)
        results = []
        for _ in range(2):
            T.reset_tape()
            x = T.Tensor(x_data.copy(), requires_grad=True)
            w = T.Tensor(np.arange(16, dtype=np.float32).reshape(4, 4) / 16,
                         requires_grad=True)
            loss = T.mean(T.mul(T.softmax(T.matmul(x, w), axis=-1), 3.0))
            T.backward(loss)
            results.append((loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()))
        assert results[0] == results[1]

    def test_grad_allocated_only_with_requires_grad(self):
        a = T.Tensor(np.zeros(3), requires_grad=True)
        b = T.Tensor(np.zeros(3))
        assert a.grad is not None and a.grad.shape == (3,)
        assert b.grad is None
