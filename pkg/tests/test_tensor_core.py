"""Tensor engine: forward values, error contracts and reverse-mode gradients."""

import math

import numpy as np
import pytest

import tensor_core as tc
from shared import ContractError, DimensionError, NumericalError, ValidationError
from tensor_core import Tensor


class TestMatmul:
    def test_identity(self):
        out = tc.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
        np.testing.assert_array_equal(out.data, [[3], [4]])

    def test_zero_left_operand(self):
        rng = np.random.default_rng(0)
        out = tc.matmul(Tensor(np.zeros((2, 3))), Tensor(rng.normal(size=(3, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_hand_expansion(self):
        out = tc.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_batched_broadcast(self):
        a = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
        b = np.ones((3, 4), dtype=np.float32)
        np.testing.assert_allclose(tc.matmul(Tensor(a), Tensor(b)).data, a @ b)

    @pytest.mark.parametrize("seed", range(5))
    def test_associative(self, seed):
        rng = np.random.default_rng(seed)
        with tc.precision(np.float64):
            a, b, c = (Tensor(rng.normal(size=(3, 3))) for _ in range(3))
            left = tc.matmul(tc.matmul(a, b), c).data
            right = tc.matmul(a, tc.matmul(b, c)).data
        np.testing.assert_allclose(left, right, rtol=1e-12, atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tc.softmax_lastdim(Tensor([0, 0, 0, 0])).data, [0.25] * 4)

    def test_large_logits_do_not_overflow(self):
        y = tc.softmax_lastdim(Tensor([1000.0, 0.0])).data
        assert y[0] == pytest.approx(1.0)
        assert y[1] == 0.0

    def test_log_two(self):
        y = tc.softmax_lastdim(Tensor([0.0, math.log(2.0)])).data
        np.testing.assert_allclose(y, [1 / 3, 2 / 3], rtol=1e-6)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(1).normal(size=(3, 5, 7))
        np.testing.assert_allclose(tc.softmax_lastdim(Tensor(x)).data.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_token_gives_zeros(self):
        x = Tensor(np.full((2, 4), 3.0))
        out = tc.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_hand_computation(self):
        out = tc.layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=0.0)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]])

    def test_affine_only(self):
        x = Tensor(np.random.default_rng(2).normal(size=(3, 4)))
        out = tc.layer_norm(x, Tensor(np.zeros(4)), Tensor(np.full(4, 5.0)))
        np.testing.assert_allclose(out.data, 5.0)

    def test_gamma_shape_checked(self):
        with pytest.raises(DimensionError):
            tc.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


class TestGelu:
    def test_values(self):
        y = tc.gelu(Tensor([0.0, 1.0, 20.0])).data
        assert y[0] == 0.0
        phi = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert y[1] == pytest.approx(phi, abs=1e-6)
        assert y[1] == pytest.approx(0.8413, abs=1e-4)
        assert y[2] == pytest.approx(20.0)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = tc.cross_entropy(Tensor(np.zeros((1, 10))), [3])
        assert loss.item() == pytest.approx(math.log(10.0), rel=1e-6)

    def test_confident_correct_class(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1e4
        assert tc.cross_entropy(Tensor(logits), [2]).item() == pytest.approx(0.0, abs=1e-6)

    def test_two_class_hand_value(self):
        loss = tc.cross_entropy(Tensor([[0.0, math.log(2.0)]]), [1])
        assert loss.item() == pytest.approx(-math.log(2.0 / 3.0), rel=1e-6)

    @pytest.mark.parametrize("labels", [[4], [-1]])
    def test_out_of_range_label(self, labels):
        with pytest.raises(ValidationError):
            tc.cross_entropy(Tensor(np.zeros((1, 4))), labels)


class TestBackward:
    def test_sum_gives_ones(self):
        x = tc.parameter(np.random.default_rng(3).normal(size=(2, 3)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self):
        x = tc.parameter([1.0, 2.0])
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = tc.parameter([1.0, 2.0])
        with pytest.raises(ContractError):
            tc.backward(x * 2.0)

    def test_unrecorded_loss_rejected(self):
        with pytest.raises(ContractError):
            tc.backward(Tensor(1.0))

    def test_shared_input_accumulates(self):
        x = tc.parameter([3.0])
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_broadcast_gradient_is_reduced(self):
        w = tc.parameter(np.ones(3))
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        (x * w).sum().backward()
        np.testing.assert_allclose(w.grad, [3.0, 5.0, 7.0])

    def test_repeated_backward_is_bitwise_identical(self):
        rng = np.random.default_rng(7)
        w = tc.parameter(rng.normal(size=(4, 3)), name="w")
        g = tc.parameter(rng.uniform(0.5, 1.5, size=3), name="g")
        b = tc.parameter(rng.normal(size=3), name="b")
        x = Tensor(rng.normal(size=(5, 4)))
        labels = np.array([0, 1, 2, 0, 1])

        def grads():
            for p in (w, g, b):
                p.zero_grad()
            h = tc.gelu(tc.layer_norm(tc.matmul(x, w), g, b))
            tc.backward(tc.cross_entropy(tc.softmax_lastdim(h) + h, labels))
            return [p.grad.tobytes() for p in (w, g, b)]

        assert grads() == grads()

    def test_tape_is_released_after_backward(self):
        x = tc.parameter([1.0])
        with tc.ComputationTape() as tape:
            loss = (x * 2.0).sum()
            assert len(tape) > 0
            tc.backward(loss)
        assert tape.released
        with pytest.raises(ContractError):
            tape.backward(loss)

    def test_no_grad_records_nothing(self):
        x = tc.parameter([1.0, 2.0])
        with tc.no_grad():
            y = (x * 3.0).sum()
        assert not y.requires_grad
        with pytest.raises(ContractError):
            tc.backward(y)


class TestNumerics:
    def test_non_finite_input_rejected(self):
        with pytest.raises(NumericalError):
            Tensor([1.0, float("nan")])

    def test_division_by_zero_rejected(self):
        with np.errstate(divide="ignore"), pytest.raises(NumericalError):
            tc.div(Tensor([1.0]), Tensor([0.0]))

    def test_default_dtype_is_float32(self):
        assert Tensor([1.0]).dtype is np.float32

    def test_precision_context(self):
        with tc.precision(np.float64):
            assert Tensor([1.0]).dtype is np.float64
        assert tc.get_default_dtype() is np.float32

    def test_unsupported_precision(self):
        with pytest.raises(ValidationError):
            with tc.precision(np.float16):
                pass


class TestGradientCheck:
    def test_composite_expression_float64(self):
        rng = np.random.default_rng(4)
        with tc.precision(np.float64):
            w = tc.parameter(rng.normal(size=(4, 3)), name="w")
            g = tc.parameter(rng.uniform(0.5, 1.5, size=3), name="g")
            b = tc.parameter(rng.normal(size=3), name="b")
            x = Tensor(rng.normal(size=(5, 4)))
            labels = np.array([0, 1, 2, 0, 1])

            def loss_fn():
                h = tc.gelu(tc.layer_norm(tc.matmul(x, w), g, b))
                return tc.cross_entropy(tc.softmax_lastdim(h) * 3.0 + tc.sigmoid(h), labels)

            entries = tc.gradient_check(loss_fn, [w, g, b], h=1e-6)
        assert len(entries) == w.size + g.size + b.size
        assert max(e.rel_error for e in entries) < 1e-5

    def test_sampled_indices(self):
        with tc.precision(np.float64):
            x = tc.parameter(np.linspace(-1.0, 1.0, 6), name="x")
            entries = tc.gradient_check(lambda: (x**3).sum(), [x], samples=[(0, 1), (0, 4)], h=1e-6)
        assert [e.index for e in entries] == [1, 4]
        for e in entries:
            assert e.analytic == pytest.approx(3 * x.data[e.index] ** 2, rel=1e-9)
            assert e.rel_error < 1e-6

    def test_dropout_is_identity_without_rng(self):
        x = Tensor(np.ones(5))
        assert tc.dropout(x, 0.5, None) is x

    def test_dropout_scales_kept_units(self):
        y = tc.dropout(Tensor(np.ones(1000)), 0.5, np.random.default_rng(0)).data
        assert set(np.unique(y)) <= {0.0, 2.0}
