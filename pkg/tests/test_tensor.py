"""Tests for the tensor engine: kernels, backward passes, RNG, grad checking.

Expected values fall into two groups: hand arithmetic on tiny inputs, and
central-finite-difference oracles for every backward pass (checked over
many seeds with the norm-relative error metric).
"""

import math

import numpy as np
import pytest

from promptlab.tensor import (
    GradCheckReport,
    NonFiniteError,
    Rng,
    ShapeError,
    Tape,
    Tensor,
    add,
    add_bias,
    concat_cols,
    concat_rows,
    delete_rows,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    mul,
    reduce_sum,
    reshape,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    transpose,
)


def _param(rng: Rng, shape, name: str) -> Tensor:
    return Tensor(rng.normal(shape), requires_grad=True, name=name)


class TestMatmul:
    def test_identity_case(self):
        """I @ A returns A unchanged."""
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, -2.0], [7.5, 0.25]])
        np.testing.assert_array_equal(matmul(a, b).data, b.data)

    def test_hand_arithmetic(self):
        """[[1,2]] @ [[3],[4]] = [[11]]."""
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_flop_counter_exact(self):
        """Each [p,q] x [q,r] product adds exactly 2pqr to the meter."""
        a = Tensor(np.zeros((5, 7), dtype=np.float32))
        b = Tensor(np.zeros((7, 3), dtype=np.float32))
        with Tape() as tape:
            matmul(a, b)
            assert tape.matmul_flops == 2 * 5 * 7 * 3
            matmul(a, b)
            assert tape.matmul_flops == 2 * (2 * 5 * 7 * 3)
        assert tape.other_flops == 0

    def test_backward_vs_finite_differences(self):
        """Random 5x7 by 7x3 product, both operand gradients."""
        rng = Rng(11)
        a = _param(rng, (5, 7), "a")
        b = _param(rng, (7, 3), "b")
        report = grad_check(lambda: reduce_sum(gelu(matmul(a, b))), {"a": a, "b": b}, step=1e-3)
        assert report.passed, str(report)


class TestSoftmaxRows:
    def test_uniform_logits(self):
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [[0.25, 0.25, 0.25, 0.25]])

    def test_saturation_is_stable(self):
        """Row [1000, 0] must not overflow; limit is [1, 0]."""
        out = softmax_rows(Tensor([[1000.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-6)

    def test_rows_sum_to_one(self):
        x = Tensor(Rng(3).normal((4, 6), std=3.0))
        sums = softmax_rows(x).data.sum(axis=1, dtype=np.float64)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)

    def test_backward_vs_finite_differences(self):
        rng = Rng(5)
        x = _param(rng, (4, 6), "x")
        c = Tensor(rng.normal((4, 6)))
        report = grad_check(lambda: reduce_sum(mul(softmax_rows(x), c)), {"x": x})
        assert report.passed, str(report)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        """Zero variance: eps keeps the division finite, output is 0."""
        x = Tensor(np.full((2, 4), 3.0, dtype=np.float32))
        out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-5)

    def test_already_normalized_row(self):
        out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-3)

    def test_zero_length_row_rejected(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))

    def test_backward_vs_finite_differences(self):
        """Random 3x8 input; x, gamma, beta all checked."""
        rng = Rng(7)
        x = _param(rng, (3, 8), "x")
        gamma = Tensor(rng.uniform((8,), 0.5, 1.5), requires_grad=True)
        beta = _param(rng, (8,), "beta")
        c = Tensor(rng.normal((3, 8)))
        report = grad_check(
            lambda: reduce_sum(mul(layer_norm(x, gamma, beta), c)),
            {"x": x, "gamma": gamma, "beta": beta},
        )
        assert report.passed, str(report)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_positive_asymptote(self):
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-4

    def test_negative_asymptote(self):
        assert abs(gelu(Tensor([-10.0])).data[0]) < 1e-4

    def test_backward_vs_finite_differences(self):
        x = _param(Rng(9), (4, 5), "x")
        report = grad_check(lambda: reduce_sum(gelu(x)), {"x": x})
        assert report.passed, str(report)


class TestStructuralOps:
    """Slicing, concatenation, deletion: exact forward, routed gradients."""

    def test_slice_concat_roundtrip(self):
        x = Tensor(Rng(1).normal((6, 4)))
        top, bottom = slice_rows(x, 0, 2), slice_rows(x, 2, 6)
        np.testing.assert_array_equal(concat_rows([top, bottom]).data, x.data)
        left, right = slice_cols(x, 0, 3), slice_cols(x, 3, 4)
        np.testing.assert_array_equal(concat_cols([left, right]).data, x.data)

    def test_delete_rows_keeps_order(self):
        x = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3))
        out = delete_rows(x, 1, 3)
        np.testing.assert_array_equal(out.data, x.data[[0, 3]])

    def test_structural_backward(self):
        rng = Rng(13)
        x = _param(rng, (5, 4), "x")
        y = _param(rng, (2, 4), "y")
        c = Tensor(rng.normal((6, 4)))

        def f():
            spliced = concat_rows([slice_rows(x, 0, 3), y, slice_rows(x, 4, 5)])
            return reduce_sum(mul(delete_rows(spliced, 1, 2), slice_rows(c, 0, 5)))

        report = grad_check(f, {"x": x, "y": y})
        assert report.passed, str(report)

    def test_elementwise_backward(self):
        rng = Rng(15)
        x = _param(rng, (3, 4), "x")
        b = _param(rng, (4,), "b")

        def f():
            h = add_bias(scale(x, 0.7), b)
            return reduce_sum(mul(add(h, x), transpose(transpose(h))))

        report = grad_check(f, {"x": x, "b": b})
        assert report.passed, str(report)

    def test_reshape_backward(self):
        x = _param(Rng(17), (3, 4), "x")
        report = grad_check(lambda: reduce_sum(gelu(reshape(x, (2, 6)))), {"x": x})
        assert report.passed, str(report)


class TestBackwardAcrossSeeds:
    """Every differentiable kernel agrees with central differences on
    random inputs, quantified over at least 10 seeds."""

    @pytest.mark.parametrize("seed", range(10))
    def test_composite_graph(self, seed):
        rng = Rng(seed)
        x = _param(rng, (4, 6), "x")
        w = _param(rng, (6, 6), "w")
        gamma = Tensor(rng.uniform((6,), 0.5, 1.5), requires_grad=True)
        beta = _param(rng, (6,), "beta")
        b = _param(rng, (6,), "b")

        def f():
            h = layer_norm(x, gamma, beta)
            h = add_bias(matmul(h, w), b)
            h = gelu(h)
            h = softmax_rows(h)
            return reduce_sum(mul(h, add(x, x)))

        report = grad_check(
            f, {"x": x, "w": w, "gamma": gamma, "beta": beta, "b": b}, step=1e-3
        )
        assert report.passed, str(report)


class TestTapeMechanics:
    def test_gradients_accumulate_additively(self):
        """A tensor used twice receives the sum of both contributions."""
        x = Tensor([[2.0, 3.0]], requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(add(x, x))
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])

    def test_no_tape_records_nothing(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        out = add(x, x)
        assert out.requires_grad is False and out.grad is None

    def test_backward_requires_scalar(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        with Tape() as tape:
            y = add(x, x)
            with pytest.raises(ShapeError):
                tape.backward(y)

    def test_nan_poisoning_is_caught(self):
        bad = Tensor(np.array([[1.0, np.nan]], dtype=np.float32))
        with pytest.raises(NonFiniteError):
            add(bad, bad)

    def test_activation_bytes_metered(self):
        a = Tensor(np.zeros((5, 7), dtype=np.float32))
        b = Tensor(np.zeros((7, 3), dtype=np.float32))
        with Tape() as tape:
            matmul(a, b)
        assert tape.activation_bytes == 5 * 3 * 4


class TestRng:
    def test_identical_seed_identical_stream(self):
        a, b = Rng(123), Rng(123)
        np.testing.assert_array_equal(a.normal((100,)), b.normal((100,)))
        np.testing.assert_array_equal(a.uniform((50,)), b.uniform((50,)))
        np.testing.assert_array_equal(a.permutation(64), b.permutation(64))

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).normal((64,)), Rng(2).normal((64,)))

    def test_split_is_stable_and_independent(self):
        root = Rng(99)
        s1 = root.split("prompts").normal((32,))
        s2 = root.split("prompts").normal((32,))
        s3 = root.split("head").normal((32,))
        np.testing.assert_array_equal(s1, s2)
        assert not np.array_equal(s1, s3)
        assert root.counter == 0  # splitting consumes nothing

    def test_split_accepts_composite_tags(self):
        root = Rng(4)
        a = root.split(("block", 0)).next_u64()
        b = root.split(("block", 1)).next_u64()
        assert a != b

    def test_uniform_range_and_dtype(self):
        u = Rng(7).uniform((10_000,), -2.0, 5.0)
        assert u.dtype == np.float32
        assert u.min() >= -2.0 and u.max() < 5.0

    def test_normal_moments(self):
        z = Rng(21).normal((200_000,)).astype(np.float64)
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01

    def test_permutation_is_a_permutation(self):
        p = Rng(31).permutation(100)
        assert sorted(p.tolist()) == list(range(100))


class TestDeterminism:
    def test_bit_identical_forward_backward(self):
        """Same seed and same op sequence give bit-identical results."""

        def run():
            rng = Rng(42)
            x = _param(rng, (6, 8), "x")
            w = _param(rng, (8, 8), "w")
            with Tape() as tape:
                loss = reduce_sum(softmax_rows(matmul(x, w)))
                tape.backward(loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


class TestGradCheckHarness:
    def test_sum_of_squares_is_tight(self):
        """d/dx sum(x*x) = 2x; quadratic loss makes central FD near-exact."""
        x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
        report = grad_check(lambda: reduce_sum(mul(x, x)), {"x": x}, tol=1e-6)
        assert report.passed, str(report)
        assert report.max_rel_err < 1e-6

    def test_frozen_parameter_is_marked(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        w = Tensor([3.0, 4.0], requires_grad=False)
        report = grad_check(lambda: reduce_sum(mul(x, w)), {"x": x, "w": w})
        by_name = {c.name: c for c in report.checks}
        assert by_name["w"].frozen and not by_name["x"].frozen
        assert report.passed

    def test_step_outside_contract_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda: reduce_sum(x), {"x": x}, step=0.5)

    def test_sample_limit_checks_subset(self):
        x = Tensor(Rng(2).normal((40,)), requires_grad=True)
        report = grad_check(lambda: reduce_sum(mul(x, x)), {"x": x}, sample_limit=8)
        assert report.checks[0].checked == 8
        assert report.passed

    def test_report_is_printable(self):
        x = Tensor([1.0], requires_grad=True)
        report = grad_check(lambda: reduce_sum(mul(x, x)), {"x": x})
        assert isinstance(report, GradCheckReport)
        assert "PASS" in str(report)


class TestNumericHygiene:
    def test_math_isfinite_guard(self):
        """Saturated softmax stays finite even at extreme logits."""
        x = Tensor(np.array([[3e38, -3e38]], dtype=np.float32))
        out = softmax_rows(x)
        assert math.isfinite(float(out.data.sum()))

    def test_float32_is_the_working_dtype(self):
        x = Tensor([[1, 2], [3, 4]])
        assert x.data.dtype == np.float32
        assert matmul(x, x).data.dtype == np.float32
