#!/usr/bin/env python3
"""
Tensor core tests: arithmetic, broadcasting, backward pass, gradient checks
and the RAVTNSR1 format.
"""

import numpy as np
import pytest

from tensor_core import (DomainError, Graph, GradientError, GraphError, NonFiniteError, ShapeError, Tensor,
                         TensorFormatError, backward, finite_diff_check, load_tensor, log_sum_exp, matmul, prelu,
                         save_tensor, take, tensor_from_bytes, tensor_to_bytes)

TOLERANCE = 1e-6
SHAPES = [(1,), (1, 1), (5,), (4, 3)]

BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
}

UNARY = {
    "exp": lambda a: a.exp(),
    "log": lambda a: a.log(),
    "sqrt": lambda a: a.sqrt(),
    "square": lambda a: a.square(),
    "sigmoid": lambda a: a.sigmoid(),
    "softplus": lambda a: a.softplus(),
    "prelu": lambda a: prelu(a, Tensor(0.3)),
}
POSITIVE_ONLY = {"log", "sqrt"}


def away_from_zero(rng, shape, positive=False):
    """Values with 0.3 <= |v| <= 1.5, so kinks and poles stay out of the difference stencil"""
    magnitude = rng.uniform(0.3, 1.5, shape)
    return magnitude if positive else magnitude * rng.choice([-1.0, 1.0], shape)


def partner_shapes(shape):
    partners = [shape, (1,), ()]
    if len(shape) == 2:
        partners.append(shape[1:])
    return partners


def random_shape(rng):
    return tuple(int(n) for n in rng.integers(1, 5, size=int(rng.integers(1, 3))))


def weighted_sum(out, w):
    return (out * Tensor(w)).sum()


class TestForward:
    def test_constants_stay_untracked(self):
        out = (Tensor([1.0, 2.0]) * 3.0 + 1.0).exp()
        assert not out.tracked
        np.testing.assert_allclose(out.numpy(), np.exp([4.0, 7.0]))

    def test_batch_broadcast_over_leading_axis(self):
        a = Tensor(np.arange(6.0).reshape(3, 2))
        out = a + Tensor([10.0, 20.0])
        np.testing.assert_allclose(out.numpy(), np.arange(6.0).reshape(3, 2) + [10.0, 20.0])

    def test_nonconforming_shapes_raise(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((3, 2))) + Tensor(np.ones(3))

    def test_matmul_inner_dimension_checked(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_log_of_zero_is_domain_error(self):
        with pytest.raises(DomainError):
            Tensor([1.0, 0.0]).log()

    def test_division_by_zero_is_domain_error(self):
        with pytest.raises(DomainError):
            Tensor([1.0]) / Tensor([0.0])

    def test_overflow_is_reported(self):
        with pytest.raises(NonFiniteError):
            Tensor([1000.0]).exp()

    def test_softplus_is_stable_for_large_inputs(self):
        out = Tensor([-800.0, 0.0, 800.0]).softplus().numpy()
        np.testing.assert_allclose(out, [0.0, np.log(2.0), 800.0])

    def test_log_sum_exp_matches_numpy(self):
        terms = [Tensor([1.0, -500.0]), Tensor([2.0, -501.0]), Tensor([0.5, -499.0])]
        expected = np.logaddexp.reduce(np.stack([t.data for t in terms]), axis=0)
        np.testing.assert_allclose(log_sum_exp(terms).numpy(), expected)

    def test_prelu_uses_slope_on_negative_side(self):
        out = prelu(Tensor([-2.0, 3.0]), Tensor(0.25)).numpy()
        np.testing.assert_allclose(out, [-0.5, 3.0])

    def test_single_element_operands_keep_the_higher_rank(self):
        column = Tensor(np.full((1, 1), 2.0))
        assert (column + Tensor([3.0])).shape == (1, 1)
        assert (Tensor([3.0]) * column).shape == (1, 1)
        assert (Tensor(3.0) - Tensor([1.0])).shape == (1,)
        assert (column / Tensor(4.0)).shape == (1, 1)
        np.testing.assert_allclose((column + Tensor([3.0])).numpy(), [[5.0]])

    def test_batch_of_one_keeps_its_batch_axis(self):
        h = Tensor(np.array([[0.5, -1.0, 2.0]]))
        out = h @ Tensor(np.ones((3, 1))) + Tensor([0.25])
        assert out.shape == (1, 1)
        assert out.sum(axis=1).shape == (1,)

    def test_axis_sum_of_a_rank_zero_tensor(self):
        with pytest.raises(ShapeError):
            Tensor(2.0).sum(axis=0)
        assert Tensor(2.0).sum().item() == 2.0


class TestBackward:
    def test_square_sum_gradient(self):
        graph = Graph()
        x = graph.leaf([1.0, -2.0, 3.0])
        grads = backward((x * x).sum())
        np.testing.assert_allclose(grads.of(x), [2.0, -4.0, 6.0])

    def test_broadcast_gradient_is_reduced(self):
        graph = Graph()
        a = graph.leaf(np.ones((4, 3)))
        b = graph.leaf([1.0, 2.0, 3.0])
        grads = backward((a * b).sum())
        np.testing.assert_allclose(grads.of(b), [4.0, 4.0, 4.0])
        np.testing.assert_allclose(grads.of(a), np.tile([1.0, 2.0, 3.0], (4, 1)))

    def test_unreached_leaf_gets_zeros(self):
        graph = Graph()
        x = graph.leaf([1.0, 2.0])
        unused = graph.leaf(np.ones((2, 2)))
        grads = backward(x.sum())
        np.testing.assert_array_equal(grads.of(unused), np.zeros((2, 2)))

    def test_constant_root_raises(self):
        with pytest.raises(GradientError):
            backward(Tensor(3.0))

    def test_non_scalar_root_raises(self):
        graph = Graph()
        x = graph.leaf([1.0, 2.0])
        with pytest.raises(GradientError):
            backward(x * 2.0)

    def test_mixing_graphs_raises(self):
        a = Graph().leaf([1.0])
        b = Graph().leaf([2.0])
        with pytest.raises(GraphError):
            a + b

    def test_take_routes_gradient_to_row(self):
        graph = Graph()
        x = graph.leaf(np.arange(6.0).reshape(3, 2))
        grads = backward(x[1].square().sum())
        np.testing.assert_allclose(grads.of(x), [[0.0, 0.0], [4.0, 6.0], [0.0, 0.0]])

    def test_single_element_bias_gradient_keeps_its_shape(self):
        graph = Graph()
        h = graph.leaf(np.array([[0.5, -1.0]]))
        bias = graph.leaf([0.1])
        grads = backward((h @ Tensor(np.ones((2, 1))) + bias).square().sum())
        assert grads.of(bias).shape == (1,)
        np.testing.assert_allclose(grads.of(bias), [2.0 * (-0.5 + 0.1)])

    def test_backward_twice_gives_identical_gradients(self, rng):
        graph = Graph()
        x = graph.leaf(rng.standard_normal((4, 3)))
        w = graph.leaf(rng.standard_normal((3, 2)))
        out = log_sum_exp([(x @ w).sigmoid(), (x @ w).softplus()]).sum() + (x * x).mean()
        recorded = len(graph)
        first, second = backward(out), backward(out)
        np.testing.assert_array_equal(first.of(x), second.of(x))
        np.testing.assert_array_equal(first.of(w), second.of(w))
        assert len(graph) == recorded


class TestFiniteDifferences:
    def test_smooth_composite(self, rng):
        w = rng.standard_normal((4, 3))

        def f(x):
            return ((x @ Tensor(w)).sigmoid() + (x * 0.5).softplus().sum()).log().sum()

        assert finite_diff_check(f, rng.standard_normal((2, 4))) < 1e-6

    def test_prelu_slope_gradient(self):
        x = Tensor([-1.5, 0.7, -0.3])
        assert finite_diff_check(lambda a: prelu(x, a).square().sum(), Tensor(0.2)) < 1e-6

    def test_constant_function_has_zero_gradient(self):
        assert finite_diff_check(lambda x: Tensor(2.0), np.ones(3)) == 0.0

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda x: x.sum(), np.ones(2), h=0.0)


class TestPrimitiveGradients:
    @pytest.mark.parametrize("shape", SHAPES)
    @pytest.mark.parametrize("name", sorted(BINARY))
    def test_binary(self, rng, name, shape):
        op = BINARY[name]
        for partner in partner_shapes(shape):
            x, c = away_from_zero(rng, shape), away_from_zero(rng, partner)
            w = rng.standard_normal(np.broadcast_shapes(shape, partner))
            assert finite_diff_check(lambda a: weighted_sum(op(a, Tensor(c)), w), x) < TOLERANCE, partner
            assert finite_diff_check(lambda b: weighted_sum(op(Tensor(x), b), w), c) < TOLERANCE, partner

    @pytest.mark.parametrize("shape", SHAPES)
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary(self, rng, name, shape):
        x = away_from_zero(rng, shape, positive=name in POSITIVE_ONLY)
        w = rng.standard_normal(shape)
        assert finite_diff_check(lambda a: weighted_sum(UNARY[name](a), w), x) < TOLERANCE

    @pytest.mark.parametrize("left,right", [
        ((3, 4), (4, 2)),
        ((4,), (4, 2)),
        ((3, 4), (4,)),
        ((4,), (4,)),
        ((1, 1), (1, 1)),
        ((1,), (1, 1)),
    ])
    def test_matmul(self, rng, left, right):
        a, b = rng.standard_normal(left), rng.standard_normal(right)
        w = rng.standard_normal(np.shape(a @ b))
        assert finite_diff_check(lambda t: weighted_sum(t @ Tensor(b), w), a) < TOLERANCE
        assert finite_diff_check(lambda t: weighted_sum(Tensor(a) @ t, w), b) < TOLERANCE

    @pytest.mark.parametrize("reduce", ["sum", "mean"])
    @pytest.mark.parametrize("shape,axis", [((4, 3), 0), ((4, 3), 1), ((4, 3), -1), ((1, 1), 0), ((5,), 0)])
    def test_axis_reductions(self, rng, reduce, shape, axis):
        x = rng.standard_normal(shape)
        w = rng.standard_normal(np.sum(x, axis=axis).shape)
        assert finite_diff_check(lambda a: weighted_sum(getattr(a, reduce)(axis), w), x) < TOLERANCE

    @pytest.mark.parametrize("shape", [(4, 3), (1, 1), (5,)])
    def test_take(self, rng, shape):
        x = rng.standard_normal(shape)
        index = int(rng.integers(0, shape[0]))
        w = rng.standard_normal(x[index].shape)
        assert finite_diff_check(lambda a: weighted_sum(take(a, index), w), x) < TOLERANCE

    @pytest.mark.parametrize("width", [1, 4])
    def test_log_sum_exp(self, rng, width):
        x = rng.standard_normal((3, width)) * 3.0
        w = rng.standard_normal(width)
        assert finite_diff_check(lambda a: weighted_sum(log_sum_exp([a[0], a[1], a[2]]), w), x) < TOLERANCE
        assert finite_diff_check(lambda a: log_sum_exp([a, a * 2.0, a.square()]).sum(), x[0]) < TOLERANCE

    @pytest.mark.parametrize("seed", range(5))
    def test_random_shapes(self, seed):
        rng = np.random.default_rng(seed)
        shape = random_shape(rng)
        x = away_from_zero(rng, shape, positive=True)
        w = rng.standard_normal(shape)
        for name, op in UNARY.items():
            assert finite_diff_check(lambda a: weighted_sum(op(a), w), x) < TOLERANCE, (name, shape)
        for name, op in BINARY.items():
            for partner in partner_shapes(shape):
                c = away_from_zero(rng, partner, positive=True)
                out_w = rng.standard_normal(np.broadcast_shapes(shape, partner))
                assert finite_diff_check(lambda a: weighted_sum(op(a, Tensor(c)), out_w), x) < TOLERANCE, (
                    name, shape, partner)


class TestDeterminism:
    def test_repeated_forward_is_bit_identical(self, rng):
        x = rng.standard_normal((6, 4))
        w = rng.standard_normal((4, 3))

        def forward(values):
            h = prelu(Tensor(values) @ Tensor(w) + Tensor([0.1, -0.2, 0.3]), Tensor(0.25))
            return log_sum_exp([h.sigmoid(), h.softplus(), h.square()]).mean(axis=1).numpy()

        np.testing.assert_array_equal(forward(x), forward(x.copy()))

    def test_repeated_gradient_is_bit_identical(self, rng):
        x = rng.standard_normal((3, 4))

        def gradient(values):
            graph = Graph()
            leaf = graph.leaf(values)
            return backward((leaf.exp() / (leaf.square() + 1.0)).sum()).of(leaf)

        np.testing.assert_array_equal(gradient(x), gradient(x.copy()))


class TestTensorFormat:
    def test_file_round_trip_is_exact(self, tmp_path, rng):
        value = rng.standard_normal((3, 5))
        path = save_tensor(tmp_path / "w.rvt", value)
        np.testing.assert_array_equal(load_tensor(path).numpy(), value)

    def test_scalar_round_trip(self):
        assert tensor_from_bytes(tensor_to_bytes(Tensor(2.5))).item() == 2.5

    def test_bad_magic(self):
        with pytest.raises(TensorFormatError):
            tensor_from_bytes(b"NOTATNSR" + bytes(16))

    def test_truncated_payload(self):
        blob = tensor_to_bytes(Tensor(np.ones(4)))
        with pytest.raises(TensorFormatError):
            tensor_from_bytes(blob[:-8])
