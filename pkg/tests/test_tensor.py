import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from crossdim import tensor as T
from crossdim.gradcheck import max_gradient_error, numerical_gradients, relative_error
from crossdim.tensor import ShapeError, Tape, Tensor, backward, no_grad

import gradsuite

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)

    def test_orthogonal_rows(self):
        out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_gradient_of_sum(self):
        rng = np.random.default_rng(3)
        err = max_gradient_error(lambda a, b: T.sum(T.matmul(a, b)), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])
        assert err < 1e-6

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))

    def test_batched_leading_dims_must_match(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 4, 5))))


class TestSoftmax:
    def test_symmetric_input(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3)

    def test_large_logit_stays_finite(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=5)
        err = max_gradient_error(lambda x: T.sum(T.mul(T.softmax(x), Tensor(w))), [rng.normal(size=5)])
        assert err < 1e-6

    @given(hnp.arrays(np.float64, st.integers(1, 8), elements=finite))
    def test_rows_sum_to_one(self, x):
        assert math.isclose(T.softmax(Tensor(x)).data.sum(), 1.0, rel_tol=1e-12)

    @given(hnp.arrays(np.float64, st.integers(1, 8), elements=finite))
    def test_log_softmax_agrees(self, x):
        np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(x)).data), T.softmax(Tensor(x)).data, rtol=1e-10, atol=1e-300)


class TestLayerNorm:
    def _ln(self, x):
        d = len(x)
        return T.layernorm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data

    def test_constant_row_collapses_to_bias(self):
        np.testing.assert_array_equal(self._ln([2.5, 2.5, 2.5]), [0.0, 0.0, 0.0])

    def test_two_point(self):
        np.testing.assert_allclose(self._ln([1.0, -1.0]), [1.0, -1.0], atol=1e-5)

    def test_gradient(self):
        for seed in range(3):
            fn, arrays = gradsuite._layernorm(np.random.default_rng(seed))
            assert max_gradient_error(fn, arrays) < 1e-6

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            T.layernorm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestElementwise:
    def test_add_zero_identity(self):
        x = np.array([1.0, -2.0, 3.5])
        np.testing.assert_array_equal(T.add(Tensor(x), 0).data, x)

    def test_gelu_zero(self):
        assert T.gelu(Tensor(0.0)).item() == 0.0

    def test_gelu_matches_tanh_formula(self):
        x = np.linspace(-4, 4, 17)
        ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-12)

    def test_strict_broadcasting(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))

    def test_trailing_suffix_required(self):
        with pytest.raises(ShapeError):
            T.add_trailing(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))

    def test_scalar_tensor_broadcasts(self):
        out = T.mul(Tensor(np.ones((2, 2))), Tensor(3.0))
        np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


class TestReductions:
    def test_mean(self):
        assert T.mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0

    def test_sum_over_empty_extent(self):
        with pytest.raises(ShapeError):
            T.sum(Tensor(np.zeros((0, 3))), axis=0)

    def test_mean_over_empty_extent(self):
        with pytest.raises(ShapeError):
            T.mean(Tensor(np.zeros((2, 0))))

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            T.sum(Tensor(np.zeros(3)), axis=1)

    def test_zero_norm_row_rejected(self):
        with pytest.raises(ValueError):
            T.l2_normalize(Tensor(np.zeros((2, 3))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(T.sum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_shared_node_accumulates(self):
        x = Tensor(3.0, requires_grad=True)
        y = T.mul(x, x)
        backward(T.add(y, y))
        assert x.grad == 12.0

    def test_grads_accumulate_across_calls(self):
        x = Tensor([1.0], requires_grad=True)
        backward(T.sum(x))
        backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, [2.0])
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            backward(T.scale(x, 2.0))

    def test_disconnected_loss(self):
        with pytest.raises(ValueError):
            backward(T.sum(Tensor([1.0, 2.0])))

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = T.exp(x)
        assert not y.requires_grad and y.is_leaf

    def test_tape_is_topological(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        a = T.exp(x)
        b = T.mul(a, x)
        loss = T.sum(T.add(a, b))
        tape = Tape.record(loss)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for p in node._parents:
                assert pos[id(p)] < pos[id(node)]
        assert tape.nodes[-1] is loss

    def test_detached_branch_gets_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(T.sum(T.mul(x, Tensor(x.detach().data))))
        np.testing.assert_array_equal(x.grad, [1.0, 2.0])

    def test_deep_chain_has_no_recursion_limit(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = T.scale(y, 1.0)
        backward(y)
        assert x.grad == 1.0


class TestGradcheckHelpers:
    def test_relative_error_of_zero_vectors(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0

    def test_numerical_gradient_of_quadratic(self):
        (g,) = numerical_gradients(lambda x: T.sum(T.mul(x, x)), [np.array([1.0, -3.0])])
        np.testing.assert_allclose(g, [2.0, -6.0], atol=1e-8)


@pytest.mark.parametrize("case", gradsuite.CASES, ids=lambda c: c.name)
def test_gradient_suite(case):
    worst = max(gradsuite.case_error(case, seed) for seed in gradsuite.SEEDS)
    assert worst < gradsuite.TOLERANCE


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_forward_outputs_finite(x):
    for out in (T.gelu(Tensor(x)), T.softmax(Tensor(x)), T.exp(Tensor(np.clip(x, -5, 5)))):
        assert np.all(np.isfinite(out.data))
