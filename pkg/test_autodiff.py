"""
Gradient checks for the autodiff primitives and the tape itself.

Every analytic gradient is compared with central finite differences
(step 1e-5, float64) at relative error < 1e-4.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from core import autodiff as ad
from core.autodiff import Graph, NonFiniteError, ShapeError, numerical_gradient, relative_error

FD_TOL = 1e-4


def _fd_check(build, x: np.ndarray, tol: float = FD_TOL):
    """build(graph, node) -> scalar node; compares d/dx with finite differences"""
    def value(arr):
        graph = Graph()
        return build(graph, graph.param("x", arr)).item()

    graph = Graph()
    node = graph.param("x", x)
    analytic = graph.backward(build(graph, node))["x"]
    numeric = numerical_gradient(value, x)
    assert relative_error(analytic, numeric) < tol


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestElementwisePrimitives:

    def test_add_sub_mul(self, rng):
        c = rng.normal(size=(3, 4))
        _fd_check(lambda g, x: ad.sum((x + c) * (x - 2.0 * c) * x), rng.normal(size=(3, 4)))

    def test_broadcast_add(self, rng):
        bias = rng.normal(size=4)
        x = rng.normal(size=(3, 4))
        # bias is the differentiated input; x is fixed
        _fd_check(lambda g, b: ad.sum(ad.square(b + x)), bias)

    def test_square(self, rng):
        _fd_check(lambda g, x: ad.sum(ad.square(x)), rng.normal(size=5))

    def test_elu(self, rng):
        x = rng.normal(size=(4, 3))
        x[np.abs(x) < 1e-3] = 0.5
        _fd_check(lambda g, n: ad.sum(ad.square(ad.elu(n))), x)

    def test_relu_away_from_kink(self, rng):
        x = rng.normal(size=10)
        x[np.abs(x) < 1e-2] = 0.3
        _fd_check(lambda g, n: ad.sum(ad.square(ad.relu(n))), x)

    @pytest.mark.parametrize("op", [ad.sigmoid, ad.log_sigmoid, ad.tanh, ad.exp])
    def test_smooth_unary(self, rng, op):
        _fd_check(lambda g, n: ad.sum(op(n) * np.arange(6.0).reshape(2, 3)), rng.normal(size=(2, 3)))

    def test_log(self, rng):
        _fd_check(lambda g, n: ad.sum(ad.log(n)), rng.uniform(0.5, 2.0, size=6))

    def test_log_sigmoid_is_stable_for_large_inputs(self):
        graph = Graph()
        out = ad.log_sigmoid(graph.constant(np.array([-800.0, 0.0, 800.0])))
        np.testing.assert_allclose(out.value, [-800.0, np.log(0.5), 0.0], atol=1e-12)


class TestReductionsAndShapes:

    def test_sum_axis(self, rng):
        w = rng.normal(size=4)
        _fd_check(lambda g, x: ad.sum(ad.sum(x, axis=0) * w), rng.normal(size=(3, 4)))

    def test_mean(self, rng):
        _fd_check(lambda g, x: ad.mean(ad.square(x)), rng.normal(size=(3, 4)))
        _fd_check(lambda g, x: ad.sum(ad.square(ad.mean(x, axis=1))), rng.normal(size=(3, 4)))

    def test_reshape_transpose(self, rng):
        w = rng.normal(size=(4, 3, 2))
        _fd_check(lambda g, x: ad.sum(ad.transpose(ad.reshape(x, (2, 3, 4)), (2, 1, 0)) * w),
                  rng.normal(size=(6, 4)))

    def test_stack(self, rng):
        w = rng.normal(size=(3, 2, 4))
        _fd_check(lambda g, x: ad.sum(ad.stack([x, ad.square(x)], axis=1) * w),
                  rng.normal(size=(3, 4)))

    def test_matmul_both_sides(self, rng):
        b = rng.normal(size=(4, 2))
        a = rng.normal(size=(5, 3, 4))
        _fd_check(lambda g, x: ad.sum(ad.square(x @ b)), a)
        _fd_check(lambda g, x: ad.sum(ad.square(g.constant(a) @ x)), b)

    def test_matmul_rejects_mismatched_shapes(self):
        graph = Graph()
        with pytest.raises(ShapeError):
            graph.constant(np.ones((2, 3))) @ graph.constant(np.ones((4, 2)))

    def test_backward_requires_scalar(self):
        graph = Graph()
        x = graph.param("x", np.ones(3))
        with pytest.raises(ShapeError):
            graph.backward(x * 2.0)


class TestDistributions:

    @pytest.mark.parametrize("temperature", [0.5, 1.0, 2.0])
    def test_softmax(self, rng, temperature):
        w = rng.normal(size=(2, 5))
        _fd_check(lambda g, x: ad.sum(ad.softmax_with_temperature(x, temperature) * w),
                  rng.normal(size=(2, 5)))

    @pytest.mark.parametrize("temperature", [0.5, 1.0, 2.0])
    def test_log_softmax(self, rng, temperature):
        w = rng.normal(size=(2, 5))
        _fd_check(lambda g, x: ad.sum(ad.log_softmax_with_temperature(x, temperature) * w),
                  rng.normal(size=(2, 5)))

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_softmax_sums_to_one(self, logits):
        graph = Graph()
        probs = ad.softmax_with_temperature(graph.constant(np.array(logits)), 0.7)
        assert abs(probs.value.sum() - 1.0) < 1e-12
        assert np.all(probs.value >= 0.0)

    def test_one_hot_gather(self, rng):
        ids = np.array([[0, 3], [2, 2]])
        _fd_check(lambda g, x: ad.sum(ad.square(ad.one_hot_gather(x, ids))), rng.normal(size=(2, 2, 4)))

    def test_take_rows_accumulates_repeats(self, rng):
        ids = np.array([[1, 1, 0], [2, 1, 0]])
        _fd_check(lambda g, x: ad.sum(ad.square(ad.take_rows(x, ids))), rng.normal(size=(3, 2)))


class TestSequenceLayers:

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_conv1d_same(self, rng, k):
        w = rng.normal(size=(3, 2, k))
        x = rng.normal(size=(2, 5, 2))
        out_w = rng.normal(size=(2, 5, 3))
        _fd_check(lambda g, n: ad.sum(ad.conv1d_same(n, g.constant(w)) * out_w), x)
        _fd_check(lambda g, n: ad.sum(ad.conv1d_same(g.constant(x), n) * out_w), w)

    def test_same_padding_even_kernel_pads_left_less(self):
        assert ad.same_padding(4) == (1, 2)
        assert ad.same_padding(3) == (1, 1)
        assert ad.same_padding(1) == (0, 0)

    def test_conv1d_keeps_length(self, rng):
        graph = Graph()
        out = ad.conv1d_same(graph.constant(rng.normal(size=(2, 7, 3))),
                             graph.constant(rng.normal(size=(5, 3, 4))))
        assert out.shape == (2, 7, 5)

    def test_mean_pool(self, rng):
        lengths = np.array([5, 2])
        w = rng.normal(size=(2, 3, 4))
        _fd_check(lambda g, x: ad.sum(ad.mean_pool(x, lengths) * w), rng.normal(size=(2, 5, 4)))

    def test_mean_pool_ignores_padding(self):
        graph = Graph()
        x = np.arange(10.0).reshape(1, 5, 2)
        out = ad.mean_pool(graph.constant(x), np.array([3]))
        np.testing.assert_allclose(out.value[0], [[1.0, 2.0], [4.0, 5.0], [0.0, 0.0]])
        np.testing.assert_array_equal(ad.pooled_lengths([3, 4, 1]), [2, 2, 1])

    def test_global_mean_pool(self, rng):
        lengths = np.array([4, 1, 2])
        w = rng.normal(size=(3, 2))
        _fd_check(lambda g, x: ad.sum(ad.global_mean_pool(x, lengths) * w), rng.normal(size=(3, 4, 2)))

    def test_gru_cell(self, rng):
        d_in, d_h = 3, 4
        weights = {name: rng.normal(scale=0.5, size=shape) for name, shape in [
            ("w_z", (d_in, d_h)), ("w_r", (d_in, d_h)), ("w_h", (d_in, d_h)),
            ("u_z", (d_h, d_h)), ("u_r", (d_h, d_h)), ("u_h", (d_h, d_h)),
            ("b_z", (d_h,)), ("b_r", (d_h,)), ("b_h", (d_h,))]}
        h0 = rng.normal(size=(2, d_h))

        def build(g, x):
            w = {k: g.constant(v) for k, v in weights.items()}
            return ad.sum(ad.square(ad.gru_cell(x, g.constant(h0), w)))

        _fd_check(build, rng.normal(size=(2, d_in)))

        x0 = rng.normal(size=(2, d_in))

        def build_u(g, u_h):
            w = {k: g.constant(v) for k, v in weights.items()}
            w["u_h"] = u_h
            return ad.sum(ad.gru_cell(g.constant(x0), g.constant(h0), w))

        _fd_check(build_u, weights["u_h"])


class TestGraph:

    def test_unreached_parameters_get_zero_gradients(self):
        graph = Graph()
        x = graph.param("x", np.ones(3))
        graph.param("unused", np.ones((2, 2)))
        grads = graph.backward(ad.sum(ad.square(x)))
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))
        np.testing.assert_array_equal(grads["x"], 2.0 * np.ones(3))

    def test_param_registration_is_idempotent(self):
        graph = Graph()
        a = graph.param("w", np.ones(2))
        b = graph.param("w", np.ones(2))
        assert a.id == b.id

    def test_stop_gradient_blocks_flow(self):
        graph = Graph()
        x = graph.param("x", np.array([1.0, 2.0]))
        grads = graph.backward(ad.sum(ad.stop_gradient(ad.square(x)) * x))
        np.testing.assert_allclose(grads["x"], [1.0, 4.0])

    def test_constants_are_not_parents_of_params(self):
        graph = Graph()
        x = graph.param("x", np.ones(2))
        adv = graph.constant(np.array([3.0, 4.0]))
        out = ad.sum(adv * x)
        assert x.id in graph.parents_of(out)
        assert x.id not in graph.parents_of(adv)

    def test_taps_return_intermediate_adjoints(self):
        graph = Graph()
        x = graph.param("x", np.array([1.0, -2.0]))
        y = ad.square(x)
        grads = graph.backward(ad.sum(y * 3.0), taps=[y])
        np.testing.assert_allclose(grads[y], [3.0, 3.0])

    def test_forward_replay_with_overrides(self):
        graph = Graph()
        x = graph.param("x", np.array([1.0, 2.0]))
        out = ad.sum(ad.square(x))
        values = graph.forward({x: np.array([3.0, 0.0])})
        assert values[out.id] == pytest.approx(9.0)
        assert out.item() == pytest.approx(5.0)

    def test_non_finite_forward_raises(self):
        graph = Graph()
        with pytest.raises(NonFiniteError):
            ad.log(graph.constant(np.array([0.0, 1.0])))

    def test_numpy_left_operand_defers_to_node(self):
        graph = Graph()
        x = graph.param("x", np.array([1.0, 2.0]))
        out = np.array([2.0, 3.0]) * x
        assert isinstance(out, ad.Node)
        np.testing.assert_allclose(graph.backward(ad.sum(out))["x"], [2.0, 3.0])
