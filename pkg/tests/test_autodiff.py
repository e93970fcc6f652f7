"""Gradient checks for every differentiation primitive.

Central finite differences are the independent oracle throughout: each
primitive's analytic adjoint must agree with the numerical derivative of
its own forward pass.
"""

import numpy as np
import pytest

from padkit import autodiff as ad


def _fd(build, params, h=1e-5):
    return ad.finite_diff_check(build, params, h=h)


class TestPrimitiveAdjoints:
    """Every primitive passes a finite-difference check on random inputs."""

    rng = np.random.default_rng(42)

    def test_add_sub_mul_div_broadcast(self):
        a = self.rng.normal(size=(4, 3))
        b = self.rng.normal(size=(1, 3))
        c = self.rng.normal(size=(4, 1)) + 2.0  # keep divisor away from zero

        def build(ps):
            x = ad.add(ps[0], ps[1])
            x = ad.mul(x, ps[2])
            x = ad.sub(x, ps[0])
            x = ad.div(x, ps[2])
            return ad.mean_all(x)

        assert _fd(build, [a, b, c]) < 1e-8

    def test_matmul_transpose_concat(self):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.normal(size=(4, 2))

        def build(ps):
            x = ad.matmul(ps[0], ps[1])
            y = ad.matmul(ps[0], ps[1])
            z = ad.concat([x, y], axis=1)
            return ad.mean_all(ad.matmul(ad.transpose(z), z))

        assert _fd(build, [a, b]) < 1e-7

    def test_scale_rowsum_sums(self):
        a = self.rng.normal(size=(5, 3))

        def build(ps):
            return ad.sum_all(ad.scale(ad.rowsum(ps[0]), 0.25))

        assert _fd(build, [a]) < 1e-9

    def test_sigmoid_exp_log_sqrt(self):
        a = self.rng.uniform(0.5, 2.0, size=(4, 3))

        def build(ps):
            x = ad.sigmoid(ps[0])
            x = ad.add(x, ad.exp(ad.scale(ps[0], -0.5)))
            x = ad.mul(x, ad.log(ps[0]))
            x = ad.add(x, ad.sqrt(ps[0]))
            return ad.mean_all(x)

        assert _fd(build, [a]) < 1e-7

    def test_clamp_passthrough_and_block(self):
        a = np.array([[-2.0, -0.5, 0.5, 2.0]])

        def build(ps):
            return ad.sum_all(ad.clamp(ps[0], -1.0, 1.0))

        assert _fd(build, [a]) < 1e-9
        t = ad.parameter(a)
        out = ad.sum_all(ad.clamp(t, -1.0, 1.0))
        ad.backward(out)
        np.testing.assert_array_equal(t.grad, [[0.0, 1.0, 1.0, 0.0]])

    def test_row_softmax(self):
        a = self.rng.normal(size=(4, 5))

        def build(ps):
            s = ad.row_softmax(ps[0])
            return ad.mean_all(ad.mul(s, s))

        assert _fd(build, [a]) < 1e-7

    def test_layer_norm(self):
        x = self.rng.normal(size=(4, 6))
        gamma = self.rng.normal(size=(1, 6)) + 1.0
        beta = self.rng.normal(size=(1, 6))

        def build(ps):
            return ad.mean_all(ad.mul(ad.layer_norm(ps[0], ps[1], ps[2]), ps[0]))

        assert _fd(build, [x, gamma, beta]) < 1e-7

    def test_masked_fill_blocks_gradient(self):
        a = self.rng.normal(size=(3, 3))
        mask = np.eye(3, dtype=bool)

        def build(ps):
            return ad.sum_all(ad.masked_fill(ps[0], mask, -5.0))

        assert _fd(build, [a]) < 1e-9
        t = ad.parameter(a)
        ad.backward(ad.sum_all(ad.masked_fill(t, mask, -5.0)))
        assert (t.grad[mask] == 0.0).all()
        assert (t.grad[~mask] == 1.0).all()


class TestKnownValues:
    def test_softmax_single_element_row(self):
        """One-element rows softmax to exactly 1 with zero gradient."""
        t = ad.parameter(np.array([[3.7]]))
        s = ad.row_softmax(t)
        np.testing.assert_array_equal(s.value, [[1.0]])
        ad.backward(ad.sum_all(s))
        np.testing.assert_allclose(t.grad, [[0.0]], atol=1e-15)

    def test_layer_norm_constant_row_is_beta(self):
        """A constant row normalizes to zero, so the output is beta."""
        x = ad.constant(np.full((2, 5), 3.0))
        gamma = ad.constant(np.ones((1, 5)))
        beta = ad.constant(np.zeros((1, 5)))
        out = ad.layer_norm(x, gamma, beta)
        np.testing.assert_allclose(out.value, 0.0, atol=1e-12)

    def test_linear_function_gradient_near_exact(self):
        """FD on a linear map agrees with the adjoint to 1e-10."""
        rng = np.random.default_rng(7)
        A = rng.normal(size=(4, 4))
        w = rng.normal(size=(4, 1))

        def build(ps):
            return ad.sum_all(ad.matmul(ad.constant(A), ad.mul(ps[0], ad.constant(w))))

        assert _fd(build, [rng.normal(size=(4, 1))]) < 1e-10

    def test_sigmoid_of_matmul(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))

        def build(ps):
            return ad.mean_all(ad.sigmoid(ad.matmul(ps[0], ps[1])))

        assert _fd(build, [x, w]) < 1e-6

    def test_random_composed_graph(self):
        """A five-op composite graph passes FD below 1e-6 at h=1e-5."""
        rng = np.random.default_rng(123)
        a = rng.normal(size=(3, 3))
        b = rng.normal(size=(3, 3))

        def build(ps):
            x = ad.matmul(ps[0], ps[1])
            x = ad.sigmoid(x)
            x = ad.mul(x, ps[0])
            x = ad.row_softmax(x)
            return ad.mean_all(x)

        assert _fd(build, [a, b], h=1e-5) < 1e-6

    def test_corrupted_adjoint_detected(self):
        """Negative control: a deliberately wrong adjoint blows past 1e-2."""

        def bad_sigmoid(a):
            v = 1.0 / (1.0 + np.exp(-a.value))
            return ad._op("bad_sigmoid", v, (a,), lambda g: (g * v * (1.0 - v) * 1.5,))

        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 3))

        def build(ps):
            return ad.scale(ad.sum_all(bad_sigmoid(ps[0])), 10.0)

        assert _fd(build, [x]) > 1e-2

    def test_backward_recomputes_not_accumulates(self):
        t = ad.parameter(np.array([[1.0, 2.0]]))
        loss = ad.sum_all(ad.mul(t, t))
        ad.backward(loss)
        first = t.grad.copy()
        ad.backward(loss)
        np.testing.assert_array_equal(t.grad, first)


class TestErrors:
    def test_matmul_shape_error_names_both_shapes(self):
        a = ad.constant(np.zeros((2, 3)))
        b = ad.constant(np.zeros((4, 2)))
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            ad.matmul(a, b)

    def test_four_axis_tensor_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.constant(np.zeros((2, 2, 2, 2)))

    def test_non_finite_forward_names_node(self):
        t = ad.constant(np.array([[-1.0]]))
        with pytest.raises(ad.NonFiniteError, match="log"):
            ad.log(t)

    def test_backward_requires_scalar_root(self):
        t = ad.parameter(np.ones((2, 2)))
        with pytest.raises(ad.ShapeError):
            ad.backward(ad.mul(t, t))
