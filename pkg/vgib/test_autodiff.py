"""
Tests for the reverse-mode differentiation core.
Covers primitive values, backward rules, gradient checking and the seeded Rng.
"""

import math

import numpy as np
import pytest

from vgib.exceptions import DomainError, ShapeError
from vgib.utils import autodiff as ad
from vgib.utils.autodiff import Rng


def _random_input(rng: Rng, shape, positive=False):
    values = rng.normal(shape)
    return np.abs(values) + 0.5 if positive else values


# Each entry: (name, build a scalar from one parameter, input shape, positive inputs only)
PRIMITIVES = [
    ("add", lambda x: ad.sum(x + np.arange(6.0).reshape(2, 3)), (2, 3), False),
    ("sub", lambda x: ad.sum(2.0 - x * x), (2, 3), False),
    ("mul", lambda x: ad.sum(x * np.linspace(-1, 1, 6).reshape(2, 3)), (2, 3), False),
    ("div", lambda x: ad.sum(1.0 / x), (2, 3), True),
    ("matmul", lambda x: ad.sum(ad.square(ad.matmul(x, np.ones((3, 2)) * 0.3))), (2, 3), False),
    ("sigmoid", lambda x: ad.sum(ad.sigmoid(x)), (2, 3), False),
    ("relu", lambda x: ad.sum(ad.relu(x) * x), (2, 3), False),
    ("exp", lambda x: ad.sum(ad.exp(x)), (2, 3), False),
    ("log", lambda x: ad.sum(ad.log(x)), (2, 3), True),
    ("square", lambda x: ad.sum(ad.square(x)), (2, 3), False),
    ("sum_axis", lambda x: ad.sum(ad.square(ad.sum(x, axis=1))), (2, 3), False),
    ("mean_axis", lambda x: ad.sum(ad.square(ad.mean(x, axis=0, keepdims=True))), (2, 3), False),
    ("concat", lambda x: ad.sum(ad.square(ad.concat([x, 2.0 * x], axis=1))), (2, 3), False),
    ("take_rows", lambda x: ad.sum(ad.square(ad.take_rows(x, [1, 1, 0]))), (2, 3), False),
    ("log_softmax", lambda x: ad.sum(ad.log_softmax(x, axis=1) * np.array([[1.0, 0, 0], [0, 0, 1.0]])), (2, 3), False),
]


class TestForward:
    """Test primitive values."""

    def test_sigmoid_of_zero(self):
        """Test sigmoid(0) is one half."""
        assert ad.sigmoid(0.0).item() == 0.5

    def test_matmul_identity(self):
        """Test multiplying by the identity returns the input."""
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, np.eye(2)).value, a)

    def test_log_softmax_uniform(self):
        """Test log-softmax of equal logits is -ln 2 per entry."""
        out = ad.log_softmax(np.array([[0.0, 0.0]]), axis=1).value
        np.testing.assert_allclose(out, [[-math.log(2.0), -math.log(2.0)]], atol=1e-15)

    def test_shape_mismatch_names_both_shapes(self):
        """Test incompatible operands are rejected with both shapes in the message."""
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
            ad.add(np.zeros((2, 3)), np.zeros(4))

    def test_matmul_misaligned(self):
        """Test matmul rejects inner dimension mismatch."""
        with pytest.raises(ShapeError, match="not aligned"):
            ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_log_of_non_positive_rejected(self):
        """Test log refuses zero or negative inputs."""
        with pytest.raises(DomainError):
            ad.log(np.array([1.0, 0.0]))

    def test_clamp_min_floors_values(self):
        """Test clamp_min floors entries and passes no gradient to them."""
        x = ad.parameter([0.5, -1.0], "x")
        y = ad.clamp_min(x, 0.0)
        np.testing.assert_array_equal(y.value, [0.5, 0.0])
        ad.backward(ad.sum(y))
        np.testing.assert_array_equal(x.grad, [1.0, 0.0])


class TestBackward:
    """Test reverse-mode gradients."""

    def test_square_via_product(self):
        """Test d/dx (x·x) at 3 is 6."""
        x = ad.parameter(3.0, "x")
        grads = ad.backward(x * x)
        assert grads["x"] == pytest.approx(6.0)

    def test_sigmoid_derivative_at_zero(self):
        """Test d/dx sigmoid(x) at 0 is 0.25."""
        x = ad.parameter(0.0, "x")
        ad.backward(ad.sigmoid(x))
        assert x.grad == pytest.approx(0.25)

    def test_matmul_gradient(self):
        """Test d/dW sum(X W) with X = [[1, 2]] is [[1], [2]]."""
        w = ad.parameter(np.zeros((2, 1)), "W")
        ad.backward(ad.sum(ad.matmul(np.array([[1.0, 2.0]]), w)))
        np.testing.assert_allclose(w.grad, [[1.0], [2.0]])

    def test_repeated_backward_accumulates(self):
        """Test calling backward twice without reset doubles the gradient."""
        x = ad.parameter(2.0, "x")
        y = ad.square(x)
        ad.backward(y)
        ad.backward(y)
        assert x.grad == pytest.approx(8.0)

    def test_non_scalar_root_rejected(self):
        """Test backward needs a scalar root."""
        x = ad.parameter(np.ones(3), "x")
        with pytest.raises(DomainError, match="scalar"):
            ad.backward(x * 2.0)

    def test_constants_receive_no_gradient(self):
        """Test constant leaves are left untouched by backward."""
        c = ad.constant(np.ones(2))
        x = ad.parameter(np.ones(2), "x")
        ad.backward(ad.sum(c * x))
        np.testing.assert_array_equal(c.grad, np.zeros(2))
        np.testing.assert_array_equal(x.grad, np.ones(2))

    def test_linearity(self):
        """Test backward(a·f + b·g) equals a·backward(f) + b·backward(g)."""
        rng = Rng(3)
        value = rng.normal((3, 2))

        def f(x):
            return ad.sum(ad.sigmoid(x) * x)

        def g(x):
            return ad.sum(ad.exp(0.3 * x))

        x1, x2, x3 = (ad.parameter(value, "x") for _ in range(3))
        ad.backward(2.5 * f(x1) - 0.7 * g(x1))
        ad.backward(f(x2))
        ad.backward(g(x3))
        np.testing.assert_allclose(x1.grad, 2.5 * x2.grad - 0.7 * x3.grad, atol=1e-12)


class TestPrimitiveGradients:
    """Test every backward rule against central differences."""

    @pytest.mark.parametrize("name,build,shape,positive", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
    def test_matches_finite_differences(self, name, build, shape, positive):
        """Test the rule on random inputs within relative error 1e-4."""
        rng = Rng(11)
        for _ in range(20):
            x = ad.parameter(_random_input(rng, shape, positive), "x")
            report = ad.gradient_check(lambda: build(x), {"x": x}, step=1e-4, tolerance=1e-4)
            assert report.passed, f"{name}: {report.max_error:.3e}"


class TestGradientCheck:
    """Test the gradient checker itself."""

    def test_polynomial_is_exact(self):
        """Test f(x) = x² at 3 has relative error below 1e-6."""
        x = ad.parameter([3.0], "x")
        report = ad.gradient_check(lambda: ad.sum(ad.square(x)), {"x": x}, step=1e-4)
        assert report.max_error < 1e-6
        assert report.passed
        assert report.worst_parameter == "x"

    def test_wrong_rule_is_flagged(self, monkeypatch):
        """Test a sabotaged backward rule fails the check by a wide margin."""
        monkeypatch.setitem(ad.BACKWARD_RULES, "square", lambda node, g: (3.0 * g * node.parents[0].value,))
        x = ad.parameter([3.0, -1.0], "x")
        report = ad.gradient_check(lambda: ad.sum(ad.square(x)), {"x": x})
        assert not report.passed
        assert report.max_error > 0.1

    def test_small_curved_gradient_passes_after_refinement(self):
        """Test a correct 7e-7 gradient that truncation error fails at step 1e-4 passes at a finer step."""
        x = ad.parameter([0.0], "x")

        def fn():
            return ad.sum(3.0 + 1.4e-9 * ad.exp(500.0 * x))

        coarse = ad.gradient_check(fn, {"x": x}, step=1e-4, tolerance=1e-4, refine=False)
        assert not coarse.passed
        refined = ad.gradient_check(fn, {"x": x}, step=1e-4, tolerance=1e-4)
        assert refined.passed
        assert refined.refined == 1
        assert refined.details["x"][0] == pytest.approx(7e-7, rel=1e-12)

    def test_parameter_values_restored(self):
        """Test probing leaves every parameter at its original value."""
        x = ad.parameter([[1.0, -2.0], [0.5, 3.0]], "x")
        before = x.value.copy()
        ad.gradient_check(lambda: ad.sum(ad.exp(x)), {"x": x})
        np.testing.assert_array_equal(x.value, before)


class TestRng:
    """Test the seeded random stream."""

    def test_same_seed_same_stream(self):
        """Test identical seeds produce identical draws."""
        a, b = Rng(42), Rng(42)
        np.testing.assert_array_equal(a.uniform(5), b.uniform(5))
        np.testing.assert_array_equal(a.normal((2, 3)), b.normal((2, 3)))

    def test_uniform_open_interval(self):
        """Test uniform draws stay strictly inside (0, 1)."""
        draws = Rng(0).uniform(10_000)
        assert draws.min() > 0.0 and draws.max() < 1.0

    def test_integers_inclusive(self):
        """Test integer draws include both endpoints."""
        draws = Rng(1).integers(2, 4, size=500)
        assert set(draws.tolist()) == {2, 3, 4}

    def test_state_round_trip(self):
        """Test restoring a saved state replays the stream."""
        rng = Rng(7)
        rng.normal(3)
        state = rng.get_state()
        expected = rng.uniform(4)
        rng.set_state(state)
        np.testing.assert_array_equal(rng.uniform(4), expected)

    def test_spawn_is_deterministic_and_distinct(self):
        """Test child streams depend only on seed and offset."""
        a = Rng(5).spawn(1).uniform(3)
        b = Rng(5).spawn(1).uniform(3)
        c = Rng(5).spawn(2).uniform(3)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
