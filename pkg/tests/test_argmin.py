import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import null_space

from optlayer.argmin import (
    BarrierConstraint, BarrierSpec, SmoothBivariateObjective, finite_diff_jacobian,
    grad_barrier, grad_equality_fullrank, grad_equality_nullspace, grad_unconstrained,
    minimize_barrier, minimize_objective,
)
from optlayer.errors import (
    BoundaryPoint, EvaluationFailure, NotAtMinimizer, NullspaceMismatch, RankDeficient,
    SingularHessian,
)
from optlayer.problems import random_psd


def quadratic(H, c, d=None):
    """``f(x, y) = 1/2 y'Hy - x c'y + d'y``; the minimizer is linear in x."""
    H, c = np.asarray(H, float), np.asarray(c, float)
    d = np.zeros_like(c) if d is None else np.asarray(d, float)
    return SmoothBivariateObjective(
        eval=lambda x, y: 0.5 * y @ H @ y - x * c @ y + d @ y,
        grad_y=lambda x, y: H @ y - x * c + d,
        hess_yy=lambda x, y: H,
        cross_xy=lambda x, y: -c,
    )


def eq_minimizer(H, c, d, A, b, x):
    n, m = H.shape[0], A.shape[0]
    K = np.block([[H, A.T], [A, np.zeros((m, m))]])
    return np.linalg.solve(K, np.concatenate([x * c - d, b]))[:n]


SHIFT = SmoothBivariateObjective(
    eval=lambda x, y: 0.5 * float((y[0] - x) ** 2),
    grad_y=lambda x, y: np.array([y[0] - x]),
    hess_yy=lambda x, y: np.array([[1.0]]),
    cross_xy=lambda x, y: np.array([-1.0]),
)

QUARTIC = SmoothBivariateObjective(
    eval=lambda x, y: 0.25 * float((y[0] - x) ** 4) + 0.5 * float(y[0] ** 2),
    grad_y=lambda x, y: np.array([(y[0] - x) ** 3 + y[0]]),
    hess_yy=lambda x, y: np.array([[3 * (y[0] - x) ** 2 + 1]]),
    cross_xy=lambda x, y: np.array([-3 * (y[0] - x) ** 2]),
)

NONPOS = BarrierConstraint(
    value=lambda x, y: float(y[0]),
    grad_y=lambda x, y: np.array([1.0]),
    grad_x=lambda x, y: 0.0,
    hess_yy=lambda x, y: np.zeros((1, 1)),
    cross_xy=lambda x, y: np.zeros(1),
)


class TestUnconstrained:
    def test_shift(self):
        np.testing.assert_allclose(grad_unconstrained(SHIFT, 0.7, [0.7]), [1.0])

    def test_linear_map(self):
        H, c = np.diag([1.0, 2.0]), np.ones(2)
        x = 1.3
        y = np.linalg.solve(H, x * c)
        np.testing.assert_allclose(grad_unconstrained(quadratic(H, c), x, y), [1.0, 0.5])

    def test_quartic_fd(self):
        def g(t):
            return minimize_objective(QUARTIC, t[0], np.zeros(1))

        y = g([2.0])
        fd = finite_diff_jacobian(g, np.array([2.0])).ravel()
        np.testing.assert_allclose(grad_unconstrained(QUARTIC, 2.0, y), fd, atol=1e-5)

    def test_not_at_minimizer(self):
        with pytest.raises(NotAtMinimizer):
            grad_unconstrained(SHIFT, 0.0, [1.0])

    def test_singular(self):
        with pytest.raises(SingularHessian):
            grad_unconstrained(quadratic(np.zeros((1, 1)), [1.0]), 0.0, [0.0])


class TestEquality:
    A = np.array([[1.0, 1.0]])

    def obj(self):
        # f = 1/2 |y - x (1, 0)|^2
        return quadratic(np.eye(2), [1.0, 0.0])

    def y_star(self, x, b=0.0):
        return eq_minimizer(np.eye(2), np.array([1.0, 0.0]), np.zeros(2), self.A, [b], x)

    def test_nullspace_projection(self):
        F = np.array([[1.0], [-1.0]]) / math.sqrt(2)
        out = grad_equality_nullspace(self.obj(), 0.4, self.y_star(0.4), F, self.A)
        np.testing.assert_allclose(out, [0.5, -0.5], atol=1e-12)

    def test_fullrank_projection(self):
        out = grad_equality_fullrank(self.obj(), 0.4, self.y_star(0.4), self.A)
        np.testing.assert_allclose(out, [0.5, -0.5], atol=1e-12)

    def test_projection_fd(self):
        fd = finite_diff_jacobian(lambda t: self.y_star(t[0]), np.array([0.4])).ravel()
        np.testing.assert_allclose(fd, [0.5, -0.5], atol=1e-9)

    def test_empty_nullspace(self):
        out = grad_equality_nullspace(self.obj(), 0.4, [0.0, 0.0], np.zeros((2, 0)))
        np.testing.assert_array_equal(out, [0.0, 0.0])

    def test_nullspace_mismatch(self):
        with pytest.raises(NullspaceMismatch):
            grad_equality_nullspace(self.obj(), 0.4, [0.0, 0.0], np.array([[1.0], [0.0]]),
                                    self.A)

    def test_fullrank_no_constraints(self):
        H, c = np.diag([2.0, 4.0]), np.array([1.0, 1.0])
        y = np.linalg.solve(H, c)
        obj = quadratic(H, c)
        np.testing.assert_allclose(grad_equality_fullrank(obj, 1.0, y, np.zeros((0, 2))),
                                   grad_unconstrained(obj, 1.0, y))

    def test_rank_deficient(self):
        with pytest.raises(RankDeficient):
            grad_equality_fullrank(self.obj(), 0.0, [0.0, 0.0], [[1.0, 1.0], [2.0, 2.0]])

    def test_random_fd(self):
        rng = np.random.default_rng(12)
        n, m = 5, 2
        H, c, d = random_psd(rng, n), rng.normal(size=n), rng.normal(size=n)
        A, b = rng.normal(size=(m, n)), rng.normal(size=m)
        x = 0.3
        y = eq_minimizer(H, c, d, A, b, x)
        fd = finite_diff_jacobian(lambda t: eq_minimizer(H, c, d, A, b, t[0]),
                                  np.array([x])).ravel()
        out = grad_equality_fullrank(quadratic(H, c, d), x, y, A)
        np.testing.assert_allclose(out, fd, atol=1e-6)

    @given(st.integers(0, 2**32 - 1))
    def test_formulas_agree(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        m = int(rng.integers(1, n))
        H, c = random_psd(rng, n), rng.normal(size=n)
        A = rng.normal(size=(m, n))
        y = eq_minimizer(H, c, np.zeros(n), A, np.zeros(m), 0.0)
        obj = quadratic(H, c)
        a = grad_equality_nullspace(obj, 0.0, y, null_space(A), A)
        b = grad_equality_fullrank(obj, 0.0, y, A)
        assert np.abs(a - b).max() <= 1e-10 * max(1.0, np.abs(b).max())


class TestBarrier:
    def _grad(self, x, t):
        spec = BarrierSpec([NONPOS], t)
        y = minimize_barrier(SHIFT, spec, x, np.array([-1.0]))
        return grad_barrier(SHIFT, spec, x, y)[0]

    def test_interior_branch(self):
        assert abs(self._grad(-1.0, 1e4) - 1.0) <= 1e-3

    def test_active_branch(self):
        assert abs(self._grad(1.0, 1e4)) <= 1e-3

    @pytest.mark.parametrize("x,limit", [(-1.0, 1.0), (1.0, 0.0), (-0.5, 1.0), (0.5, 0.0)])
    def test_error_shrinks_with_t(self, x, limit):
        errs = [abs(self._grad(x, t) - limit) for t in (1e2, 1e3, 1e4)]
        assert errs[0] > errs[1] > errs[2]

    @pytest.mark.parametrize("t", [1e2, 1e3, 1e4])
    @pytest.mark.parametrize("x", [-1.0, 0.5, 1.0])
    def test_closed_form(self, x, t):
        # y*(x) = (x - sqrt(x^2 + 4/t)) / 2 for this barrier problem
        exact = 0.5 * (1.0 - x / math.sqrt(x * x + 4.0 / t))
        assert abs(self._grad(x, t) - exact) <= 1e-9

    def test_fd(self):
        spec = BarrierSpec([NONPOS], 1e4)

        def y_of(v):
            return minimize_barrier(SHIFT, spec, v[0], np.array([-1.0]))

        fd = finite_diff_jacobian(y_of, np.array([1.0])).ravel()[0]
        assert abs(self._grad(1.0, 1e4) - fd) <= 1e-5

    def test_boundary(self):
        with pytest.raises(BoundaryPoint):
            grad_barrier(SHIFT, BarrierSpec([NONPOS], 10.0), 0.0, [0.0])

    def test_bad_t(self):
        with pytest.raises(ValueError):
            BarrierSpec([NONPOS], 0.0)


class TestFiniteDiff:
    def test_linear(self):
        M = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(finite_diff_jacobian(lambda t: M @ t, np.ones(3)), M,
                                   atol=1e-9)

    def test_constant(self):
        J = finite_diff_jacobian(lambda t: np.array([1.0, 2.0]), np.ones(2))
        np.testing.assert_array_equal(J, np.zeros((2, 2)))

    def test_square(self):
        J = finite_diff_jacobian(lambda t: t**2, np.array([3.0]))
        assert abs(J[0, 0] - 6.0) <= 1e-9

    def test_failure(self):
        def bad(t):
            raise RuntimeError("boom")

        with pytest.raises(EvaluationFailure):
            finite_diff_jacobian(bad, np.ones(1))
        with pytest.raises(EvaluationFailure):
            finite_diff_jacobian(lambda t: np.array([np.nan]), np.ones(1))
