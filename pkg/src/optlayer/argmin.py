"""Reference argmin-differentiation formulas for smooth bivariate objectives.

For ``g(x) = argmin_y f(x, y)`` with scalar ``x`` and vector ``y``, these
functions return ``dg/dx`` as a length-``n`` vector. They serve as oracles for
the QP backward pass and as a finite-difference toolkit for the whole package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BoundaryPoint, EvaluationFailure, NotAtMinimizer, NullspaceMismatch, RankDeficient,
    SingularHessian, SingularMatrix, SingularReducedHessian,
)

COND_LIMIT = 1e12
STATIONARITY_TOL = 1e-6


@dataclass(frozen=True)
class SmoothBivariateObjective:
    """``f(x, y)`` with the derivatives needed by the implicit function theorem.

    ``cross_xy`` returns the mixed partial ``d/dx grad_y f``.
    """

    eval: Callable[[float, np.ndarray], float]
    grad_y: Callable[[float, np.ndarray], np.ndarray]
    hess_yy: Callable[[float, np.ndarray], np.ndarray]
    cross_xy: Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BarrierConstraint:
    """Inequality ``f_i(x, y) <= 0`` with its first and second derivatives."""

    value: Callable[[float, np.ndarray], float]
    grad_y: Callable[[float, np.ndarray], np.ndarray]
    grad_x: Callable[[float, np.ndarray], float]
    hess_yy: Callable[[float, np.ndarray], np.ndarray]
    cross_xy: Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BarrierSpec:
    constraints: Sequence[BarrierConstraint]
    t: float

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("barrier parameter t must be positive")


def _vec(v):
    return np.atleast_1d(np.asarray(v, dtype=float))


def _hessian(obj, x, y):
    H = np.atleast_2d(np.asarray(obj.hess_yy(x, y), dtype=float))
    return 0.5 * (H + H.T)


def _solve(M, rhs, err, what):
    if M.size and np.linalg.cond(M) > COND_LIMIT:
        raise err(f"{what} is singular or ill-conditioned")
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise err(f"{what} is singular") from exc


def _check_stationary(obj, x, y, tol=STATIONARITY_TOL):
    g = _vec(obj.grad_y(x, y))
    if np.abs(g).max(initial=0.0) > tol:
        raise NotAtMinimizer(f"|grad_y| = {np.abs(g).max():.3e} exceeds {tol:g}")


def grad_unconstrained(obj: SmoothBivariateObjective, x, y_star) -> np.ndarray:
    """``-f_YY^{-1} f_XY`` at an unconstrained minimizer."""
    y = _vec(y_star)
    _check_stationary(obj, x, y)
    return -_solve(_hessian(obj, x, y), _vec(obj.cross_xy(x, y)), SingularHessian, "f_YY")


def grad_equality_nullspace(obj, x, y_star, F, A=None) -> np.ndarray:
    """``-F (F' f_YY F)^{-1} F' f_XY`` where the columns of ``F`` span null(A)."""
    y = _vec(y_star)
    F = np.asarray(F, dtype=float).reshape(y.size, -1)
    if A is not None:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.size and F.size and np.abs(A @ F).max() > 1e-10:
            raise NullspaceMismatch(f"|A F| = {np.abs(A @ F).max():.3e}")
    if F.shape[1] == 0:
        return np.zeros(y.size)
    H = _hessian(obj, x, y)
    red = F.T @ _vec(obj.cross_xy(x, y))
    return -F @ _solve(F.T @ H @ F, red, SingularReducedHessian, "F' f_YY F")


def grad_equality_fullrank(obj, x, y_star, A) -> np.ndarray:
    """``(H^-1 A' (A H^-1 A')^-1 A H^-1 - H^-1) f_XY`` for full-row-rank ``A``."""
    y = _vec(y_star)
    A = np.asarray(A, dtype=float).reshape(-1, y.size)
    m = A.shape[0]
    if m and np.linalg.matrix_rank(A) < m:
        raise RankDeficient(f"A has rank {np.linalg.matrix_rank(A)} < {m}")
    H = _hessian(obj, x, y)
    fxy = _vec(obj.cross_xy(x, y))
    Hinv_f = _solve(H, fxy, SingularHessian, "f_YY")
    if m == 0:
        return -Hinv_f
    Hinv_At = _solve(H, A.T, SingularHessian, "f_YY")
    S = A @ Hinv_At
    return Hinv_At @ _solve(S, A @ Hinv_f, RankDeficient, "A H^-1 A'") - Hinv_f


def _barrier_terms(barrier, x, y, n):
    phi_yy = np.zeros((n, n))
    phi_xy = np.zeros(n)
    for c in barrier.constraints:
        f = float(c.value(x, y))
        if not f < -1e-12:
            raise BoundaryPoint(f"constraint value {f:.3e} is not strictly negative")
        g = _vec(c.grad_y(x, y))
        H = np.atleast_2d(np.asarray(c.hess_yy(x, y), dtype=float))
        phi_yy += H / f - np.outer(g, g) / f**2
        phi_xy += _vec(c.cross_xy(x, y)) / f - g * float(c.grad_x(x, y)) / f**2
    return phi_yy, phi_xy


def grad_barrier(obj, barrier: BarrierSpec, x, y_star_t) -> np.ndarray:
    """Derivative of the minimizer of ``t f_0 - phi`` with ``phi = sum log(-f_i)``.

    Differentiating the barrier objective gives ``-(t f_YY - phi_YY)^{-1}
    (t f_XY - phi_XY)``: the log-barrier enters with a negative sign.
    """
    y = _vec(y_star_t)
    phi_yy, phi_xy = _barrier_terms(barrier, x, y, y.size)
    t = barrier.t
    M = t * _hessian(obj, x, y) - phi_yy
    rhs = t * _vec(obj.cross_xy(x, y)) - phi_xy
    return -_solve(M, rhs, SingularMatrix, "barrier Hessian")


def barrier_objective(obj, barrier: BarrierSpec):
    """``(value, grad, hess)`` callables in ``y`` of ``t f_0 - phi`` at fixed ``x``."""

    def value(x, y):
        fs = [float(c.value(x, y)) for c in barrier.constraints]
        if any(f >= 0 for f in fs):
            return np.inf
        return barrier.t * float(obj.eval(x, y)) - float(np.sum(np.log(-np.asarray(fs))))

    def grad(x, y):
        out = barrier.t * _vec(obj.grad_y(x, y))
        for c in barrier.constraints:
            out = out - _vec(c.grad_y(x, y)) / float(c.value(x, y))
        return out

    def hess(x, y):
        phi_yy, _ = _barrier_terms(barrier, x, y, y.size)
        return barrier.t * _hessian(obj, x, y) - phi_yy

    return value, grad, hess


def newton_minimize(value, grad, hess, y0, tol=1e-10, max_iter=200):
    """Damped Newton with Armijo backtracking. ``value`` may return ``inf`` off-domain.

    Stops when ``|grad| <= tol`` or the Newton decrement ``g' H^-1 g`` drops
    below ``tol**2``, which is invariant to scaling the objective.
    """
    y = _vec(y0).copy()
    f = value(y)
    if not np.isfinite(f):
        raise EvaluationFailure("starting point is outside the domain")
    for _ in range(max_iter):
        g = _vec(grad(y))
        if np.abs(g).max(initial=0.0) <= tol:
            return y
        H = np.atleast_2d(hess(y))
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise SingularHessian("Newton Hessian is singular") from exc
        decrement = -(g @ step)
        if 0 <= decrement <= tol**2:
            return y + step
        if decrement < 0:
            step = -g
        elif decrement < 0.25 and np.isfinite(value(y + step)):
            # quadratic-convergence region; Armijo would be defeated by rounding in f
            y = y + step
            f = value(y)
            continue
        alpha = 1.0
        while alpha > 1e-16:
            y_new = y + alpha * step
            f_new = value(y_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * alpha * (g @ step):
                break
            alpha *= 0.5
        else:
            # no representable decrease left
            return y
        y, f = y_new, f_new
    raise NotAtMinimizer(f"Newton did not converge in {max_iter} iterations")


def minimize_objective(obj: SmoothBivariateObjective, x, y0, tol=1e-10):
    return newton_minimize(
        lambda y: float(obj.eval(x, y)), lambda y: obj.grad_y(x, y), lambda y: _hessian(obj, x, y),
        y0, tol=tol)


def minimize_barrier(obj, barrier: BarrierSpec, x, y0, tol=1e-10):
    value, grad, hess = barrier_objective(obj, barrier)
    return newton_minimize(lambda y: value(x, y), lambda y: grad(x, y), lambda y: hess(x, y),
                           y0, tol=tol)


def finite_diff_jacobian(fn, theta, step=1e-5) -> np.ndarray:
    """Central-difference Jacobian; column ``i`` is the derivative along ``e_i``."""
    theta = np.asarray(theta, dtype=float)
    flat = theta.reshape(-1)
    cols = []

    def call(v):
        try:
            out = np.asarray(fn(v.reshape(theta.shape)), dtype=float).reshape(-1)
        except Exception as exc:  # noqa: BLE001 - any failure of the user callable
            raise EvaluationFailure(f"function raised {type(exc).__name__}: {exc}") from exc
        if not np.all(np.isfinite(out)):
            raise EvaluationFailure("function returned non-finite values")
        return out

    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += step
        dn[i] -= step
        cols.append((call(up) - call(dn)) / (2.0 * step))
    if not cols:
        return np.zeros((call(flat).size, 0))
    return np.stack(cols, axis=1)
