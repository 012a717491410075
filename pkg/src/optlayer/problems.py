"""Seeded random problem generators."""

from __future__ import annotations

import numpy as np

from .qp import QpProblem, validate_problem


def random_psd(rng, n, ridge=0.5):
    M = rng.normal(size=(n, n))
    return M.T @ M / n + ridge * np.eye(n)


def random_feasible_qp(rng, n, n_eq, n_ineq, ridge=0.5):
    """Strictly convex QP with a feasible point built in; q is drawn independently."""
    P = random_psd(rng, n, ridge)
    z0 = rng.normal(size=n)
    A = rng.normal(size=(n_eq, n))
    G = rng.normal(size=(n_ineq, n))
    h = G @ z0 + rng.uniform(0.0, 1.0, size=n_ineq)
    q = 2.0 * rng.normal(size=n)
    return validate_problem(QpProblem(P=P, q=q, A=A, b=A @ z0, G=G, h=h))


def random_complementary_qp(rng, n, n_eq, n_ineq, n_active=None, margin=(0.5, 1.5)):
    """QP constructed around a known strictly complementary KKT point.

    Returns ``(problem, (z, nu, lam))``. Active rows get duals drawn from
    ``margin`` and zero slack; inactive rows get zero duals and slack from
    ``margin``. Requires ``n_eq + n_active <= n`` so the active rows are
    linearly independent with probability one.
    """
    if n_active is None:
        n_active = int(rng.integers(0, min(n_ineq, n - n_eq) + 1))
    if n_eq + n_active > n:
        raise ValueError("n_eq + n_active must not exceed n")
    P = random_psd(rng, n)
    A = rng.normal(size=(n_eq, n))
    G = rng.normal(size=(n_ineq, n))
    z = rng.normal(size=n)
    nu = rng.normal(size=n_eq)
    active = np.zeros(n_ineq, dtype=bool)
    active[rng.permutation(n_ineq)[:n_active]] = True
    lam = np.where(active, rng.uniform(*margin, size=n_ineq), 0.0)
    slack = np.where(active, 0.0, rng.uniform(*margin, size=n_ineq))
    h = G @ z + slack
    q = -(P @ z + A.T @ nu + G.T @ lam)
    p = validate_problem(QpProblem(P=P, q=q, A=A, b=A @ z, G=G, h=h))
    return p, (z, nu, lam)


def random_dims(rng, max_n=8, max_eq=3, max_ineq=5):
    n = int(rng.integers(1, max_n + 1))
    n_eq = int(rng.integers(0, min(max_eq, n) + 1))
    n_ineq = int(rng.integers(0, max_ineq + 1))
    return n, n_eq, n_ineq
