"""Derivatives of the LP solution map through the homogeneous self-dual embedding.

The cone program is ``min c'x  s.t.  Ax + s = b, s >= 0`` with dual
``A'y + c = 0, y >= 0``. A solution is embedded as ``z = (x, y - s, 1)`` and the
normalized residual ``N(z) = ((Q - I) Pi(z) + z) / |w|`` vanishes there. Its
derivative ``M = (Q - I) DPi(z) + I`` defines ``dz`` implicitly; ``M`` always
has ``z`` in its null space, which the retriever derivative annihilates, so
the systems are solved in the least-squares sense with LSQR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, lsqr

from .errors import (
    ComplementarityViolation, DegenerateProjection, DimensionMismatch, LsqrNoConvergence,
)
from .qp import QpProblem, SolverConfig, Status, solve_qp, validate_problem

DEGENERACY_TOL = 1e-9
LSQR_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class ConeLpProblem:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if A.shape != (b.size, c.size):
            raise DimensionMismatch(f"A has shape {A.shape}, expected ({b.size}, {c.size})")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def n(self):
        return self.c.size

    @property
    def m(self):
        return self.b.size


@dataclass(frozen=True, eq=False)
class ConeSolution:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray

    def residuals(self, p: ConeLpProblem):
        """``(primal, dual, complementarity)`` infinity-norm residuals."""
        primal = np.abs(p.A @ self.x + self.s - p.b).max(initial=0.0)
        dual = np.abs(p.A.T @ self.y + p.c).max(initial=0.0)
        return float(primal), float(dual), float(abs(self.s @ self.y))


@dataclass(frozen=True, eq=False)
class EmbeddingPoint:
    z: np.ndarray
    w: float = 1.0


@dataclass(frozen=True)
class LsqrResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float


def embed_skew(p: ConeLpProblem) -> np.ndarray:
    """``Q = [[0, A', c], [-A, 0, b], [-c', -b', 0]]``."""
    n, m = p.n, p.m
    N = n + m + 1
    Q = np.zeros((N, N))
    Q[:n, n:n + m] = p.A.T
    Q[:n, -1] = p.c
    Q[n:n + m, :n] = -p.A
    Q[n:n + m, -1] = p.b
    Q[-1, :n] = -p.c
    Q[-1, n:n + m] = -p.b
    return Q


def solution_to_embedding(sol: ConeSolution, tol=1e-8) -> EmbeddingPoint:
    y, s = np.asarray(sol.y, dtype=float), np.asarray(sol.s, dtype=float)
    both = np.flatnonzero((y > tol) & (s > tol))
    if both.size:
        raise ComplementarityViolation(f"rows {both.tolist()} have y > 0 and s > 0")
    return EmbeddingPoint(np.concatenate([np.asarray(sol.x, dtype=float), y - s, [1.0]]), 1.0)


def _split(z, n, m):
    return z[:n], z[n:n + m], z[n + m]


def retrieve(point: EmbeddingPoint, n) -> ConeSolution:
    """The retriever ``phi(z) = (u, Pi+(v), Pi+(v) - v) / w``."""
    z = np.asarray(point.z, dtype=float)
    m = z.size - n - 1
    u, v, _ = _split(z, n, m)
    vp = np.maximum(v, 0.0)
    w = point.w
    return ConeSolution(u / w, vp / w, (vp - v) / w)


def projection(z, n, m):
    """Projection onto ``R^n x R^m_+ x R_+``."""
    u, v, w = _split(np.asarray(z, dtype=float), n, m)
    return np.concatenate([u, np.maximum(v, 0.0), [max(w, 0.0)]])


def projection_derivative(z, n, m, tol=DEGENERACY_TOL):
    """Diagonal of ``DPi(z)``; raises where the orthant projection has a kink."""
    _, v, w = _split(np.asarray(z, dtype=float), n, m)
    kinks = np.flatnonzero(np.abs(v) <= tol)
    if kinks.size:
        raise DegenerateProjection(f"v is zero at rows {kinks.tolist()}")
    return np.concatenate([np.ones(n), (v > 0).astype(float), [1.0 if w > 0 else 0.0]])


def lsqr_solve(op: LinearOperator, rhs, tol=LSQR_TOL, max_iter=None) -> LsqrResult:
    """Least-squares solve with scipy's LSQR; non-convergence is reported, not raised."""
    rhs = np.asarray(rhs, dtype=float)
    if op.shape[0] != rhs.size:
        raise DimensionMismatch(f"operator has {op.shape[0]} rows, rhs has {rhs.size}")
    if max_iter is None:
        max_iter = 10 * op.shape[1]
    if not np.any(rhs):
        return LsqrResult(np.zeros(op.shape[1]), True, 0, 0.0)
    out = lsqr(op, rhs, atol=tol, btol=tol, conlim=1e14, iter_lim=max_iter)
    x, istop, itn = out[0], out[1], out[2]
    # one refinement pass on the residual recovers digits lost to LSQR's stopping rule
    resid = rhs - op.matvec(x)
    if np.any(resid):
        corr = lsqr(op, resid, atol=tol, btol=tol, conlim=1e14, iter_lim=max_iter)
        x = x + corr[0]
        itn += corr[2]
    converged = istop in (0, 1, 2, 4, 5)
    rel = float(np.linalg.norm(op.rmatvec(rhs - op.matvec(x))) / np.linalg.norm(rhs))
    return LsqrResult(x, converged, int(itn), rel)


class _Derivative:
    """The operator ``M`` and the retriever derivative at a solution."""

    def __init__(self, p: ConeLpProblem, sol: ConeSolution):
        self.p = p
        self.n, self.m = p.n, p.m
        point = solution_to_embedding(sol)
        self.z = point.z
        self.Q = embed_skew(p)
        self.d = projection_derivative(self.z, self.n, self.m)
        self.pi = projection(self.z, self.n, self.m)
        self.sol = sol
        N = self.z.size
        Q, d = self.Q, self.d
        self.M = LinearOperator(
            (N, N), dtype=float,
            matvec=lambda v: Q @ (d * v) - d * v + v,
            rmatvec=lambda r: d * (-(Q @ r) - r) + r,
        )

    def solve(self, op, rhs, tol, max_iter):
        res = lsqr_solve(op, rhs, tol, max_iter)
        if not res.converged:
            raise LsqrNoConvergence(f"LSQR stopped after {res.iterations} iterations, "
                                    f"residual {res.residual:.3e}")
        return res.x


def derivative_forward(p: ConeLpProblem, sol: ConeSolution, dp, tol=LSQR_TOL, max_iter=None):
    """Directional derivative ``(dx, dy, ds)`` of the solution along ``dp = (dA, db, dc)``."""
    dA, db, dc = dp
    dA = np.asarray(dA, dtype=float).reshape(p.A.shape)
    db = np.asarray(db, dtype=float).reshape(p.m)
    dc = np.asarray(dc, dtype=float).reshape(p.n)
    D = _Derivative(p, sol)
    n, m = D.n, D.m
    pu, pv, pw = _split(D.pi, n, m)
    g = np.concatenate([dA.T @ pv + dc * pw, -dA @ pu + db * pw, [-(dc @ pu) - db @ pv]])
    dz = D.solve(D.M, -g, tol, max_iter)
    du, dv, dw = _split(dz, n, m)
    dplus = D.d[n:n + m]
    x, y, s = (np.asarray(a, dtype=float) for a in (sol.x, sol.y, sol.s))
    dx = du - dw * x
    dy = dplus * dv - dw * y
    ds = dplus * dv - dv - dw * s
    return dx, dy, ds


def derivative_adjoint(p: ConeLpProblem, sol: ConeSolution, dl, tol=LSQR_TOL, max_iter=None):
    """Gradients ``(gA, gb, gc)`` of a loss with sensitivities ``dl = (dl_dx, dl_dy, dl_ds)``."""
    dl_dx, dl_dy, dl_ds = (np.asarray(a, dtype=float).reshape(-1) for a in dl)
    if dl_dx.size != p.n or dl_dy.size != p.m or dl_ds.size != p.m:
        raise DimensionMismatch("loss sensitivities do not match problem dimensions")
    D = _Derivative(p, sol)
    n, m = D.n, D.m
    x, y, s = (np.asarray(a, dtype=float) for a in (sol.x, sol.y, sol.s))
    dplus = D.d[n:n + m]
    seed = np.concatenate([
        dl_dx,
        dplus * (dl_dy + dl_ds) - dl_ds,
        [-(x @ dl_dx + y @ dl_dy + s @ dl_ds)],
    ])
    r = D.solve(D.M.adjoint(), -seed, tol, max_iter)
    ru, rv, rw = _split(r, n, m)
    pu, pv, pw = _split(D.pi, n, m)
    gA = np.outer(pv, ru) - np.outer(rv, pu)
    gb = rv * pw - rw * pv
    gc = ru * pw - rw * pu
    return gA, gb, gc


def lp_as_qp(p: ConeLpProblem, reg=1e-6):
    """The LP as a QP with a small proximal term: ``min reg/2 |x|^2 + c'x  s.t.  Ax <= b``."""
    return validate_problem(QpProblem(P=reg * np.eye(p.n), q=p.c, G=p.A, h=p.b))


def solve_lp(p: ConeLpProblem, reg=1e-6, cfg=SolverConfig()) -> ConeSolution:
    """Solve the LP through the QP solver with a tiny quadratic term."""
    s = solve_qp(lp_as_qp(p, reg), cfg)
    if s.status is not Status.OPTIMAL:
        raise ValueError(f"LP solve failed: {s.status.value}")
    return ConeSolution(np.array(s.z_star), np.array(s.lambda_star), np.array(s.slack))


def random_nondegenerate_lp(rng, n, m, margin=(0.5, 1.5)):
    """LP with a known strictly complementary vertex solution (``m >= n``)."""
    if m < n:
        raise ValueError("need m >= n for a vertex solution")
    A = rng.normal(size=(m, n))
    x = rng.normal(size=n)
    active = np.zeros(m, dtype=bool)
    active[rng.permutation(m)[:n]] = True
    y = np.where(active, rng.uniform(*margin, size=m), 0.0)
    s = np.where(active, 0.0, rng.uniform(*margin, size=m))
    p = ConeLpProblem(A=A, b=A @ x + s, c=-A.T @ y)
    return p, ConeSolution(x, y, s)
