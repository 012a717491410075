"""Dense convex QP representation and a primal-dual interior-point solver.

Problems have the form::

    minimize    1/2 z'Pz + q'z + r
    subject to  A z  = b
                G z <= h

The solver is a Mehrotra predictor-corrector path-following method working
on the reduced (symmetric, quasidefinite-regularized) KKT system. After
convergence the iterate is polished by solving the equality KKT system on
the identified active set; the final factorization is cached on the
solution so the backward pass can reuse it.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    NonFiniteData,
    NotPsd,
    RankDeficientEquality,
)
from .linalg import FactorizationError, LdlFactor

PSD_RTOL = 1e-9
THREADS_ENV = "OPTLAYER_THREADS"


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    MAX_ITERATIONS = "MaxIterations"
    NUMERICAL_FAILURE = "NumericalFailure"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 50
    kkt_reg: float = 1e-9
    polish: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.kkt_reg >= 0:
            raise ValueError("kkt_reg must be nonnegative")


@dataclass
class QpProblem:
    """Raw QP data. Missing constraint blocks mean "no constraints of that kind"."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    r: float = 0.0


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ValidatedProblem:
    """A QP whose data has passed :func:`validate_problem`. Arrays are read-only."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    r: float = 0.0

    @property
    def n(self):
        return self.q.shape[0]

    @property
    def n_eq(self):
        return self.b.shape[0]

    @property
    def n_ineq(self):
        return self.h.shape[0]

    @property
    def dims(self):
        return (self.n, self.n_eq, self.n_ineq)

    def objective(self, z):
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.P @ z + self.q @ z + self.r)

    def replace(self, **blocks):
        """Return a re-validated copy with some data blocks swapped out."""
        data = dict(P=self.P, q=self.q, A=self.A, b=self.b, G=self.G, h=self.h, r=self.r)
        data.update(blocks)
        return validate_problem(QpProblem(**data))


def _as_matrix(name, M, rows, n):
    if M is None:
        if rows not in (None, 0):
            raise DimensionMismatch(f"{name} missing but rhs has {rows} rows")
        return np.zeros((0, n))
    M = np.asarray(M, dtype=float)
    if M.ndim == 1 and M.size == 0:
        M = M.reshape(0, n)
    if M.ndim != 2 or M.shape[1] != n:
        raise DimensionMismatch(f"{name} must have shape (k, {n}), got {M.shape}")
    if rows is not None and M.shape[0] != rows:
        raise DimensionMismatch(f"{name} has {M.shape[0]} rows, rhs has {rows}")
    return M


def _as_vector(name, v, size=None):
    if v is None:
        return np.zeros(0) if size in (None, 0) else None
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be a vector, got shape {v.shape}")
    if size is not None and v.shape[0] != size:
        raise DimensionMismatch(f"{name} must have length {size}, got {v.shape[0]}")
    return v


def validate_problem(p: QpProblem) -> ValidatedProblem:
    """Check dimensions, symmetrize P, and verify P is PSD and A has full row rank."""
    P = np.asarray(p.P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
        raise DimensionMismatch(f"P must be a nonempty square matrix, got shape {P.shape}")
    n = P.shape[0]
    q = _as_vector("q", p.q, n)
    b = _as_vector("b", p.b)
    h = _as_vector("h", p.h)
    A = _as_matrix("A", p.A, b.shape[0], n)
    G = _as_matrix("G", p.G, h.shape[0], n)
    r = float(p.r)

    for name, arr in (("P", P), ("q", q), ("A", A), ("b", b), ("G", G), ("h", h)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteData(f"{name} contains non-finite entries")
    if not np.isfinite(r):
        raise NonFiniteData("r is not finite")

    P = 0.5 * (P + P.T)
    eig = np.linalg.eigvalsh(P)
    scale = max(np.abs(eig).max(), 0.0)
    if eig.min() < -PSD_RTOL * scale:
        raise NotPsd(f"P has eigenvalue {eig.min():.3e} below -{PSD_RTOL:g}*|P|")

    if A.shape[0] > 0:
        rank = np.linalg.matrix_rank(A)
        if rank < A.shape[0]:
            raise RankDeficientEquality(f"rank(A) = {rank} < {A.shape[0]} equality rows")

    return ValidatedProblem(
        P=_frozen(P), q=_frozen(q), A=_frozen(A), b=_frozen(b),
        G=_frozen(G), h=_frozen(h), r=r,
    )


@dataclass(frozen=True)
class Residuals:
    primal: float
    dual: float
    gap: float

    def max(self):
        return max(self.primal, self.dual, self.gap)


@dataclass(frozen=True, eq=False)
class KktFactor:
    """Cached LDL^T factor of the last KKT matrix assembled by the solver.

    ``kind == "active"``: the equality KKT system restricted to the active
    inequality rows (unknowns ordered z, nu, lambda_active).

    ``kind == "reduced"``: the full reduced system with the block
    ``-diag(slack / lambda)`` for every inequality row (unknowns z, nu, lambda).
    """

    kind: str
    ldl: LdlFactor
    active: np.ndarray
    lam: np.ndarray
    slack: np.ndarray

    def solve(self, rhs):
        return self.ldl.solve(rhs)


@dataclass(frozen=True, eq=False)
class QpSolution:
    z_star: np.ndarray
    nu_star: np.ndarray
    lambda_star: np.ndarray
    slack: np.ndarray
    status: Status
    kkt_factor: KktFactor | None
    iterations: int
    residuals: Residuals
    objective: float = float("nan")
    polished: bool = field(default=False)

    @property
    def optimal(self):
        return self.status is Status.OPTIMAL


def _assemble_kkt(p, rows_G, w_block):
    """KKT matrix over unknowns (z, nu, lambda_rows) with -diag(w_block) in the last block."""
    n, me, mi = p.n, p.n_eq, rows_G.shape[0]
    N = n + me + mi
    K = np.zeros((N, N))
    K[:n, :n] = p.P
    K[:n, n:n + me] = p.A.T
    K[n:n + me, :n] = p.A
    K[:n, n + me:] = rows_G.T
    K[n + me:, :n] = rows_G
    if mi:
        idx = np.arange(n + me, N)
        K[idx, idx] = -w_block
    return K


def _reg_diag(n, m_rest, reg):
    return np.concatenate([np.full(n, reg), np.full(m_rest, -reg)])


def _solution(p, z, nu, lam, status, factor, iterations, residuals, polished=False):
    slack = p.h - p.G @ z
    for a in (z, nu, lam, slack):
        a.setflags(write=False)
    return QpSolution(
        z_star=z, nu_star=nu, lambda_star=lam, slack=slack, status=status,
        kkt_factor=factor, iterations=iterations, residuals=residuals,
        objective=p.objective(z) if np.all(np.isfinite(z)) else float("nan"),
        polished=polished,
    )


def _failed(p, status, iterations, z=None, nu=None, lam=None, residuals=None):
    z = np.full(p.n, np.nan) if z is None else np.array(z)
    nu = np.full(p.n_eq, np.nan) if nu is None else np.array(nu)
    lam = np.full(p.n_ineq, np.nan) if lam is None else np.array(lam)
    residuals = residuals or Residuals(np.inf, np.inf, np.inf)
    return _solution(p, z, nu, lam, status, None, iterations, residuals)


def _active_set_solve(p, active, reg, start=None):
    """Solve the equality KKT system with inequality rows ``active`` held tight.

    With ``start = (z, nu, lam)`` the system is solved for a correction from
    that point, so directions the active rows leave free keep their values.
    """
    Ga = p.G[active]
    K = _assemble_kkt(p, Ga, np.zeros(Ga.shape[0]))
    factor = LdlFactor(K, _reg_diag(p.n, p.n_eq + Ga.shape[0], reg))
    n, me = p.n, p.n_eq
    if start is None:
        sol = factor.solve(np.concatenate([-p.q, p.b, p.h[active]]))
    else:
        z0, nu0, lam0 = start
        x0 = np.concatenate([z0, nu0, lam0[active]])
        rhs = np.concatenate([-p.q, p.b, p.h[active]]) - K @ x0
        sol = x0 + factor.solve(rhs)
    z, nu = sol[:n], sol[n:n + me]
    lam = np.zeros(p.n_ineq)
    lam[active] = sol[n + me:]
    kkt = KktFactor("active", factor, active.copy(), lam.copy(), np.zeros(int(active.sum())))
    return z, nu, lam, kkt


def _exact_residuals(p, z, nu, lam):
    slack = p.h - p.G @ z
    primal = 0.0
    if p.n_eq:
        primal = np.abs(p.A @ z - p.b).max()
    if p.n_ineq:
        primal = max(primal, np.maximum(-slack, 0.0).max())
    dual = np.abs(p.P @ z + p.q + p.A.T @ nu + p.G.T @ lam).max()
    gap = float(np.abs(lam @ slack)) if p.n_ineq else 0.0
    return Residuals(float(primal), float(dual), gap)


def _solve_equality_only(p, cfg):
    active = np.zeros(0, dtype=bool)
    try:
        z, nu, lam, factor = _active_set_solve(p, active, cfg.kkt_reg)
    except FactorizationError:
        return _failed(p, Status.NUMERICAL_FAILURE, 1)
    res = _exact_residuals(p, z, nu, lam)
    if res.max() > cfg.tol or not np.all(np.isfinite(z)):
        return _failed(p, Status.NUMERICAL_FAILURE, 1, z, nu, lam, res)
    return _solution(p, z, nu, lam, Status.OPTIMAL, factor, 1, res, polished=True)


def _max_step(x, dx):
    neg = dx < 0
    if not neg.any():
        return 1.0
    return min(1.0, float((x[neg] / -dx[neg]).min()))


def _polish(p, z, nu, lam, s, res, cfg, max_rounds=8):
    """Re-solve with the guessed active set held tight.

    Near-degenerate rows can be misclassified when the interior point stops;
    rows whose multiplier comes out negative are released and violated rows
    are added, for a few rounds.
    """
    active = lam > s
    # polished points should be feasible up to rounding, not up to the IPM tolerance
    feas_tol = 1e-12 * max(1.0, float(np.abs(p.h).max()))
    for _ in range(max_rounds):
        try:
            zp, nup, lamp, factor = _active_set_solve(p, active, cfg.kkt_reg, (z, nu, lam))
        except FactorizationError:
            return None
        if not (np.all(np.isfinite(zp)) and np.all(np.isfinite(nup))
                and np.all(np.isfinite(lamp))):
            return None
        slack = p.h - p.G @ zp
        # degenerate rows have zero multipliers that round to tiny negatives
        release = active & (lamp < -cfg.tol)
        add = ~active & (slack < -feas_tol)
        if not (release.any() or add.any()):
            break
        active = (active & ~release) | add
    else:
        return None
    lamp = np.maximum(lamp, 0.0)
    factor.lam[:] = lamp
    pres = _exact_residuals(p, zp, nup, lamp)
    if pres.max() > max(cfg.tol, res.max()):
        return None
    return zp, nup, lamp, factor, pres


def solve_qp(p: ValidatedProblem, cfg: SolverConfig = SolverConfig()) -> QpSolution:
    """Solve a validated QP. Failures are reported through ``status``, not raised."""
    if p.n_ineq == 0:
        return _solve_equality_only(p, cfg)

    n, me, mi = p.dims
    P, q, A, b, G, h = p.P, p.q, p.A, p.b, p.G, p.h
    reg = _reg_diag(n, me + mi, cfg.kkt_reg)

    # initial point: least-squares KKT solve, then push (s, lambda) into the interior
    try:
        f0 = LdlFactor(_assemble_kkt(p, G, np.ones(mi)), reg)
        sol = f0.solve(np.concatenate([-q, b, h]))
    except FactorizationError:
        return _failed(p, Status.NUMERICAL_FAILURE, 0)
    z, nu, w = sol[:n], sol[n:n + me], sol[n + me:]
    lam = np.maximum(w, 1.0)
    s = np.maximum(-w, 1.0)

    lam_scale = max(1.0, np.abs(lam).max())
    primal_hist = []
    status = Status.MAX_ITERATIONS
    res = Residuals(np.inf, np.inf, np.inf)
    it = 0
    for it in range(cfg.max_iter + 1):
        rd = P @ z + q + A.T @ nu + G.T @ lam
        re = A @ z - b
        ri = G @ z + s - h
        gap = float(s @ lam)
        primal = max(np.abs(re).max() if me else 0.0, np.abs(ri).max())
        res = Residuals(float(primal), float(np.abs(rd).max()), gap)
        if res.max() <= cfg.tol:
            status = Status.OPTIMAL
            break
        if it == cfg.max_iter:
            break
        primal_hist.append(primal)
        if _looks_infeasible(primal_hist, lam, lam_scale):
            status = Status.INFEASIBLE
            break

        try:
            factor = LdlFactor(_assemble_kkt(p, G, s / lam), reg)
        except FactorizationError:
            return _failed(p, Status.NUMERICAL_FAILURE, it, z, nu, lam, res)

        def newton(rc):
            rhs = np.concatenate([-rd, -re, -ri + rc / lam])
            d = factor.solve(rhs)
            dz, dnu, dlam = d[:n], d[n:n + me], d[n + me:]
            ds = (-rc - s * dlam) / lam
            return dz, dnu, dlam, ds

        try:
            mu = gap / mi
            dz, dnu, dlam, ds = newton(s * lam)
            a_aff = min(_max_step(s, ds), _max_step(lam, dlam))
            mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dlam)) / mi
            sigma = (mu_aff / mu) ** 3
            dz, dnu, dlam, ds = newton(s * lam + ds * dlam - sigma * mu)
        except FactorizationError:
            return _failed(p, Status.NUMERICAL_FAILURE, it, z, nu, lam, res)

        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(lam, dlam)))
        z = z + alpha * dz
        nu = nu + alpha * dnu
        lam = lam + alpha * dlam
        s = s + alpha * ds
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(lam))):
            return _failed(p, Status.NUMERICAL_FAILURE, it + 1, res=res)

    iterations = it
    if status is not Status.OPTIMAL:
        return _failed(p, status, iterations, z, nu, lam, res)

    if cfg.polish:
        polished = _polish(p, z, nu, lam, s, res, cfg)
        if polished is not None:
            zp, nup, lamp, kkt, pres = polished
            return _solution(p, zp, nup, lamp, Status.OPTIMAL, kkt, iterations, pres, polished=True)

    try:
        ldl = LdlFactor(_assemble_kkt(p, G, s / lam), reg)
    except FactorizationError:
        return _failed(p, Status.NUMERICAL_FAILURE, iterations, z, nu, lam, res)
    kkt = KktFactor("reduced", ldl, np.ones(mi, dtype=bool), lam.copy(), s.copy())
    return _solution(p, z.copy(), nu.copy(), lam.copy(), Status.OPTIMAL, kkt, iterations, res)


def _looks_infeasible(primal_hist, lam, lam_scale, window=8):
    # divergence certificate heuristic: duals blow up while the primal residual stalls
    big = np.abs(lam).max() > 1e8 * lam_scale
    if len(primal_hist) <= window:
        return big and np.abs(lam).max() > 1e14 * lam_scale
    stalled = primal_hist[-1] > 0.5 * primal_hist[-1 - window]
    return big and stalled


def batch_threads():
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def solve_batch(ps, cfg: SolverConfig = SolverConfig(), threads=None):
    """Solve problems sharing dimensions; results match sequential ``solve_qp`` exactly."""
    ps = list(ps)
    if not ps:
        return []
    dims = ps[0].dims
    for i, p in enumerate(ps):
        if p.dims != dims:
            raise DimensionMismatch(f"batch element {i} has dims {p.dims}, expected {dims}")
    threads = batch_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(ps) == 1:
        return [solve_qp(p, cfg) for p in ps]
    with ThreadPoolExecutor(max_workers=min(threads, len(ps))) as pool:
        return list(pool.map(lambda p: solve_qp(p, cfg), ps))


@dataclass(frozen=True)
class ResidualReport:
    stationarity: float
    equality: float
    inequality: float
    complementarity: float
    dual_feasibility: float

    def max(self):
        return max(self.stationarity, self.equality, self.inequality,
                   self.complementarity, self.dual_feasibility)


def kkt_residuals(p: ValidatedProblem, s) -> ResidualReport:
    """Infinity-norm residuals of the four KKT condition groups at ``s``."""
    z = np.asarray(s.z_star, dtype=float)
    nu = np.asarray(s.nu_star, dtype=float)
    lam = np.asarray(s.lambda_star, dtype=float)
    if z.shape != (p.n,) or nu.shape != (p.n_eq,) or lam.shape != (p.n_ineq,):
        raise DimensionMismatch(
            f"solution dims {(z.size, nu.size, lam.size)} do not match problem {p.dims}")

    def norm(v):
        return float(np.abs(v).max()) if v.size else 0.0

    gz_h = p.G @ z - p.h
    return ResidualReport(
        stationarity=norm(p.P @ z + p.q + p.A.T @ nu + p.G.T @ lam),
        equality=norm(p.A @ z - p.b),
        inequality=norm(np.maximum(gz_h, 0.0)),
        complementarity=norm(lam * gz_h),
        dual_feasibility=norm(np.maximum(-lam, 0.0)),
    )
