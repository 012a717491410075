"""Backward pass for QP layers by implicit differentiation of the KKT conditions.

Given a loss gradient ``g = dl/dz*`` the adjoint system

    [ P    G' diag(lam)   A' ] [d_z  ]     [g]
    [ G    diag(Gz - h)   0  ] [d_lam] = - [0]
    [ A    0              0  ] [d_nu ]     [0]

is solved, after which the data gradients are simple outer products of
``(d_z, d_lam, d_nu)`` with the primal/dual optimum. Substituting
``y = diag(lam) d_lam`` turns the system into the symmetric KKT matrix the
solver already factorized, which is how the cached factor gets reused.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .errors import DimensionMismatch, NoFactorCache, SolveFailedAtPerturbation
from .linalg import FactorizationError
from .qp import SolverConfig, Status, ValidatedProblem, solve_qp

DEGENERACY_TOL = 1e-7
BLOCKS = ("P", "q", "A", "b", "G", "h")


@dataclass(frozen=True)
class BackwardSeeds:
    dl_dz: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dl_dz", np.asarray(self.dl_dz, dtype=float).reshape(-1))


@dataclass(frozen=True, eq=False)
class DiffTriple:
    d_z: np.ndarray
    d_lambda: np.ndarray
    d_nu: np.ndarray
    # diag(lambda*) d_lambda, kept separately so inactive rows (lambda* = 0) stay exact
    scaled_d_lambda: np.ndarray | None = None
    heuristic: bool = False
    degenerate_rows: tuple = ()
    reused_factor: bool = False


@dataclass(frozen=True, eq=False)
class ParamGrads:
    gP: np.ndarray
    gq: np.ndarray
    gA: np.ndarray
    gb: np.ndarray
    gG: np.ndarray
    gh: np.ndarray

    def block(self, name):
        return getattr(self, "g" + name)

    def as_dict(self):
        return {name: self.block(name) for name in BLOCKS}


def degenerate_rows(s, tol=DEGENERACY_TOL):
    """Inequality rows where both the dual and the slack vanish."""
    lam = np.asarray(s.lambda_star)
    slack = np.asarray(s.slack)
    return tuple(int(i) for i in np.flatnonzero((lam <= tol) & (slack <= tol)))


def _seed_vector(p, seeds):
    g = seeds.dl_dz if isinstance(seeds, BackwardSeeds) else np.asarray(seeds, dtype=float).reshape(-1)
    if g.shape != (p.n,):
        raise DimensionMismatch(f"seed has length {g.size}, problem has n = {p.n}")
    return g


def _direct_solve(p, s, g, reg):
    """Solve the adjoint system as written, with regularization, without any cache."""
    n, me, mi = p.dims
    lam, slack = s.lambda_star, s.slack
    N = n + mi + me
    K = np.zeros((N, N))
    K[:n, :n] = p.P + reg * np.eye(n)
    K[:n, n:n + mi] = p.G.T * lam
    K[:n, n + mi:] = p.A.T
    K[n:n + mi, :n] = p.G
    K[n:n + mi, n:n + mi] = np.diag(-slack - reg)
    K[n + mi:, :n] = p.A
    K[n + mi:, n + mi:] = -reg * np.eye(me)
    rhs = np.concatenate([-g, np.zeros(mi + me)])
    try:
        sol = sla.solve(K, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise FactorizationError(str(exc)) from exc
    dz, dlam, dnu = sol[:n], sol[n:n + mi], sol[n + mi:]
    return dz, dlam, dnu, lam * dlam


def backward_solve(p: ValidatedProblem, s, seeds, cfg: SolverConfig = SolverConfig()) -> DiffTriple:
    """Solve the adjoint KKT system for ``(d_z, d_lambda, d_nu)``."""
    g = _seed_vector(p, seeds)
    factor = s.kkt_factor
    if factor is None:
        raise NoFactorCache(f"solution has no cached KKT factor (status {s.status.value})")
    n, me, mi = p.dims
    lam = np.asarray(s.lambda_star)
    slack = np.asarray(s.slack)
    degenerate = degenerate_rows(s)

    reusable = (
        factor.lam.shape == lam.shape
        and np.array_equal(factor.lam, lam)
        and factor.ldl.size == n + me + int(factor.active.sum())
    )
    if reusable:
        act = factor.active
        rhs = np.concatenate([-g, np.zeros(me + int(act.sum()))])
        sol = factor.solve(rhs)
        dz, dnu = sol[:n], sol[n:n + me]
        y = np.zeros(mi)
        y[act] = sol[n + me:]
        dlam = np.zeros(mi)
        with np.errstate(divide="ignore", invalid="ignore"):
            pos = act & (lam > 0)
            dlam[pos] = y[pos] / lam[pos]
            # rows dropped from the factor have lam = 0: G_i dz - slack_i dlam_i = 0
            off = ~act
            gdz = p.G[off] @ dz
            dlam[off] = np.where(slack[off] > 0, gdz / np.where(slack[off] > 0, slack[off], 1.0), 0.0)
    else:
        dz, dlam, dnu, y = _direct_solve(p, s, g, cfg.kkt_reg)

    for name, v in (("d_z", dz), ("d_nu", dnu), ("scaled d_lambda", y)):
        if not np.all(np.isfinite(v)):
            raise FactorizationError(f"non-finite {name} in backward solve")
    return DiffTriple(
        d_z=dz, d_lambda=dlam, d_nu=dnu, scaled_d_lambda=y,
        heuristic=bool(degenerate), degenerate_rows=degenerate, reused_factor=reusable,
    )


def assemble_grads(s, d: DiffTriple) -> ParamGrads:
    """Gradients of the loss with respect to every QP data block."""
    z, nu, lam = (np.asarray(a) for a in (s.z_star, s.nu_star, s.lambda_star))
    if d.d_z.shape != z.shape or d.d_nu.shape != nu.shape or d.d_lambda.shape != lam.shape:
        raise DimensionMismatch("DiffTriple dimensions do not match the solution")
    dz, dnu = d.d_z, d.d_nu
    y = d.scaled_d_lambda if d.scaled_d_lambda is not None else lam * d.d_lambda
    return ParamGrads(
        gP=0.5 * (np.outer(dz, z) + np.outer(z, dz)),
        gq=dz.copy(),
        gA=np.outer(dnu, z) + np.outer(nu, dz),
        gb=-dnu,
        gG=np.outer(y, z) + np.outer(lam, dz),
        gh=-y,
    )


def qp_backward(p, s, dl_dz, cfg=SolverConfig()):
    """Convenience wrapper: ``(ParamGrads, DiffTriple)`` for a loss gradient on z*."""
    d = backward_solve(p, s, BackwardSeeds(dl_dz), cfg)
    return assemble_grads(s, d), d


# -- finite-difference verification -----------------------------------------

def relative_error(analytic, reference, floor=1e-6):
    """``|a - r|_inf / max(|a|_inf, |r|_inf, floor)``."""
    a = np.asarray(analytic, dtype=float)
    r = np.asarray(reference, dtype=float)
    if a.size == 0:
        return 0.0
    denom = max(np.abs(a).max(), np.abs(r).max(), floor)
    return float(np.abs(a - r).max() / denom)


@dataclass
class GradReport:
    errors: dict
    analytic: ParamGrads
    numeric: dict
    degenerate_rows: tuple = ()
    heuristic: bool = False
    active_set_changed: bool = False
    solves: int = 0
    notes: list = field(default_factory=list)

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def flagged(self):
        """Finite differences or the analytic gradient are not trustworthy here."""
        return self.heuristic or self.active_set_changed

    def passed(self, tol=1e-4):
        return self.max_error <= tol


def _active_set(s, tol=DEGENERACY_TOL):
    return tuple(np.asarray(s.lambda_star) > np.maximum(np.asarray(s.slack), tol))


def gradcheck(p: ValidatedProblem, seeds, fd_step=1e-5, cfg=SolverConfig(),
              blocks=BLOCKS, directions=None, rng=None, floor=None) -> GradReport:
    """Compare analytic data gradients of ``l = seeds . z*`` against central differences.

    With ``directions=None`` every entry of every block is perturbed. With an
    integer ``directions=k`` each block is instead probed along ``k`` random
    Gaussian directions, comparing directional derivatives.

    Errors are relative per block. A block whose gradient is exactly zero
    (e.g. ``gP`` when the constraints pin z*) has no meaningful relative
    error, so the denominator is floored at ``floor``, by default
    ``1e-3`` times the largest analytic gradient entry over all blocks.
    """
    g = _seed_vector(p, seeds)
    base = solve_qp(p, cfg)
    if base.status is not Status.OPTIMAL:
        raise SolveFailedAtPerturbation(f"base problem did not solve: {base.status.value}")
    analytic, d = qp_backward(p, base, g, cfg)
    if floor is None:
        scale = max((np.abs(v).max() for v in analytic.as_dict().values() if v.size), default=1.0)
        floor = max(1e-3 * scale, 1e-12)
    base_active = _active_set(base)
    changed = False
    solves = 1
    rng = np.random.default_rng(0) if rng is None else rng

    def loss_at(block, value):
        nonlocal changed, solves
        sol = solve_qp(p.replace(**{block: value}), cfg)
        solves += 1
        if sol.status is not Status.OPTIMAL:
            raise SolveFailedAtPerturbation(f"solve failed perturbing {block}: {sol.status.value}")
        if _active_set(sol) != base_active:
            changed = True
        return float(g @ sol.z_star)

    errors, numeric = {}, {}
    for block in blocks:
        data = np.array(getattr(p, block), dtype=float)
        grad = analytic.block(block)
        if data.size == 0:
            errors[block] = 0.0
            numeric[block] = np.zeros_like(data)
            continue
        if directions is None:
            fd = np.zeros_like(data)
            for idx in np.ndindex(data.shape):
                if block == "P" and idx[0] > idx[1]:
                    # validation symmetrizes P, so both perturbations give the same problem
                    fd[idx] = fd[idx[1], idx[0]]
                    continue
                up, dn = data.copy(), data.copy()
                up[idx] += fd_step
                dn[idx] -= fd_step
                fd[idx] = (loss_at(block, up) - loss_at(block, dn)) / (2 * fd_step)
            numeric[block] = fd
            errors[block] = relative_error(grad, fd, floor)
        else:
            ana, num = [], []
            for _ in range(int(directions)):
                v = rng.normal(size=data.shape)
                if block == "P":
                    v = 0.5 * (v + v.T)
                ana.append(float(np.sum(grad * v)))
                num.append((loss_at(block, data + fd_step * v)
                            - loss_at(block, data - fd_step * v)) / (2 * fd_step))
            numeric[block] = np.array(num)
            errors[block] = relative_error(ana, num, floor)
    return GradReport(
        errors=errors, analytic=analytic, numeric=numeric,
        degenerate_rows=d.degenerate_rows, heuristic=d.heuristic,
        active_set_changed=changed, solves=solves,
    )
