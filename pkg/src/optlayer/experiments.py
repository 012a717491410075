"""Desk-scale applications: learned TV denoising, bilevel data poisoning, gradient suites."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .cone import derivative_adjoint, derivative_forward, random_nondegenerate_lp
from .errors import LayerSolveError, OptLayerError
from .problems import random_dims, random_feasible_qp
from .qp import QpProblem, SolverConfig, Status, solve_qp, validate_problem
from .qpdiff import gradcheck, qp_backward

log = logging.getLogger("optlayer")


class SolverFailure(LayerSolveError):
    """An experiment's inner QP did not solve; ``partial`` holds metrics so far."""

    def __init__(self, message, partial=None, status=None):
        super().__init__(message, status=status)
        self.partial = partial or {}


def _load(cls, obj):
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ValueError(f"unknown config fields {sorted(unknown)}")
    return cls(**obj)


@dataclass(frozen=True)
class DenoiseConfig:
    seed: int = 0
    length: int = 50
    segments: int = 5
    sigma: float = 0.1
    n_train: int = 10
    n_test: int = 3
    lam_init: float = 0.01
    lr: float = 1.0
    iterations: int = 25
    learn_d: bool = False
    d_lr: float = 0.01
    out: str | None = None

    def __post_init__(self):
        for name in ("length", "segments", "n_train", "n_test", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.segments > self.length:
            raise ValueError("segments must not exceed length")
        if self.length < 2:
            raise ValueError("length must be at least 2")
        for name in ("lam_init", "lr", "d_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @classmethod
    def from_json(cls, obj):
        return _load(cls, obj)


@dataclass(frozen=True)
class PoisonConfig:
    seed: int = 0
    n_train: int = 40
    n_test: int = 40
    separation: float = 1.0
    alpha: float = 0.1
    epsilon: float = 0.05
    out: str | None = None

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("dataset sizes must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 <= self.epsilon <= 0.1:
            raise ValueError("epsilon must lie in [0, 0.1]")

    @classmethod
    def from_json(cls, obj):
        return _load(cls, obj)


def _check(sol, partial, what):
    if sol.status is not Status.OPTIMAL:
        raise SolverFailure(f"{what}: {sol.status.value}", partial, sol.status)


# -- total variation denoising -----------------------------------------------

def difference_operator(L):
    return np.diff(np.eye(L), axis=0)


def piecewise_constant_signals(rng, count, length, segments, sigma):
    """``(clean, noisy)`` arrays of shape ``(count, length)``."""
    clean = np.empty((count, length))
    for i in range(count):
        cuts = np.sort(rng.choice(np.arange(1, length), size=segments - 1, replace=False))
        levels = rng.normal(size=segments)
        clean[i] = np.repeat(levels, np.diff(np.concatenate([[0], cuts, [length]])))
    return clean, clean + sigma * rng.normal(size=clean.shape)


def tv_problem(y, lam, D):
    """``min 1/2 |y - z|^2 + lam 1't  s.t.  Dz <= t, -Dz <= t`` over ``(z, t)``."""
    L, k = y.size, D.shape[0]
    P = np.zeros((L + k, L + k))
    P[:L, :L] = np.eye(L)
    q = np.concatenate([-y, np.full(k, lam)])
    G = np.block([[D, -np.eye(k)], [-D, -np.eye(k)]])
    return validate_problem(QpProblem(P=P, q=q, G=G, h=np.zeros(2 * k)))


def tv_denoise(y, lam, D, cfg=SolverConfig()):
    p = tv_problem(y, lam, D)
    return p, solve_qp(p, cfg)


def _tv_loss(signals, lam, D, grad, partial):
    """Mean MSE over signals and, with ``grad``, its gradient in ``(lam, D)``."""
    noisy, clean = signals
    L = noisy.shape[1]
    total, g_lam, g_D = 0.0, 0.0, np.zeros_like(D)
    for y, x in zip(noisy, clean):
        p, s = tv_denoise(y, lam, D)
        _check(s, partial, "TV denoising solve failed")
        z = s.z_star[:L]
        total += np.mean((z - x) ** 2)
        if grad:
            dl = np.zeros(p.n)
            dl[:L] = 2.0 * (z - x) / L
            g, _ = qp_backward(p, s, dl)
            k = D.shape[0]
            g_lam += g.gq[L:].sum()
            g_D += g.gG[:k, :L] - g.gG[k:, :L]
    n = len(noisy)
    return float(total / n), float(g_lam / n), g_D / n


def run_denoise(cfg: DenoiseConfig):
    """Train ``log lam`` (and optionally ``D``) by descent on the training MSE.

    Steps that would increase the training loss are rejected and halve the
    learning rates, so the recorded training loss never increases.
    """
    rng = np.random.default_rng(cfg.seed)
    clean, noisy = piecewise_constant_signals(
        rng, cfg.n_train + cfg.n_test, cfg.length, cfg.segments, cfg.sigma)
    train = (noisy[:cfg.n_train], clean[:cfg.n_train])
    test = (noisy[cfg.n_train:], clean[cfg.n_train:])
    D = difference_operator(cfg.length)
    metrics = {"config": asdict(cfg)}

    baseline, _, _ = _tv_loss(test, 0.0, D, False, metrics)
    metrics["baseline_test_mse"] = baseline
    metrics["noise_power"] = float(np.mean((test[0] - test[1]) ** 2))

    log_lam = math.log(cfg.lam_init)
    loss, g_lam, g_D = _tv_loss(train, cfg.lam_init, D, True, metrics)
    metrics["initial_lambda"] = cfg.lam_init
    metrics["initial_train_mse"] = loss
    metrics["initial_test_mse"], _, _ = _tv_loss(test, cfg.lam_init, D, False, metrics)
    history = [loss]
    lr, d_lr = cfg.lr, cfg.d_lr
    for it in range(cfg.iterations):
        # dimensionless step: d log(loss) / d log(lam)
        step = math.exp(log_lam) * g_lam / max(loss, 1e-300)
        cand_log = log_lam - lr * step
        cand_D = D - d_lr * g_D if cfg.learn_d else D
        cand = _tv_loss(train, math.exp(cand_log), cand_D, True, metrics)
        # accept only descent steps so the training loss is monotone
        if cand[0] <= loss:
            log_lam, D = cand_log, cand_D
            loss, g_lam, g_D = cand
        else:
            lr *= 0.5
            d_lr *= 0.5
        history.append(loss)
        log.info("denoise iter %d: lambda=%.5g train_mse=%.6g", it, math.exp(log_lam), loss)

    lam = math.exp(log_lam)
    metrics["final_lambda"] = lam
    metrics["final_train_mse"] = loss
    metrics["final_test_mse"], _, _ = _tv_loss(test, lam, D, False, metrics)
    metrics["train_history"] = history
    if cfg.learn_d:
        metrics["operator_change"] = float(np.abs(D - difference_operator(cfg.length)).max())
    return metrics


# -- bilevel poisoning -------------------------------------------------------

def gaussian_blobs(rng, n, separation):
    """Two 2-d blobs centred at ``+-separation (1, 1)`` with labels ``+-1``."""
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    X = y[:, None] * separation + rng.normal(size=(n, 2))
    return X, y


def ridge_problem(X, y, alpha):
    """``min |X theta - y|^2 + alpha |theta|^2`` as an unconstrained QP."""
    d = X.shape[1]
    return validate_problem(QpProblem(P=2.0 * (X.T @ X + alpha * np.eye(d)), q=-2.0 * X.T @ y))


def mse_loss(theta, X, y):
    return float(np.mean((X @ theta - y) ** 2))


def poison_gradient(X, y, X_test, y_test, alpha, partial=None):
    """``(theta*, L_test, dL_test/dX)`` via the implicit gradient of the ridge QP."""
    p = ridge_problem(X, y, alpha)
    s = solve_qp(p)
    _check(s, partial, "ridge solve failed")
    theta = np.array(s.z_star)
    r = X_test @ theta - y_test
    dl = 2.0 * X_test.T @ r / y_test.size
    g, _ = qp_backward(p, s, dl)
    gP = 0.5 * (g.gP + g.gP.T)
    grad_X = 4.0 * X @ gP - 2.0 * np.outer(y, g.gq)
    return theta, float(np.mean(r ** 2)), grad_X


def poison_step(X, grad_X, epsilon):
    """One signed ascent step; zero-gradient coordinates do not move."""
    return X + epsilon * np.sign(grad_X)


def run_poison(cfg: PoisonConfig):
    rng = np.random.default_rng(cfg.seed)
    X, y = gaussian_blobs(rng, cfg.n_train, cfg.separation)
    X_test, y_test = gaussian_blobs(rng, cfg.n_test, cfg.separation)
    metrics = {"config": asdict(cfg)}
    theta, clean_loss, grad_X = poison_gradient(X, y, X_test, y_test, cfg.alpha, metrics)
    metrics["clean_test_loss"] = clean_loss
    metrics["clean_theta"] = theta.tolist()
    X_p = poison_step(X, grad_X, cfg.epsilon)
    s = solve_qp(ridge_problem(X_p, y, cfg.alpha))
    _check(s, metrics, "retraining solve failed")
    theta_p = np.array(s.z_star)
    metrics["poisoned_test_loss"] = mse_loss(theta_p, X_test, y_test)
    metrics["poisoned_theta"] = theta_p.tolist()
    metrics["moved_coordinates"] = int(np.count_nonzero(X_p != X))
    return metrics


# -- gradient suites ---------------------------------------------------------

def qp_gradcheck_suite(seed, trials, tol=1e-4, directions=3):
    """Finite-difference check of QP backward on ``trials`` random problems."""
    rng = np.random.default_rng(seed)
    cases, worst = [], 0.0
    for i in range(trials):
        n, n_eq, n_ineq = random_dims(rng)
        p = validate_problem(random_feasible_qp(rng, n, n_eq, n_ineq))
        seeds = rng.normal(size=n)
        try:
            rep = gradcheck(p, seeds, directions=directions, rng=rng)
        except OptLayerError as exc:
            cases.append({"trial": i, "flagged": True, "error": None, "note": str(exc)})
            continue
        entry = {"trial": i, "flagged": rep.flagged, "error": rep.max_error}
        if not rep.flagged:
            worst = max(worst, rep.max_error)
        cases.append(entry)
    clean = [c for c in cases if not c["flagged"]]
    failed = [c["trial"] for c in clean if c["error"] > tol]
    return {
        "suite": "qp", "seed": seed, "trials": trials, "nondegenerate": len(clean),
        "flagged": len(cases) - len(clean), "max_error": worst, "tolerance": tol,
        "failed_trials": failed, "passed": not failed,
    }


def adjoint_identity_error(p, sol, rng):
    """Relative gap between ``<J dp, dl>`` and ``<dp, J' dl>`` for random directions."""
    dA, db, dc = rng.normal(size=p.A.shape), rng.normal(size=p.m), rng.normal(size=p.n)
    dl = (rng.normal(size=p.n), rng.normal(size=p.m), rng.normal(size=p.m))
    fwd = derivative_forward(p, sol, (dA, db, dc))
    gA, gb, gc = derivative_adjoint(p, sol, dl)
    lhs = sum(float(a @ b) for a, b in zip(fwd, dl))
    rhs = float(np.sum(gA * dA) + gb @ db + gc @ dc)
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1.0)


def cone_adjoint_suite(seed, trials, tol=1e-8):
    rng = np.random.default_rng(seed)
    worst, failed = 0.0, []
    for i in range(trials):
        n = int(rng.integers(1, 6))
        m = n + int(rng.integers(0, 5))
        p, sol = random_nondegenerate_lp(rng, n, m)
        err = adjoint_identity_error(p, sol, rng)
        worst = max(worst, err)
        if err > tol:
            failed.append(i)
    return {"suite": "cone", "seed": seed, "trials": trials, "max_error": worst,
            "tolerance": tol, "failed_trials": failed, "passed": not failed}


def dumps(obj):
    return json.dumps(obj, sort_keys=True)
