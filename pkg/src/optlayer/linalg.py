"""Symmetric indefinite (LDL^T) factorization of regularized KKT matrices."""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack


class FactorizationError(np.linalg.LinAlgError):
    pass


class LdlFactor:
    """Bunch-Kaufman LDL^T factor of ``matrix + diag(reg_diag)``.

    ``solve`` runs a few steps of iterative refinement against the
    *unregularized* matrix so that the regularization only acts as a
    preconditioner.
    """

    def __init__(self, matrix, reg_diag=None, refine_steps=3):
        matrix = np.asarray(matrix, dtype=float)
        self.matrix = matrix
        self.size = matrix.shape[0]
        self.refine_steps = refine_steps
        if reg_diag is None:
            reg_diag = np.zeros(self.size)
        self.reg_diag = np.asarray(reg_diag, dtype=float)
        self._factor(matrix + np.diag(self.reg_diag))

    def _factor(self, k):
        if self.size == 0:
            self._ldu, self._ipiv = k, np.zeros(0, dtype=np.int32)
            return
        if not np.all(np.isfinite(k)):
            raise FactorizationError("non-finite entries in KKT matrix")
        lwork = max(int(lapack.dsytrf_lwork(self.size, lower=1)[0]), 1)
        ldu, ipiv, info = lapack.dsytrf(k, lower=1, lwork=lwork)
        if info != 0:
            raise FactorizationError(f"zero pivot at position {info}")
        self._ldu, self._ipiv = ldu, ipiv

    def _raw_solve(self, rhs):
        x, info = lapack.dsytrs(self._ldu, self._ipiv, rhs, lower=1)
        if info != 0:
            raise FactorizationError(f"dsytrs failed (info={info})")
        return x

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if self.size == 0:
            return np.zeros(0)
        x = self._raw_solve(rhs)
        if not np.any(self.reg_diag):
            steps = 1
        else:
            steps = self.refine_steps
        scale = np.abs(rhs).max() + 1e-300
        for _ in range(steps):
            resid = rhs - self.matrix @ x
            if np.abs(resid).max() <= 1e-15 * scale:
                break
            x = x + self._raw_solve(resid)
        if not np.all(np.isfinite(x)):
            raise FactorizationError("non-finite solution")
        return x
