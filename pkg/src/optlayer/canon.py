"""Canonicalization of parametrized programs to a QP whose data is affine in theta.

Two passes:

1. Epigraph expansion rewrites every non-affine atom with auxiliary variables
   (``norm1`` via ``-t <= a <= t``, ``max_elementwise`` via ``a_i <= t``) and
   peels additive square terms ``w * |F x + f|^2`` off the objective.
2. Tensor reduction maps each affine tree to a sparse tensor ``T`` of shape
   ``rows x (n_c + 1) x (p + 1)`` so that the expression equals
   ``sum_l T[:, :, l] theta~_l`` applied to ``(x~, 1)``, with
   ``theta~ = (theta, 1)``. Products combine tensors with the psi rule, which
   needs one factor to be parameter-free.

A tensor is stored as a sparse matrix with column ``l * width + j`` holding
``T[:, j, l]``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import (
    DimensionMismatch, ExprError, MissingParameterValue, NotVerified, UnsupportedAtom,
)
from .expr import (
    SCALAR, SQUARE_ATOMS, Atom, Constant, DppProblem, Parameter, Variable, add, const, neg,
    smul, sum_, verify_dpp,
)
from .qp import QpProblem, SolverConfig, Status, solve_qp, validate_problem
from .qpdiff import qp_backward

AUX_PREFIX = "__aux"


class DegenerateGradientWarning(UserWarning):
    """The backward pass hit a degenerate active set; gradients are heuristic."""


# -- sparse tensors ----------------------------------------------------------

class SparseTensor:
    """``rows x width x slices`` tensor stored as a CSR matrix ``rows x (slices * width)``."""

    __slots__ = ("mat", "width", "slices")

    def __init__(self, mat, width, slices):
        self.mat = sp.csr_matrix(mat)
        self.width = int(width)
        self.slices = int(slices)
        if self.mat.shape[1] != self.width * self.slices:
            raise ExprError("tensor matrix has the wrong number of columns")

    @classmethod
    def from_coords(cls, rows, width, slices, coords):
        """``coords`` is an iterable of ``(row, col, slice, value)``."""
        coords = list(coords)
        if coords:
            r, c, s, v = (np.array(a) for a in zip(*coords))
            cols = s.astype(np.int64) * width + c.astype(np.int64)
            mat = sp.csr_matrix((v.astype(float), (r.astype(np.int64), cols)),
                                shape=(rows, width * slices))
        else:
            mat = sp.csr_matrix((rows, width * slices))
        return cls(mat, width, slices)

    @property
    def rows(self):
        return self.mat.shape[0]

    def slice(self, l):
        return self.mat[:, l * self.width:(l + 1) * self.width]

    @property
    def parameter_free(self):
        head = self.mat[:, :(self.slices - 1) * self.width]
        return head.count_nonzero() == 0

    def contract(self, theta_tilde):
        """``sum_l T[:, :, l] theta~_l`` as a dense ``rows x width`` array."""
        theta_tilde = np.asarray(theta_tilde, dtype=float)
        blend = sp.kron(sp.csr_matrix(theta_tilde.reshape(-1, 1)), sp.identity(self.width),
                        format="csr")
        return np.asarray((self.mat @ blend).todense())

    def coords(self):
        """Sorted, deduplicated ``(row, col, slice, value)`` entries with nonzero value."""
        m = self.mat.tocoo()
        m.sum_duplicates()
        keep = m.data != 0
        r, k, v = m.row[keep], m.col[keep], m.data[keep]
        s, c = np.divmod(k, self.width)
        order = np.lexsort((s, c, r))
        return [(int(r[i]), int(c[i]), int(s[i]), float(v[i])) for i in order]

    def __add__(self, other):
        return SparseTensor(self.mat + other.mat, self.width, self.slices)

    def __neg__(self):
        return SparseTensor(-self.mat, self.width, self.slices)

    def broadcast(self, rows):
        if self.rows == rows:
            return self
        if self.rows != 1:
            raise DimensionMismatch(f"cannot broadcast {self.rows} rows to {rows}")
        return SparseTensor(sp.csr_matrix(np.ones((rows, 1))) @ self.mat, self.width, self.slices)

    def left_multiply(self, M):
        """Apply a parameter-free linear map to the rows."""
        return SparseTensor(sp.csr_matrix(M) @ self.mat, self.width, self.slices)


def psi(O: SparseTensor, S: SparseTensor) -> SparseTensor:
    """Tensor of ``O(theta) @ S(theta)``; one factor must be parameter-free."""
    if O.width != S.rows:
        raise DimensionMismatch(f"operator width {O.width} != operand rows {S.rows}")
    last = O.slices - 1
    if O.parameter_free:
        return S.left_multiply(O.slice(last))
    if S.parameter_free:
        blocks = sp.kron(sp.identity(O.slices), S.slice(last), format="csr")
        return SparseTensor(O.mat @ blocks, S.width, S.slices)
    raise ExprError("product of two parameter-dependent factors is not parameter-affine")


# -- epigraph expansion ------------------------------------------------------

class _Expander:
    def __init__(self):
        self.aux = []
        self.ineqs = []

    def new_aux(self, dim):
        v = Variable(f"{AUX_PREFIX}{len(self.aux)}", dim)
        self.aux.append(v)
        return v

    def affine(self, e):
        if not isinstance(e, Atom):
            return e
        name = e.name
        if name == "norm1":
            t = self.new_aux(e.args[0].shape[0])
            a = self.affine(e.args[0])
            self.ineqs.append(add(a, neg(t)))
            self.ineqs.append(add(neg(a), neg(t)))
            return sum_(t)
        if name == "max_elementwise":
            t = self.new_aux(e.shape[0])
            for arg in e.args:
                self.ineqs.append(add(self.affine(arg), neg(t)))
            return t
        if name in SQUARE_ATOMS:
            raise UnsupportedAtom(f"{name} is supported only as a positively weighted "
                                  "objective term")
        return Atom(name, tuple(self.affine(c) for c in e.args), e.index)

    def objective(self, e, coef, squares, linear):
        """Split ``coef * e`` into square terms and affine pieces."""
        if isinstance(e, Atom):
            if e.name == "add":
                for c in e.args:
                    self.objective(c, coef, squares, linear)
                return
            if e.name == "negate":
                self.objective(e.args[0], -coef, squares, linear)
                return
            if e.name == "sum" and e.args[0].shape == SCALAR:
                self.objective(e.args[0], coef, squares, linear)
                return
            if e.name == "scalar_mul" and isinstance(e.args[0], Constant) \
                    and e.args[1].shape == SCALAR and _contains_square(e.args[1]):
                self.objective(e.args[1], coef * e.args[0].values[0], squares, linear)
                return
            if e.name in SQUARE_ATOMS:
                weight = coef if e.name == "sum_squares" else 0.5 * coef
                if weight < 0:
                    raise UnsupportedAtom(f"{e.name} with negative weight is not convex")
                if weight > 0:
                    squares.append((weight, self.affine(e.args[0])))
                return
        if coef != 0:
            linear.append(smul(const(coef), self.affine(e)) if coef != 1 else self.affine(e))


def _contains_square(e):
    if isinstance(e, Atom):
        return e.name in SQUARE_ATOMS or any(_contains_square(c) for c in e.args)
    return False


# -- tensor reduction --------------------------------------------------------

class _Reducer:
    def __init__(self, var_offsets, n_c, par_offsets, p):
        self.var_offsets = var_offsets
        self.n_c = n_c
        self.width = n_c + 1
        self.par_offsets = par_offsets
        self.p = p
        self.slices = p + 1

    def tensor(self, rows, coords, width=None):
        return SparseTensor.from_coords(rows, self.width if width is None else width,
                                        self.slices, coords)

    def reduce(self, e) -> SparseTensor:
        if isinstance(e, Variable):
            off = self.var_offsets[e.id]
            return self.tensor(e.dim, [(i, off + i, self.p, 1.0) for i in range(e.dim)])
        if isinstance(e, Parameter):
            if len(e.shape) != 1:
                raise ExprError(f"matrix parameter {e.id!r} used outside mat_vec_mul")
            off = self.par_offsets[e.id]
            return self.tensor(e.shape[0], [(i, self.n_c, off + i, 1.0) for i in range(e.shape[0])])
        if isinstance(e, Constant):
            if len(e.shape) != 1:
                raise ExprError("matrix constant used outside mat_vec_mul")
            return self.tensor(e.shape[0], [(i, self.n_c, self.p, v)
                                            for i, v in enumerate(e.values) if v != 0])
        name = e.name
        if name == "add":
            rows = e.shape[0]
            out = None
            for c in e.args:
                t = self.reduce(c).broadcast(rows)
                out = t if out is None else out + t
            return out
        if name == "negate":
            return -self.reduce(e.args[0])
        if name == "sum":
            t = self.reduce(e.args[0])
            return t.left_multiply(np.ones((1, t.rows)))
        if name == "affine_index":
            t = self.reduce(e.args[0])
            start, stop = e.index
            sel = sp.csr_matrix((np.ones(stop - start), (np.arange(stop - start),
                                 np.arange(start, stop))), shape=(stop - start, t.rows))
            return t.left_multiply(sel)
        if name == "mat_vec_mul":
            return psi(self.matrix_operator(e.args[0]), self.reduce(e.args[1]))
        if name in ("scalar_mul", "inner_product"):
            return self.product(e)
        raise UnsupportedAtom(f"{name} must be expanded before tensor reduction")

    def matrix_operator(self, M):
        r, c = M.shape
        if isinstance(M, Parameter):
            off = self.par_offsets[M.id]
            coords = [(i, j, off + i * c + j, 1.0) for i in range(r) for j in range(c)]
        else:
            vals = M.values
            coords = [(i, j, self.p, vals[i * c + j]) for i in range(r) for j in range(c)
                      if vals[i * c + j] != 0]
        return self.tensor(r, coords, width=c)

    def values_by_slice(self, t):
        """``rows x slices`` coefficients of a variable-free tensor."""
        cols = [l * self.width + self.n_c for l in range(self.slices)]
        return t.mat[:, cols].tocoo()

    def product(self, e):
        a, b = e.args
        ta, tb = self.reduce(a), self.reduce(b)
        a_free, b_free = _variable_free(a), _variable_free(b)
        if e.name == "scalar_mul":
            if a_free:
                d = tb.rows
                vals = self.values_by_slice(ta)
                coords = [(i, i, l, v) for _, l, v in zip(vals.row, vals.col, vals.data)
                          for i in range(d)]
                return psi(self.tensor(d, coords, width=d), tb)
            if b_free:
                vals = self.values_by_slice(tb)
                coords = [(i, 0, l, v) for i, l, v in zip(vals.row, vals.col, vals.data)]
                return psi(self.tensor(tb.rows, coords, width=1), ta)
        else:
            if a_free or b_free:
                free, other = (ta, tb) if a_free else (tb, ta)
                vals = self.values_by_slice(free)
                coords = [(0, j, l, v) for j, l, v in zip(vals.row, vals.col, vals.data)]
                return psi(self.tensor(1, coords, width=free.rows), other)
        raise ExprError(f"{e.name} of two variable expressions is not affine")


def _variable_free(e):
    if isinstance(e, Variable):
        return False
    if isinstance(e, Atom):
        return all(_variable_free(c) for c in e.args)
    return True


# -- canonical form ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AsaForm:
    """Affine maps from ``theta~ = (theta, 1)`` to canonical QP data, plus the retriever.

    ``Qmat`` (``n_c x (p+1)``) gives the linear cost and ``offset`` the constant
    objective term. ``Rtensor`` holds ``[A b]`` for equality rows followed by
    ``[G h]`` for inequality rows. ``Stensor`` holds ``[F f]`` for the square
    terms, weighted row-wise by ``square_weights``, so that
    ``P = 2 F' W F``, ``q = c + 2 F' W f`` and ``r = offset + f' W f``.
    """

    Qmat: sp.csr_matrix
    offset: np.ndarray
    Rtensor: SparseTensor
    Stensor: SparseTensor
    square_weights: np.ndarray
    retriever: sp.csr_matrix
    n_c: int
    m_eq: int
    m_ineq: int
    p: int
    variables: tuple
    parameter_order: tuple

    @property
    def canonical_dims(self):
        return self.n_c, self.m_eq + self.m_ineq

    @property
    def n_original(self):
        return self.retriever.shape[0]

    def theta_tilde(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != self.p:
            raise DimensionMismatch(f"theta has length {theta.size}, expected {self.p}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        return np.concatenate([theta, [1.0]])

    def affine_data(self, theta):
        """The maps that are exactly affine in theta: ``(c, r0, [A b; G h], [F f])``."""
        tt = self.theta_tilde(theta)
        c = np.asarray(self.Qmat @ tt).reshape(-1)
        r0 = float(self.offset @ tt)
        return c, r0, self.Rtensor.contract(tt), self.Stensor.contract(tt)

    def instantiate(self, theta) -> QpProblem:
        c, r0, Ab, Ff = self.affine_data(theta)
        n = self.n_c
        F, f = Ff[:, :n], Ff[:, n]
        w2 = 2.0 * self.square_weights
        P = (F.T * w2) @ F
        q = c + F.T @ (w2 * f)
        r = r0 + float(self.square_weights @ (f * f))
        me = self.m_eq
        return QpProblem(P=P, q=q, A=Ab[:me, :n], b=Ab[:me, n], G=Ab[me:, :n], h=Ab[me:, n], r=r)

    def retrieve(self, x_canonical):
        return np.asarray(self.retriever @ np.asarray(x_canonical)).reshape(-1)

    def split_variables(self, x):
        out, k = {}, 0
        for name, dim in self.variables:
            out[name] = np.asarray(x[k:k + dim])
            k += dim
        return out

    def to_json(self):
        """Stable, sorted dump of every map; the interchange format for golden tests."""
        q = self.Qmat.tocoo()
        q.sum_duplicates()
        cost = sorted((int(i), int(l), float(v)) for i, l, v in zip(q.row, q.col, q.data) if v)
        return {
            "dims": {"n": self.n_c, "m_eq": self.m_eq, "m_ineq": self.m_ineq, "p": self.p,
                     "n_original": self.n_original},
            "variables": [[name, dim] for name, dim in self.variables],
            "parameters": [[name, list(shape)] for name, shape in self.parameter_order],
            "cost": [list(e) for e in cost],
            "offset": [[int(l), float(v)] for l, v in enumerate(self.offset) if v],
            "constraints": [list(e) for e in self.Rtensor.coords()],
            "squares": {"weights": [float(w) for w in self.square_weights],
                        "entries": [list(e) for e in self.Stensor.coords()]},
            "retriever": [[int(i), int(j)] for i, j in zip(*self.retriever.nonzero())],
        }

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)


def canonicalize(problem: DppProblem, mode="dpp") -> AsaForm:
    report = verify_dpp(problem, mode)
    if not report.ok:
        raise NotVerified("problem does not follow the disciplined rules", report.violations)
    ex = _Expander()
    squares, linear = [], []
    ex.objective(problem.objective, 1.0, squares, linear)
    eqs = [add(lhs, neg(rhs)) for lhs, rhs in problem.eq_constraints]
    for lhs, rhs in problem.ineq_constraints:
        ex.ineqs.append(ex.affine(add(lhs, neg(rhs))))
    ineqs = ex.ineqs

    var_offsets, k = {}, 0
    for name, dim in problem.variables:
        var_offsets[name] = k
        k += dim
    n_orig = k
    for v in ex.aux:
        var_offsets[v.id] = k
        k += v.dim
    n_c = k
    par_offsets, p = {}, 0
    for name, shape in problem.parameter_order:
        par_offsets[name] = p
        p += math.prod(shape)
    red = _Reducer(var_offsets, n_c, par_offsets, p)
    width, slices = n_c + 1, p + 1

    obj = red.tensor(1, [])
    for e in linear:
        obj = obj + red.reduce(e)
    cost = obj.mat.tocoo()
    s, j = np.divmod(cost.col, width)
    is_var = j < n_c
    Qmat = sp.csr_matrix((cost.data[is_var], (j[is_var], s[is_var])), shape=(n_c, slices))
    offset = np.zeros(slices)
    np.add.at(offset, s[~is_var], cost.data[~is_var])

    def stacked(exprs, negate_const):
        blocks = [red.reduce(e) for e in exprs]
        if not blocks:
            return red.tensor(0, [])
        T = SparseTensor(sp.vstack([b.mat for b in blocks], format="csr"), width, slices)
        if negate_const:
            flip = np.ones(width * slices)
            flip[n_c::width] = -1.0
            T = SparseTensor(T.mat @ sp.diags(flip), width, slices)
        return T

    R = stacked(eqs + ineqs, negate_const=True)
    m_eq = sum(e.shape[0] for e in eqs)
    m_ineq = sum(e.shape[0] for e in ineqs)
    S = stacked([e for _, e in squares], negate_const=False)
    weights = np.concatenate([np.full(e.shape[0], w) for w, e in squares]) if squares \
        else np.zeros(0)
    retriever = sp.csr_matrix((np.ones(n_orig), (np.arange(n_orig), np.arange(n_orig))),
                              shape=(n_orig, n_c))
    return AsaForm(Qmat=Qmat, offset=offset, Rtensor=R, Stensor=S, square_weights=weights,
                   retriever=retriever, n_c=n_c, m_eq=m_eq, m_ineq=m_ineq, p=p,
                   variables=problem.variables, parameter_order=problem.parameter_order)


def theta_from_values(form_or_problem, values):
    """Flatten a ``{name: array}`` binding in parameter order."""
    parts = []
    for name, shape in form_or_problem.parameter_order:
        if name not in values:
            raise MissingParameterValue(f"no value bound for parameter {name!r}")
        v = np.asarray(values[name], dtype=float)
        if v.size != math.prod(shape):
            raise DimensionMismatch(f"parameter {name!r} needs {math.prod(shape)} values, "
                                    f"got {v.size}")
        parts.append(v.reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0)


# -- forward and backward ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class SolveRecord:
    theta_tilde: np.ndarray
    problem: object
    solution: object
    square_factor: np.ndarray

    @property
    def status(self):
        return self.solution.status


def asa_forward(f: AsaForm, theta, cfg: SolverConfig = SolverConfig()):
    """Solve the instantiated canonical QP and retrieve the original variables.

    A solver failure is reported through ``record.status`` with NaN output.
    """
    tt = f.theta_tilde(theta)
    qp = validate_problem(f.instantiate(theta))
    sol = solve_qp(qp, cfg)
    x = f.retrieve(sol.z_star) if sol.status is Status.OPTIMAL else np.full(f.n_original, np.nan)
    return x, SolveRecord(tt, qp, sol, f.Stensor.contract(tt))


def _tensor_adjoint(T: SparseTensor, G):
    """``g_l = <T[:, :, l], G>`` for every slice ``l``."""
    m = T.mat.tocoo()
    s, j = np.divmod(m.col, T.width)
    return np.bincount(s, weights=m.data * G[m.row, j], minlength=T.slices)


def asa_vjp(f: AsaForm, record: SolveRecord, dl_dx, cfg=SolverConfig()):
    """``(grad_theta, diff_triple)``; no canonicalization happens here."""
    if record.status is not Status.OPTIMAL:
        raise ValueError(f"forward solve did not succeed: {record.status.value}")
    dl_dx = np.asarray(dl_dx, dtype=float).reshape(-1)
    if dl_dx.size != f.n_original:
        raise DimensionMismatch(f"dl_dx has length {dl_dx.size}, expected {f.n_original}")
    dl_dz = np.asarray(f.retriever.T @ dl_dx).reshape(-1)
    grads, d = qp_backward(record.problem, record.solution, dl_dz, cfg)
    n = f.n_c
    g = np.asarray(f.Qmat.T @ grads.gq).reshape(-1)
    GAb = np.vstack([np.hstack([grads.gA, grads.gb[:, None]]),
                     np.hstack([grads.gG, grads.gh[:, None]])])
    g = g + _tensor_adjoint(f.Rtensor, GAb)
    if f.Stensor.rows:
        Ff = record.square_factor
        F, fv = Ff[:, :n], Ff[:, n]
        w2 = 2.0 * f.square_weights
        gF = (w2[:, None] * F) @ (grads.gP + grads.gP.T) + np.outer(w2 * fv, grads.gq)
        gf = w2 * (F @ grads.gq)
        g = g + _tensor_adjoint(f.Stensor, np.hstack([gF, gf[:, None]]))
    return g[:f.p], d


def asa_backward(f: AsaForm, record: SolveRecord, dl_dx, cfg=SolverConfig()):
    """Gradient of the loss with respect to theta.

    Emits ``DegenerateGradientWarning`` when the canonical solution is degenerate.
    """
    g, d = asa_vjp(f, record, dl_dx, cfg)
    if d.heuristic:
        warnings.warn(f"degenerate constraint rows {list(d.degenerate_rows)}; gradient is "
                      "heuristic", DegenerateGradientWarning, stacklevel=2)
    return g
