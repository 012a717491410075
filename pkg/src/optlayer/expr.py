"""Expression trees for parametrized convex programs and their curvature analysis.

Nodes are immutable dataclasses compared structurally. Every node knows its
shape: vectors are ``(d,)``, scalars are ``(1,)``, and matrices ``(r, c)``
appear only as the left operand of ``mat_vec_mul``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ExprError, ShapeError, UnknownCurvature

LINEAR_ATOMS = ("add", "negate", "sum", "affine_index")
PRODUCT_ATOMS = ("scalar_mul", "mat_vec_mul", "inner_product")
CONVEX_ATOMS = ("sum_squares", "quad_over_identity", "norm1", "max_elementwise")
SQUARE_ATOMS = ("sum_squares", "quad_over_identity")
ATOMS = LINEAR_ATOMS + PRODUCT_ATOMS + CONVEX_ATOMS
ARITY = {
    "add": (2, None), "negate": (1, 1), "sum": (1, 1), "affine_index": (1, 1),
    "scalar_mul": (2, 2), "mat_vec_mul": (2, 2), "inner_product": (2, 2),
    "sum_squares": (1, 1), "quad_over_identity": (1, 1), "norm1": (1, 1),
    "max_elementwise": (1, None),
}
SCALAR = (1,)


def _check_shape(shape):
    if not (1 <= len(shape) <= 2) or any(int(d) < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}")
    return tuple(int(d) for d in shape)


@dataclass(frozen=True)
class Variable:
    id: str
    dim: int

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ShapeError(f"variable {self.id} must have dimension >= 1")

    @property
    def shape(self):
        return (self.dim,)


@dataclass(frozen=True)
class Parameter:
    id: str
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "shape", _check_shape(self.shape))

    @property
    def size(self):
        return math.prod(self.shape)


@dataclass(frozen=True)
class Constant:
    values: tuple
    shape: tuple = SCALAR

    def __post_init__(self):
        shape = _check_shape(self.shape)
        values = tuple(float(v) for v in self.values)
        if len(values) != math.prod(shape):
            raise ShapeError(f"{len(values)} values do not fill shape {shape}")
        if not all(math.isfinite(v) for v in values):
            raise ExprError("constants must be finite")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)

    def array(self):
        return np.array(self.values).reshape(self.shape)


@dataclass(frozen=True)
class Atom:
    name: str
    args: tuple
    index: tuple = ()
    shape: tuple = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if self.name not in ARITY:
            raise ExprError(f"unknown atom {self.name!r}")
        object.__setattr__(self, "args", tuple(self.args))
        lo, hi = ARITY[self.name]
        if len(self.args) < lo or (hi is not None and len(self.args) > hi):
            raise ExprError(f"{self.name} takes {lo if lo == hi else f'at least {lo}'} "
                            f"arguments, got {len(self.args)}")
        object.__setattr__(self, "shape", _infer_shape(self))


ExprNode = Union[Variable, Parameter, Constant, Atom]


def _vector_dim(e, who):
    if len(e.shape) != 1:
        raise ShapeError(f"{who} expects a vector, got shape {e.shape}")
    return e.shape[0]


def _broadcast(args, who):
    dims = {_vector_dim(a, who) for a in args}
    dims.discard(1)
    if len(dims) > 1:
        raise ShapeError(f"{who}: incompatible dimensions {sorted(dims)}")
    return (dims.pop(),) if dims else SCALAR


def _infer_shape(a: Atom):
    name, args = a.name, a.args
    if a.index and name != "affine_index":
        raise ExprError(f"{name} takes no index")
    if name in ("add", "max_elementwise"):
        return _broadcast(args, name)
    if name == "negate":
        return (_vector_dim(args[0], name),)
    if name == "scalar_mul":
        if args[0].shape != SCALAR:
            raise ShapeError(f"scalar_mul needs a scalar first operand, got {args[0].shape}")
        return (_vector_dim(args[1], name),)
    if name == "mat_vec_mul":
        M, v = args
        if len(M.shape) != 2 or not isinstance(M, (Parameter, Constant)):
            raise ShapeError("mat_vec_mul needs a matrix parameter or constant on the left")
        if _vector_dim(v, name) != M.shape[1]:
            raise ShapeError(f"cannot multiply {M.shape} matrix by vector of length {v.shape[0]}")
        return (M.shape[0],)
    if name == "inner_product":
        if _vector_dim(args[0], name) != _vector_dim(args[1], name):
            raise ShapeError(f"inner_product of lengths {args[0].shape[0]} and {args[1].shape[0]}")
        return SCALAR
    if name == "affine_index":
        d = _vector_dim(args[0], name)
        if len(a.index) != 2:
            raise ExprError("affine_index needs (start, stop)")
        start, stop = a.index
        if not (isinstance(start, int) and isinstance(stop, int) and 0 <= start < stop <= d):
            raise ShapeError(f"index [{start}:{stop}] out of range for length {d}")
        return (stop - start,)
    _vector_dim(args[0], name)
    return SCALAR


# -- constructors ------------------------------------------------------------

def const(values, shape=None):
    arr = np.asarray(values, dtype=float)
    if shape is None:
        shape = SCALAR if arr.ndim == 0 else arr.shape
    return Constant(tuple(arr.reshape(-1).tolist()), tuple(shape))


def add(*args):
    return Atom("add", args)


def neg(a):
    return Atom("negate", (a,))


def sub(a, b):
    return add(a, neg(b))


def smul(s, e):
    return Atom("scalar_mul", (s, e))


def matvec(M, v):
    return Atom("mat_vec_mul", (M, v))


def inner(a, b):
    return Atom("inner_product", (a, b))


def sum_(a):
    return Atom("sum", (a,))


def sum_squares(a):
    return Atom("sum_squares", (a,))


def quad_over_identity(a):
    return Atom("quad_over_identity", (a,))


def norm1(a):
    return Atom("norm1", (a,))


def max_elementwise(*args):
    return Atom("max_elementwise", args)


def index(a, start, stop=None):
    return Atom("affine_index", (a,), (int(start), int(start) + 1 if stop is None else int(stop)))


# -- traversal ---------------------------------------------------------------

def children(e):
    return e.args if isinstance(e, Atom) else ()


def leaves(e):
    """Variables and parameters of ``e`` in first-appearance (preorder) order."""
    seen, out, stack = set(), [], [e]
    while stack:
        node = stack.pop()
        if isinstance(node, (Variable, Parameter)):
            if node not in seen:
                seen.add(node)
                out.append(node)
        stack.extend(reversed(children(node)))
    return out


def depth(e):
    best, stack = 0, [(e, 1)]
    while stack:
        node, d = stack.pop()
        best = max(best, d)
        stack.extend((c, d + 1) for c in children(node))
    return best


def evaluate(e, values):
    """Numeric value of ``e`` given arrays for every variable and parameter id."""
    if isinstance(e, (Variable, Parameter)):
        try:
            v = np.asarray(values[e.id], dtype=float)
        except KeyError:
            raise ExprError(f"no value for {e.id!r}") from None
        return v.reshape(e.shape)
    if isinstance(e, Constant):
        return e.array()
    a = [evaluate(c, values) for c in e.args]
    name = e.name
    if name == "add":
        return np.sum(np.broadcast_arrays(*a), axis=0)
    if name == "negate":
        return -a[0]
    if name == "scalar_mul":
        return a[0][0] * a[1]
    if name == "mat_vec_mul":
        return a[0] @ a[1]
    if name == "inner_product":
        return np.array([a[0] @ a[1]])
    if name == "sum":
        return np.array([a[0].sum()])
    if name == "affine_index":
        return a[0][e.index[0]:e.index[1]]
    if name == "sum_squares":
        return np.array([a[0] @ a[0]])
    if name == "quad_over_identity":
        return np.array([0.5 * (a[0] @ a[0])])
    if name == "norm1":
        return np.array([np.abs(a[0]).sum()])
    if name == "max_elementwise":
        return np.max(np.broadcast_arrays(*a), axis=0)
    raise ExprError(f"unknown atom {name!r}")


# -- curvature ---------------------------------------------------------------

class Curvature(enum.Enum):
    CONSTANT = "Constant"
    PARAMETER_AFFINE = "ParameterAffine"
    AFFINE = "Affine"
    CONVEX = "Convex"
    CONCAVE = "Concave"
    UNKNOWN = "Unknown"

    @property
    def is_affine(self):
        return self in (Curvature.CONSTANT, Curvature.PARAMETER_AFFINE, Curvature.AFFINE)

    @property
    def is_convex(self):
        return self.is_affine or self is Curvature.CONVEX

    @property
    def is_concave(self):
        return self.is_affine or self is Curvature.CONCAVE


class Monotonicity(enum.Enum):
    NONDECREASING = "Nondecreasing"
    NONINCREASING = "Nonincreasing"
    NONE = "None"


@dataclass(frozen=True)
class CurvatureTag:
    curvature: Curvature
    monotonicity: tuple = ()
    has_parameters: bool = False

    @property
    def has_variables(self):
        return self.curvature not in (Curvature.CONSTANT, Curvature.PARAMETER_AFFINE)


MODES = ("dpp", "dcp")
_INC, _DEC, _NONE = Monotonicity.NONDECREASING, Monotonicity.NONINCREASING, Monotonicity.NONE


def _monotonicity(e):
    n = len(e.args)
    if e.name == "negate":
        return (_DEC,)
    if e.name in ("add", "sum", "affine_index", "max_elementwise"):
        return (_INC,) * n
    return (_NONE,) * n


def _join_affine(tags):
    order = [Curvature.CONSTANT, Curvature.PARAMETER_AFFINE, Curvature.AFFINE]
    return max((t.curvature for t in tags), key=order.index)


def _linear(tags):
    curvs = {t.curvature for t in tags}
    convex = Curvature.CONVEX in curvs
    concave = Curvature.CONCAVE in curvs
    if convex and concave:
        return Curvature.UNKNOWN
    if convex:
        return Curvature.CONVEX
    if concave:
        return Curvature.CONCAVE
    return _join_affine(tags)


def _constant_sign(e):
    """+1, -1 or 0 (unknown) for a variable- and parameter-free scalar expression."""
    v = evaluate(e, {})
    if np.all(v >= 0):
        return 1
    if np.all(v <= 0):
        return -1
    return 0


def _fail(message, path):
    raise UnknownCurvature(f"{message} at {'/'.join(path) or '<root>'}", path)


def _product(e, tags, mode, path):
    a_tag, b_tag = tags
    va, vb = a_tag.has_variables, b_tag.has_variables
    pa, pb = a_tag.has_parameters, b_tag.has_parameters
    has_params = pa or pb
    if va and vb:
        _fail(f"{e.name} of two variable expressions is not convex", path)
    if not va and not vb:
        if mode == "dpp" and pa and pb:
            _fail(f"{e.name} of two parameter expressions violates DPP", path)
        curv = Curvature.PARAMETER_AFFINE if has_params else Curvature.CONSTANT
        return CurvatureTag(curv, _monotonicity(e), has_params)
    # exactly one side carries variables
    free, free_tag, other_tag = (e.args[0], a_tag, b_tag) if vb else (e.args[1], b_tag, a_tag)
    if other_tag.curvature.is_affine:
        if mode == "dpp" and free_tag.has_parameters and other_tag.has_parameters:
            _fail(f"{e.name}: parameter-affine factor times parameter-dependent "
                  "variable expression violates DPP", path)
        return CurvatureTag(Curvature.AFFINE, _monotonicity(e), has_params)
    # convex or concave operand: only a constant scalar of known sign preserves curvature
    if e.name == "scalar_mul" and free is e.args[0] and free_tag.curvature is Curvature.CONSTANT:
        sign = _constant_sign(free)
        if sign:
            curv = other_tag.curvature
            if sign < 0:
                curv = Curvature.CONCAVE if curv is Curvature.CONVEX else Curvature.CONVEX
            return CurvatureTag(curv, _monotonicity(e), has_params)
    _fail(f"{e.name} with a {other_tag.curvature.value.lower()} operand has unknown curvature",
          path)


def curvature_of(e, mode="dpp", path=()) -> CurvatureTag:
    """Bottom-up curvature by the disciplined composition rules.

    In ``"dcp"`` mode parameters are treated as constants; in ``"dpp"`` mode a
    product needs one parameter-free factor. Raises ``UnknownCurvature`` with
    the path of the offending subtree.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    path = tuple(path)
    if isinstance(e, Variable):
        return CurvatureTag(Curvature.AFFINE)
    if isinstance(e, Parameter):
        if mode == "dcp":
            return CurvatureTag(Curvature.CONSTANT)
        return CurvatureTag(Curvature.PARAMETER_AFFINE, (), True)
    if isinstance(e, Constant):
        return CurvatureTag(Curvature.CONSTANT)

    tags = [curvature_of(c, mode, path + (f"{e.name}[{i}]",)) for i, c in enumerate(e.args)]
    has_params = any(t.has_parameters for t in tags)
    mono = _monotonicity(e)
    name = e.name
    if name in PRODUCT_ATOMS:
        return _product(e, tags, mode, path)
    if name in ("add", "sum", "affine_index"):
        curv = _linear(tags)
        if curv is Curvature.UNKNOWN:
            _fail("sum of convex and concave terms", path)
        return CurvatureTag(curv, mono, has_params)
    if name == "negate":
        curv = {Curvature.CONVEX: Curvature.CONCAVE,
                Curvature.CONCAVE: Curvature.CONVEX}.get(tags[0].curvature, tags[0].curvature)
        return CurvatureTag(curv, mono, has_params)
    # convex atoms
    for i, (t, m) in enumerate(zip(tags, mono)):
        ok = t.curvature.is_affine or (m is _INC and t.curvature is Curvature.CONVEX) \
            or (m is _DEC and t.curvature is Curvature.CONCAVE)
        if not ok:
            _fail(f"{name} of a {t.curvature.value.lower()} argument", path + (f"{name}[{i}]",))
    if not any(t.has_variables for t in tags):
        if has_params:
            _fail(f"{name} of a parameter expression is not parameter-affine", path)
        return CurvatureTag(Curvature.CONSTANT, mono)
    return CurvatureTag(Curvature.CONVEX, mono, has_params)


# -- problems ----------------------------------------------------------------

@dataclass(frozen=True)
class DppProblem:
    """``minimize objective`` subject to ``lhs == rhs`` and ``lhs <= rhs`` pairs.

    ``variables`` and ``parameter_order`` fix the layout of the stacked
    variable vector and of ``theta``; declared entries need not all be used.
    """

    objective: ExprNode
    eq_constraints: tuple = ()
    ineq_constraints: tuple = ()
    variables: tuple = ()
    parameter_order: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "eq_constraints", tuple(tuple(c) for c in self.eq_constraints))
        object.__setattr__(self, "ineq_constraints",
                           tuple(tuple(c) for c in self.ineq_constraints))
        object.__setattr__(self, "variables",
                           tuple((str(i), int(d)) for i, d in self.variables))
        object.__setattr__(self, "parameter_order",
                           tuple((str(i), tuple(int(s) for s in sh)) for i, sh in self.parameter_order))
        if self.objective.shape != SCALAR:
            raise ShapeError(f"objective must be scalar, got shape {self.objective.shape}")
        var_dims = dict(self.variables)
        par_dims = dict(self.parameter_order)
        if len(var_dims) != len(self.variables) or len(par_dims) != len(self.parameter_order):
            raise ExprError("duplicate declaration")
        if set(var_dims) & set(par_dims):
            raise ExprError("a name is declared as both variable and parameter")
        for lhs, rhs in self.eq_constraints + self.ineq_constraints:
            _broadcast((lhs, rhs), "constraint")
        for leaf in self.leaves():
            if isinstance(leaf, Variable):
                if var_dims.get(leaf.id) != leaf.dim:
                    raise ExprError(f"variable {leaf.id!r} is not declared with dimension {leaf.dim}")
            elif par_dims.get(leaf.id) != leaf.shape:
                raise ExprError(f"parameter {leaf.id!r} is not declared with shape {leaf.shape}")

    def expressions(self):
        out = [("objective", self.objective)]
        for kind, cons in (("eq", self.eq_constraints), ("ineq", self.ineq_constraints)):
            for i, (lhs, rhs) in enumerate(cons):
                out.append((f"{kind}[{i}].lhs", lhs))
                out.append((f"{kind}[{i}].rhs", rhs))
        return out

    def leaves(self):
        out = []
        for _, e in self.expressions():
            out.extend(x for x in leaves(e) if x not in out)
        return out

    @property
    def n_variables(self):
        return sum(d for _, d in self.variables)

    @property
    def n_parameters(self):
        return sum(math.prod(s) for _, s in self.parameter_order)


def make_problem(objective, eq=(), ineq=(), variables=None, parameters=None):
    """Build a ``DppProblem``, inferring declarations from the trees when omitted."""
    found = []
    for e in [objective] + [x for pair in list(eq) + list(ineq) for x in pair]:
        found.extend(x for x in leaves(e) if x not in found)
    if variables is None:
        variables = [(x.id, x.dim) for x in found if isinstance(x, Variable)]
    if parameters is None:
        parameters = [(x.id, x.shape) for x in found if isinstance(x, Parameter)]
    return DppProblem(objective, tuple(eq), tuple(ineq), tuple(variables), tuple(parameters))


@dataclass(frozen=True)
class Violation:
    path: str
    message: str


@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    violations: tuple = ()
    mode: str = "dpp"


def verify_dpp(p: DppProblem, mode="dpp") -> VerificationReport:
    """Check the program form; every violation is reported, none is raised."""
    violations = []

    def tag(where, e):
        try:
            return curvature_of(e, mode, (where,))
        except UnknownCurvature as exc:
            violations.append(Violation("/".join(exc.path), str(exc)))
            return None

    t = tag("objective", p.objective)
    if t is not None and not t.curvature.is_convex:
        violations.append(Violation("objective", f"minimized objective is {t.curvature.value}"))
    for i, (lhs, rhs) in enumerate(p.eq_constraints):
        for side, e in (("lhs", lhs), ("rhs", rhs)):
            t = tag(f"eq[{i}].{side}", e)
            if t is not None and not t.curvature.is_affine:
                violations.append(Violation(f"eq[{i}].{side}",
                                            f"equality side is {t.curvature.value}, not affine"))
    for i, (lhs, rhs) in enumerate(p.ineq_constraints):
        t = tag(f"ineq[{i}].lhs", lhs)
        if t is not None and not t.curvature.is_convex:
            violations.append(Violation(f"ineq[{i}].lhs", f"left side is {t.curvature.value}"))
        t = tag(f"ineq[{i}].rhs", rhs)
        if t is not None and not t.curvature.is_concave:
            violations.append(Violation(f"ineq[{i}].rhs", f"right side is {t.curvature.value}"))
    return VerificationReport(not violations, tuple(violations), mode)
