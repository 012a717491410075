import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from generators import random_dpp_problem
from optlayer.errors import ShapeError, UnknownCurvature
from optlayer.expr import (
    Curvature, Parameter, Variable, add, const, curvature_of, evaluate, index, inner,
    make_problem, matvec, max_elementwise, neg, norm1, quad_over_identity, smul, sub, sum_,
    sum_squares, verify_dpp,
)

x = Variable("x", 3)
y = Variable("y", 3)
th = Parameter("th", (1,))
th2 = Parameter("th2", (1,))
M = Parameter("M", (2, 3))


def curv(e, mode="dpp"):
    return curvature_of(e, mode).curvature


# -- curvature examples --

def test_sum_squares_of_variable_is_convex():
    assert curv(sum_squares(x)) is Curvature.CONVEX


def test_parameter_times_variable_is_affine():
    assert curv(smul(th, x)) is Curvature.AFFINE
    assert curv(matvec(M, x)) is Curvature.AFFINE


def test_parameter_times_parameter_violates_dpp_with_path():
    e = add(x, smul(th, smul(th2, x)))
    with pytest.raises(UnknownCurvature) as info:
        curvature_of(e)
    assert info.value.path == ("add[1]",)
    # the same tree is fine when parameters are constants
    assert curv(e, "dcp") is Curvature.AFFINE


def test_parameter_product_without_variables_violates_dpp():
    with pytest.raises(UnknownCurvature):
        curvature_of(smul(th, th2))
    assert curv(smul(th, th2), "dcp") is Curvature.CONSTANT


def test_leaf_tags():
    assert curv(x) is Curvature.AFFINE
    assert curv(th) is Curvature.PARAMETER_AFFINE
    assert curv(th, "dcp") is Curvature.CONSTANT
    assert curv(const([1.0, 2.0])) is Curvature.CONSTANT


def test_negation_flips_convexity():
    assert curv(neg(sum_squares(x))) is Curvature.CONCAVE
    assert curv(neg(neg(norm1(x)))) is Curvature.CONVEX


def test_constant_scaling_sign():
    assert curv(smul(const([2.0]), norm1(x))) is Curvature.CONVEX
    assert curv(smul(const([-2.0]), norm1(x))) is Curvature.CONCAVE
    with pytest.raises(UnknownCurvature):
        curvature_of(smul(th, norm1(x)))


def test_convex_plus_concave_is_unknown():
    with pytest.raises(UnknownCurvature):
        curvature_of(add(sum_squares(x), neg(norm1(y))))


def test_convex_atom_composition():
    # max is nondecreasing so a convex argument keeps it convex
    assert curv(max_elementwise(norm1(x), sum_squares(y))) is Curvature.CONVEX
    with pytest.raises(UnknownCurvature) as info:
        curvature_of(norm1(neg(sum_squares(x))))
    assert info.value.path == ("norm1[0]",)
    with pytest.raises(UnknownCurvature):
        curvature_of(sum_squares(norm1(x)))


def test_variable_times_variable_is_unknown():
    with pytest.raises(UnknownCurvature):
        curvature_of(inner(x, y))


def test_nonlinear_atom_of_parameters_is_rejected():
    with pytest.raises(UnknownCurvature):
        curvature_of(add(sum_squares(x), norm1(th)))


def test_shape_errors():
    with pytest.raises(ShapeError):
        add(x, Variable("z", 2))
    with pytest.raises(ShapeError):
        matvec(M, Variable("z", 2))


def test_evaluate_atoms():
    vals = {"x": np.array([1.0, -2.0, 3.0]), "th": np.array([0.5])}
    assert evaluate(sum_squares(x), vals)[0] == pytest.approx(14.0)
    assert evaluate(quad_over_identity(x), vals)[0] == pytest.approx(7.0)
    assert evaluate(norm1(x), vals)[0] == pytest.approx(6.0)
    np.testing.assert_allclose(evaluate(smul(th, x), vals), [0.5, -1.0, 1.5])
    np.testing.assert_allclose(evaluate(index(x, 1, 3), vals), [-2.0, 3.0])
    np.testing.assert_allclose(evaluate(max_elementwise(x, const([0.0])), vals), [1, 0, 3])
    assert evaluate(sum_(sub(x, x)), vals)[0] == 0.0


# -- verification examples --

def _qp_listing():
    z = Variable("z", 3)
    Q = Parameter("Q_sqrt", (3, 3))
    q = Parameter("q", (3,))
    A, b = Parameter("A", (1, 3)), Parameter("b", (1,))
    G, h = Parameter("G", (2, 3)), Parameter("h", (2,))
    obj = add(smul(const([0.5]), sum_squares(matvec(Q, z))), inner(q, z))
    return make_problem(obj, [(matvec(A, z), b)], [(matvec(G, z), h)])


def test_dense_qp_listing_verifies():
    report = verify_dpp(_qp_listing())
    assert report.ok and report.violations == ()


def test_concave_objective_is_a_violation():
    report = verify_dpp(make_problem(neg(sum_squares(x))))
    assert not report.ok
    assert report.violations[0].path == "objective"


def test_nonaffine_equality_is_a_violation():
    p = make_problem(sum_(x), eq=[(sum_squares(x), const([1.0]))])
    report = verify_dpp(p)
    assert not report.ok
    assert [v.path for v in report.violations] == ["eq[0].lhs"]


def test_every_violation_is_reported():
    p = make_problem(neg(sum_squares(x)), eq=[(sum_squares(x), const([1.0]))],
                     ineq=[(x, smul(th, smul(th2, y)))])
    report = verify_dpp(p)
    paths = [v.path for v in report.violations]
    assert paths[0] == "objective"
    assert "eq[0].lhs" in paths
    assert any(path.startswith("ineq[0].rhs") for path in paths)


def test_concave_upper_bound_is_allowed():
    p = make_problem(sum_squares(x), ineq=[(norm1(x), add(const([3.0]), neg(norm1(y))))])
    assert verify_dpp(p).ok
    p = make_problem(sum_squares(x), ineq=[(norm1(x), sum_squares(y))])
    assert [v.path for v in verify_dpp(p).violations] == ["ineq[0].rhs"]


def test_quadratic_constraint_verifies_but_is_not_qp_representable():
    from optlayer.canon import canonicalize
    from optlayer.errors import UnsupportedAtom
    good = make_problem(sum_squares(x), ineq=[(norm1(x), add(const([3.0]), neg(norm1(y))))])
    assert canonicalize(good).m_ineq > 0
    p = make_problem(sum_squares(x), ineq=[(sum_squares(x), const([1.0]))])
    assert verify_dpp(p).ok
    with pytest.raises(UnsupportedAtom):
        canonicalize(p)


def test_undeclared_or_misdeclared_leaves_raise():
    from optlayer.errors import ExprError
    with pytest.raises(ExprError):
        make_problem(sum_squares(x), variables=[("x", 2)])
    with pytest.raises(ExprError):
        make_problem(sum_squares(x), variables=[("x", 3)], parameters=[("x", (1,))])


def test_objective_must_be_scalar():
    with pytest.raises(ShapeError):
        make_problem(x)


# -- DPP implies DCP --

@settings(max_examples=100)
@given(st.integers(0, 10_000))
def test_dpp_verified_implies_dcp_verified(seed):
    p, _ = random_dpp_problem(seed)
    assert verify_dpp(p).ok
    assert verify_dpp(p, mode="dcp").ok


def test_dcp_does_not_imply_dpp():
    p = make_problem(sum_squares(smul(th, smul(th2, x))))
    assert verify_dpp(p, mode="dcp").ok
    assert not verify_dpp(p).ok


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        curvature_of(x, mode="other")
