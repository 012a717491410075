import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from optlayer import QpProblem, SolverConfig, Status, kkt_residuals, solve_batch, solve_qp, \
    validate_problem
from optlayer.errors import DimensionMismatch, NotPsd, RankDeficientEquality
from optlayer.problems import random_complementary_qp, random_dims, random_feasible_qp

from oracles import qp_active_set_oracle


def _oracle(p):
    return qp_active_set_oracle(p.P, p.q, p.A, p.b, p.G, p.h)


class TestValidate:
    def test_identity_ok(self):
        p = validate_problem(QpProblem(P=np.eye(2), q=np.zeros(2)))
        assert p.dims == (2, 0, 0)

    def test_symmetrized_then_not_psd(self):
        with pytest.raises(NotPsd):
            validate_problem(QpProblem(P=[[0, 1], [0, 0]], q=[0, 0]))

    def test_symmetrization(self):
        p = validate_problem(QpProblem(P=[[1, 1], [0, 1]], q=[0, 0]))
        np.testing.assert_array_equal(p.P, [[1, 0.5], [0.5, 1]])

    def test_rank_deficient_equality(self):
        with pytest.raises(RankDeficientEquality):
            validate_problem(QpProblem(P=np.eye(2), q=[0, 0], A=[[1, 0], [2, 0]], b=[0, 0]))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            validate_problem(QpProblem(P=np.eye(2), q=[0, 0, 0]))
        with pytest.raises(DimensionMismatch):
            validate_problem(QpProblem(P=np.eye(2), q=[0, 0], G=[[1, 0]], h=[1, 2]))

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            SolverConfig(tol=0)
        with pytest.raises(ValueError):
            SolverConfig(max_iter=0)
        with pytest.raises(ValueError):
            SolverConfig(kkt_reg=-1)


class TestSolve:
    def test_unconstrained(self):
        s = solve_qp(validate_problem(QpProblem(P=np.eye(2), q=[-1, -2])))
        assert s.status is Status.OPTIMAL
        np.testing.assert_allclose(s.z_star, [1, 2], atol=1e-12)

    def test_active_bound(self):
        s = solve_qp(validate_problem(QpProblem(P=[[1.0]], q=[0.0], G=[[-1.0]], h=[-1.0])))
        assert s.status is Status.OPTIMAL
        np.testing.assert_allclose(s.z_star, [1.0], atol=1e-9)
        np.testing.assert_allclose(s.lambda_star, [1.0], atol=1e-9)
        np.testing.assert_allclose(s.slack, [0.0], atol=1e-9)

    def test_seeded_matches_oracle(self):
        rng = np.random.default_rng(4)
        p = random_feasible_qp(rng, 4, 1, 3)
        s = solve_qp(p)
        z, obj = _oracle(p)
        np.testing.assert_allclose(s.z_star, z, atol=1e-6)
        assert abs(p.objective(s.z_star) - obj) <= 1e-6

    def test_infeasible(self):
        p = validate_problem(QpProblem(P=[[1.0]], q=[0.0], G=[[1.0], [-1.0]], h=[0.0, -1.0]))
        s = solve_qp(p)
        assert s.status in (Status.INFEASIBLE, Status.MAX_ITERATIONS)

    def test_singular_unconstrained(self):
        bad = solve_qp(validate_problem(QpProblem(P=[[1.0, 0], [0, 0]], q=[0.0, 1.0])))
        assert bad.status is Status.NUMERICAL_FAILURE
        ok = solve_qp(validate_problem(QpProblem(P=[[1.0, 0], [0, 0]], q=[-1.0, 0.0])))
        assert ok.status is Status.OPTIMAL
        np.testing.assert_allclose(ok.z_star[0], 1.0)

    def test_equality_only(self):
        p = validate_problem(QpProblem(P=np.eye(2), q=[0, 0], A=[[1, 1]], b=[2]))
        np.testing.assert_allclose(solve_qp(p).z_star, [1, 1], atol=1e-12)

    def test_factor_cached(self):
        rng = np.random.default_rng(0)
        s = solve_qp(random_feasible_qp(rng, 5, 1, 4))
        assert s.kkt_factor is not None


class TestResiduals:
    def test_exact_optimum(self):
        p = validate_problem(QpProblem(P=[[1.0]], q=[0.0], G=[[-1.0]], h=[-1.0]))
        s = solve_qp(p)
        exact = type(s)(**{**s.__dict__, "z_star": np.array([1.0]),
                           "lambda_star": np.array([1.0]), "slack": np.array([0.0])})
        assert kkt_residuals(p, exact).max() <= 1e-12

    def test_perturbed(self):
        rng = np.random.default_rng(1)
        p = random_feasible_qp(rng, 4, 0, 0)
        s = solve_qp(p)
        moved = type(s)(**{**s.__dict__, "z_star": s.z_star + 1e-3})
        r = kkt_residuals(p, moved).stationarity
        assert 0 < r <= np.abs(p.P).sum(axis=1).max() * 1e-3 + 1e-12

    def test_equality_residual_exact(self):
        p = validate_problem(QpProblem(P=np.eye(2), q=[0, 0], A=[[1, 2]], b=[1]))
        s = solve_qp(p)
        moved = type(s)(**{**s.__dict__, "z_star": np.array([3.0, 4.0])})
        assert kkt_residuals(p, moved).equality == abs(3 + 8 - 1)

    def test_dimension_mismatch(self):
        p = validate_problem(QpProblem(P=np.eye(2), q=[0, 0]))
        s = solve_qp(validate_problem(QpProblem(P=np.eye(3), q=[0, 0, 0])))
        with pytest.raises(DimensionMismatch):
            kkt_residuals(p, s)


@st.composite
def feasible_qps(draw, max_n=6):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    n, n_eq, n_ineq = random_dims(rng, max_n=max_n)
    return random_feasible_qp(rng, n, n_eq, n_ineq)


class TestProperties:
    @given(feasible_qps())
    def test_kkt_holds(self, p):
        s = solve_qp(p)
        assert s.status is Status.OPTIMAL
        assert kkt_residuals(p, s).max() <= 1e-6
        assert np.all(s.lambda_star >= -1e-8) and np.all(s.slack >= -1e-8)

    @given(feasible_qps())
    def test_not_worse_than_oracle(self, p):
        s = solve_qp(p)
        _, obj = _oracle(p)
        assert p.objective(s.z_star) <= obj + 1e-8

    @given(feasible_qps(), st.floats(0.1, 10.0))
    def test_equality_row_scaling(self, p, c):
        if p.n_eq == 0:
            return
        A, b = np.array(p.A), np.array(p.b)
        A[0] *= c
        b[0] *= c
        s0, s1 = solve_qp(p), solve_qp(p.replace(A=A, b=b))
        np.testing.assert_allclose(s1.z_star, s0.z_star, atol=1e-8)
        np.testing.assert_allclose(s1.nu_star[0], s0.nu_star[0] / c, atol=1e-7, rtol=1e-7)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=10)
    def test_complementary_instance(self, seed):
        rng = np.random.default_rng(seed)
        p, (z, nu, lam) = random_complementary_qp(rng, 5, 2, 3)
        s = solve_qp(p)
        np.testing.assert_allclose(s.z_star, z, atol=1e-7)
        np.testing.assert_allclose(s.lambda_star, lam, atol=1e-7)


class TestBatch:
    def test_singleton(self):
        p = random_feasible_qp(np.random.default_rng(2), 4, 1, 2)
        (b,) = solve_batch([p])
        np.testing.assert_array_equal(b.z_star, solve_qp(p).z_star)

    def test_copies(self):
        p = random_feasible_qp(np.random.default_rng(3), 4, 1, 2)
        out = solve_batch([p] * 8, threads=4)
        for s in out:
            np.testing.assert_array_equal(s.z_star, out[0].z_star)

    @pytest.mark.parametrize("threads", [1, 2, 4])
    def test_bitwise_sequential(self, threads):
        rng = np.random.default_rng(5)
        ps = [random_feasible_qp(rng, 5, 1, 3) for _ in range(16)]
        seq = [solve_qp(p) for p in ps]
        par = solve_batch(ps, threads=threads)
        for a, b in zip(seq, par):
            assert a.z_star.tobytes() == b.z_star.tobytes()
            assert a.lambda_star.tobytes() == b.lambda_star.tobytes()

    def test_env_threads(self, monkeypatch):
        monkeypatch.setenv("OPTLAYER_THREADS", "3")
        from optlayer.qp import batch_threads
        assert batch_threads() == 3

    def test_shared_dims_required(self):
        ps = [validate_problem(QpProblem(P=np.eye(2), q=[0, 0])),
              validate_problem(QpProblem(P=np.eye(3), q=[0, 0, 0]))]
        with pytest.raises(DimensionMismatch):
            solve_batch(ps)

    def test_failure_does_not_abort(self):
        G = [[1.0], [-1.0]]
        good = validate_problem(QpProblem(P=[[1.0]], q=[0.0], G=G, h=[1.0, 1.0]))
        bad = validate_problem(QpProblem(P=[[1.0]], q=[0.0], G=G, h=[0.0, -1.0]))
        out = solve_batch([good, bad, good])
        assert out[0].status is Status.OPTIMAL and out[2].status is Status.OPTIMAL
        assert out[1].status is not Status.OPTIMAL
