import numpy as np
import pytest

from riccati_ipm import problems as P
from riccati_ipm.model import Iterate, OcpProblem, Stage, TerminalCost, evaluate_trajectory
from riccati_ipm.oracle import (DenseKkt, SingularKktError, assemble_dense, dense_barrier_solve,
                                dense_solve, split_solution)
from riccati_ipm.problems import linear_constraint, linear_dynamics, quadratic_cost
from riccati_ipm.riccati import project_stages, solve_lq
from riccati_ipm.verify import sample_case, step_error

from conftest import scalar_lqr
from naive import rel


def test_smallest_system_pattern():
    pb = scalar_lqr(N=1)
    lqs, term = evaluate_trajectory(pb, Iterate.initial(pb))
    kkt = assemble_dense(lqs, term)
    assert kkt.n == 3
    # rows/cols (du, dy, dlam_f): [[R, 0, f_u], [0, P, f_y], [f_u, f_y, 0]]
    assert np.array_equal(kkt.matrix, np.array([[1.0, 0, 1], [0, 1, -1], [1, -1, 0]]))


def test_one_inequality_adds_two_rows():
    base = scalar_lqr(N=1)
    st = Stage(1, 1, 1, base.stages[0].cost, base.stages[0].dynamics,
               ineq_xu=linear_constraint(np.zeros((1, 1)), np.ones((1, 1)), -np.ones(1)),
               npsi=1)
    pb = OcpProblem(base.x0, [st], base.terminal)
    lqs, term = evaluate_trajectory(pb, Iterate.initial(pb))
    t, nu = np.array([0.7]), np.array([1.3])
    kkt = assemble_dense(lqs, term, [t], [nu], rho=1e-8)
    assert kkt.n == 5
    inu, it = kkt.index[(0, "nu")], kkt.index[(0, "t")]
    assert kkt.matrix[it, inu][0, 0] == 0.7 and kkt.matrix[it, it][0, 0] == 1.3
    assert kkt.matrix[inu, inu][0, 0] == -1e-8 and kkt.matrix[inu, it][0, 0] == 1.0


def test_structured_matches_dense_on_n6(rng):
    for _ in range(5):
        case = sample_case(rng, max_N=6)
        assert step_error(case) <= 1e-7


def test_identity_system():
    b = np.arange(4.0)
    sol = dense_solve(DenseKkt(np.eye(4), b, {}))
    assert np.array_equal(sol.x, b) and not sol.singular


def test_saddle_system_residual(rng):
    n, m = 6, 2
    M = rng.standard_normal((n, n))
    H = M @ M.T + np.eye(n)
    A = rng.standard_normal((m, n))
    K = np.block([[H, A.T], [A, np.zeros((m, m))]])
    b = rng.standard_normal(n + m)
    sol = dense_solve(DenseKkt(K, b, {}))
    assert sol.residual <= 1e-10 * max(np.abs(K).max(), np.abs(b).max())


def test_rank_deficient_fallback_flagged():
    K = np.array([[1.0, 0, 1, 1], [0, 1, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0]])
    b = np.array([1.0, 0, 1, 1])
    sol = dense_solve(DenseKkt(K, b, {}))
    assert sol.singular
    assert np.allclose(sol.x, np.linalg.pinv(K) @ b)
    with pytest.raises(SingularKktError):
        dense_solve(DenseKkt(K, b, {}), allow_lstsq=False)


def test_barrier_reference_bound_qp():
    # min 0.5 u^2 s.t. u >= 0.5, y = u
    st = Stage(1, 1, 1, quadratic_cost([[0.0]], [[1.0]]), linear_dynamics([[0.0]], [[1.0]]),
               ineq_xu=linear_constraint(np.zeros((1, 1)), -np.ones((1, 1)), [0.5]), npsi=1)
    pb = OcpProblem(np.zeros(1), [st], TerminalCost(1, P.terminal_quadratic([[0.0]])))
    ref = dense_barrier_solve(pb)
    assert ref.converged
    assert ref.iterate.us[0][0] == pytest.approx(0.5, abs=1e-8)
    assert ref.iterate.nus[0][0] == pytest.approx(0.5, abs=1e-8)


def test_barrier_reference_unconstrained_is_newton_step(rng):
    pb = P.lq_random(21, N=4, nx=2, nu=2, nc=1)
    ref = dense_barrier_solve(pb)
    it = Iterate.initial(pb)
    lqs, term = evaluate_trajectory(pb, it)
    kkt = assemble_dense(lqs, term)
    ds = split_solution(kkt, dense_solve(kkt).x, pb.x0.size)
    assert ref.iterations == 1
    assert rel(np.concatenate(ref.iterate.us), np.concatenate(ds.du)) <= 1e-9
    # and the structured step agrees too
    _, step = solve_lq(lqs, project_stages(lqs), term)
    assert rel(np.concatenate(step.du), np.concatenate(ds.du)) <= 1e-9


def test_barrier_reference_size_limit():
    with pytest.raises(ValueError):
        dense_barrier_solve(P.double_integrator(seed=0, N=120))
