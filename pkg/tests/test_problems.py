import numpy as np
import pytest

from riccati_ipm import problems as P
from riccati_ipm.model import Iterate, derivative_check, evaluate_trajectory, validate_problem
from riccati_ipm.solver import SolverSettings, solve


@pytest.mark.parametrize("name", sorted(P.PROBLEMS))
def test_library_problems_are_valid(name):
    pb = P.problem_library(name, seed=4)
    assert validate_problem(pb).ok
    xs, us = pb.initial_guess()
    worst = derivative_check(pb, xs, us, eps=1e-6)
    assert max(worst.values()) <= 1e-5, worst


def test_unknown_problem():
    with pytest.raises(ValueError, match="unknown problem"):
        P.problem_library("ur5")


def test_double_integrator_horizon():
    pb = P.problem_library("double_integrator", N=50, dt=0.02)
    assert pb.N == 50


def test_lq_random_seed_determinism():
    a, b = P.lq_random(0), P.lq_random(0)
    ia, ib = Iterate.initial(a), Iterate.initial(b)
    assert np.array_equal(a.x0, b.x0)
    for la, lb in zip(evaluate_trajectory(a, ia)[0], evaluate_trajectory(b, ib)[0]):
        for f in ("h0", "h_x", "h_u", "h_y", "Q_x", "Q_uu"):
            assert np.array_equal(getattr(la, f), getattr(lb, f))


def test_rank_deficient_variant_duplicates_rows():
    reg = P.unicycle_reach(seed=1)
    rd = P.unicycle_reach(seed=1, rank_deficient=True)
    assert reg.stages[-1].ns < rd.stages[-1].ns
    x = np.array([0.3, -0.2, 0.4])
    s, s_x, s_y = rd.stages[-1].eq_xy(x, x)
    assert np.linalg.matrix_rank(s_y) < rd.stages[-1].ns


def test_rank_deficient_projection_stalls_ipm_converges():
    pb = P.unicycle_reach(seed=3, rank_deficient=True)
    _, proj = solve(pb, settings=SolverSettings(max_iters=30))
    it, ipm = solve(pb, settings=SolverSettings(eq_mode="ipm"))
    assert not proj.converged
    assert ipm.converged
    # the original (boxed) terminal rows hold at the IPM solution
    lqs, _ = evaluate_trajectory(pb, Iterate.initial(pb, it.xs, it.us))
    assert np.abs(lqs[-1].s0).max() <= 1e-3


def test_obstacle_rows_only_in_window():
    pb = P.masspoint_obstacle(seed=0, N=50)
    active = [k for k, st in enumerate(pb.stages) if st.nphi]
    assert 0 < len(active) < pb.N
    assert active == list(range(active[0], active[-1] + 1))


def test_cartpole_reference_reaches_upright():
    xs, us = P.swingup_reference(50, 0.02)
    assert np.allclose(xs[-1], [0.0, np.pi, 0.0, 0.0], atol=1e-6)
    assert max(abs(u[0]) for u in us) < 30.0


def test_rk4_jacobians(rng):
    step = P.rk4(P.pendulum_ode(), 0.05)
    x, u = rng.standard_normal(2), rng.standard_normal(1)
    xn, A, B = step(x, u)
    eps = 1e-6
    fd = np.column_stack([(step(x + eps * e, u)[0] - step(x - eps * e, u)[0]) / (2 * eps)
                          for e in np.eye(2)])
    assert np.abs(fd - A).max() <= 1e-8
