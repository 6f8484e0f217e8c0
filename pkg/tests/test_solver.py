import numpy as np
import pytest

from riccati_ipm import barrier
from riccati_ipm import problems as P
from riccati_ipm import solver as S
from riccati_ipm.model import Iterate, KktResidual, evaluate_trajectory
from riccati_ipm.oracle import dense_barrier_solve
from riccati_ipm.riccati import StepTrajectory, backward_pass, forward_rollout, recover_steps

from conftest import scalar_lqr


def _ipm_point(problem, settings=None):
    settings = settings or S.SolverSettings()
    problem = S.prepare_problem(problem, settings)
    it = Iterate.initial(problem)
    lqs, _ = evaluate_trajectory(problem, it)
    st = barrier.init_ipm([lq.g0 for lq in lqs], settings.mu0, settings.t_min, settings.rho)
    it.ts, it.nus, it.mu = st.t, st.nu, st.mu
    lqs, term = evaluate_trajectory(problem, it)
    return problem, it, lqs, term


def test_lq_newton_exactness():
    _, rep = S.solve(P.lq_random(1, N=8, nx=3, nu=3, nc=1, ns=1),
                     settings=S.SolverSettings(abs_tol=1e-8))
    assert rep.converged and rep.iterations == 1
    assert rep.trace[0].alpha == 1.0 and rep.trace[0].ls_trials == 1


def test_active_input_bounds_match_dense_barrier():
    pb = P.double_integrator(seed=3, u_max=1.0)
    it, rep = S.solve(pb, settings=S.SolverSettings(abs_tol=1e-8))
    assert rep.converged
    U = np.array(it.us)
    assert np.sum(np.abs(np.abs(U) - 1.0) <= 1e-5) > 0
    assert np.abs(U).max() <= 1.0 + 1e-8
    ref = dense_barrier_solve(pb)
    assert ref.converged
    assert np.abs(U - np.array(ref.iterate.us)).max() <= 1e-5


def test_cartpole_converges_within_budget():
    _, rep = S.solve(P.cartpole_swingup(seed=0, N=50, dt=0.02),
                     settings=S.SolverSettings(abs_tol=1e-3, max_iters=100))
    assert rep.converged and rep.iterations <= 100


def test_no_inequalities_single_recursion():
    pb = P.lq_random(2, N=3, nx=2, nu=2, nc=1)
    it = Iterate.initial(pb)
    lqs, term = evaluate_trajectory(pb, it)
    st = S.sqp_iteration(pb, it, lqs, term, S.SolverSettings())
    assert st.qp_solves == 1 and st.corrector is None and np.isnan(st.sigma)
    assert all(d.size == 0 for d in st.step.dnu)


def test_interior_start_predictor_recenters_hard():
    pb, it, lqs, term = _ipm_point(P.double_integrator(seed=0))
    st = S.sqp_iteration(pb, it, lqs, term, S.SolverSettings())
    assert st.sigma < 0.5
    assert st.mu < it.mu


def test_rejected_corrector_falls_back_to_plain_step(monkeypatch):
    settings = S.SolverSettings()
    pb, it, lqs, term = _ipm_point(P.double_integrator(seed=0), settings)
    monkeypatch.setattr(barrier, "corrector_safeguard", lambda a, b: False)
    st = S.sqp_iteration(pb, it, lqs, term, settings)
    assert st.corrector is False
    # plain step: predictor factorization, new mu, no corrector term
    rho = settings.rho
    hess = [barrier.apply_modification(lq, barrier.modify_lq(lq, it.ts[k], it.nus[k], 0.0, rho))
            for k, lq in enumerate(lqs)]
    gains = backward_pass(hess, S.project_stages(lqs), term)
    rhs = S._ipm_rhs(lqs, it.ts, it.nus, st.mu, rho)
    _, plain = S._solve_rhs(gains, rhs, term)
    plain = S._with_ipm(lqs, plain, it.ts, it.nus, st.mu, rho)
    for name in ("dx", "du", "dlam", "dnu", "dt"):
        for a, b in zip(getattr(st.step, name), getattr(plain, name)):
            assert np.array_equal(a, b)


def test_corrector_decision_follows_trial_complementarity():
    settings = S.SolverSettings()
    pb, it, lqs, term = _ipm_point(P.masspoint_obstacle(seed=1), settings)
    seen = set()
    for _ in range(6):
        calls = []
        orig = barrier.corrector_safeguard

        def spy(a, b):
            calls.append((a, b))
            return orig(a, b)

        barrier.corrector_safeguard = spy
        try:
            st = S.sqp_iteration(pb, it, lqs, term, settings)
        finally:
            barrier.corrector_safeguard = orig
        (with_c, without_c), = calls
        assert st.corrector == (with_c <= without_c)
        seen.add(st.corrector)
        a, an = barrier.step_bounds(it.ts, st.step.dt, it.nus, st.step.dnu, settings.tau)
        ls = S.line_search(pb, it, lqs, term, st.step, a, an, settings, st.mu)
        if not ls.accepted:
            break
        it, (lqs, term) = ls.iterate, ls.lq
    assert True in seen


def test_newton_step_first_trial_accepted():
    pb = scalar_lqr(N=3, x0=2.0)
    it = Iterate.initial(pb)
    lqs, term = evaluate_trajectory(pb, it)
    st = S.sqp_iteration(pb, it, lqs, term, S.SolverSettings())
    ls = S.line_search(pb, it, lqs, term, st.step, 1.0, 1.0, S.SolverSettings(), 0.0)
    assert ls.accepted and ls.alpha == 1.0 and ls.trials == 1


def test_trial_sequence_and_failure(monkeypatch):
    pb, it, lqs, term = _ipm_point(P.double_integrator(seed=0))
    zero = StepTrajectory([np.zeros_like(x) for x in it.xs], [np.zeros_like(u) for u in it.us],
                          [], [np.zeros_like(l) for l in it.lams],
                          [np.zeros_like(n) for n in it.nus], [np.zeros_like(t) for t in it.ts])
    alphas = []
    real = S.take_step

    def spy(it_, step, alpha, alpha_nu):
        alphas.append(alpha)
        return real(it_, step, alpha, alpha_nu)

    monkeypatch.setattr(S, "take_step", spy)
    ls = S.line_search(pb, it, lqs, term, zero, 0.8, 1.0, S.SolverSettings(n_ls=10), it.mu)
    assert not ls.accepted and ls.trials == 10
    assert np.allclose(alphas, [0.8 - 0.08 * i for i in range(10)], rtol=0, atol=1e-15)


def test_escape_resets_barrier():
    settings = S.SolverSettings(mu0=1e-6)
    pb, it, lqs, term = _ipm_point(P.double_integrator(seed=0), settings)
    new, (lqs2, _) = S.escape(pb, it, lqs, settings)
    assert new.mu == 1.0
    ref = barrier.init_ipm([lq.g0 for lq in lqs], 1.0, settings.t_min)
    for a, b in zip(new.ts, ref.t):
        assert np.array_equal(a, b)
    for a, b in zip(new.nus, ref.nu):
        assert np.array_equal(a, b)
    for a, b in zip(new.xs, it.xs):
        assert np.array_equal(a, b)


def test_escape_is_not_terminal(monkeypatch):
    real = S.line_search
    calls = {"n": 0}

    def fail_once(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            return S.LineSearchResult(0.0, 0.0, False, 10)
        return real(*a, **kw)

    monkeypatch.setattr(S, "line_search", fail_once)
    _, rep = S.solve(P.double_integrator(seed=0))
    assert rep.converged and rep.escapes == 1
    k = next(i for i, r in enumerate(rep.trace) if r.escape)
    nxt = rep.trace[k + 1]
    assert nxt.mu_start == 1.0
    assert nxt.forced and nxt.alpha <= 0.01


@pytest.mark.parametrize("total,iteration,expected", [
    (9e-4, 3, S.Status.CONVERGED),
    (1.1e-3, 3, None),
    (1.1e-3, 100, S.Status.MAX_ITERS),
    (float("nan"), 3, S.Status.NON_FINITE),
])
def test_termination(total, iteration, expected):
    res = KktResidual(total, 0.0, 0.0, 0.0)
    assert S.check_termination(res, iteration, S.SolverSettings(abs_tol=1e-3)) is expected


def test_max_iters_returns_best_iterate():
    pb = P.cartpole_swingup(seed=0)
    it, rep = S.solve(pb, settings=S.SolverSettings(max_iters=3, abs_tol=1e-12))
    assert rep.status is S.Status.MAX_ITERS and rep.iterations == 3
    best = min(r.kkt.total for r in rep.trace)
    from riccati_ipm.model import kkt_residual
    assert kkt_residual(S.prepare_problem(pb, S.SolverSettings()), it).total == pytest.approx(
        best, rel=1e-12)


def test_status_labels():
    assert S.Status.CONVERGED.label == "Success"
    assert S.Status.MAX_ITERS.label == "MaxIters"


def test_invalid_settings():
    with pytest.raises(ValueError):
        S.SolverSettings(tau=1.0)
    with pytest.raises(ValueError):
        S.SolverSettings(eq_mode="penalty")
    with pytest.raises(ValueError):
        S.SolverSettings(eq_mode={"c": "ipm", "q": "ipm"})


def test_per_group_eq_mode():
    pb = P.lq_random(6, N=3, nx=3, nu=3, nc=1, ns=1)
    prep = S.prepare_problem(pb, S.SolverSettings(eq_mode={"c": "ipm", "s": "projection"}))
    assert all(st.nc == 0 and st.ns == 1 and st.npsi == 2 for st in prep.stages)


@pytest.mark.parametrize("res,expected", [
    (KktResidual(5e-2, 1e-4, 0.0, 1e-4), True),
    (KktResidual(5e-2, 1e-2, 0.0, 0.0), False),   # stationarity not dominant
    (KktResidual(0.2, 1e-4, 0.0, 0.0), False),    # above 100 * abs_tol
])
def test_refinement_trigger(res, expected):
    assert S.wants_refinement(res, S.SolverSettings(abs_tol=1e-3)) is expected
    assert not S.wants_refinement(res, S.SolverSettings(abs_tol=1e-3, refine_max=0))


def test_refinement_passes_never_worsen_linear_residual():
    from riccati_ipm.riccati import linear_residual, residual_norm
    settings = S.SolverSettings(refine_tol=1e-300)
    pb, it, lqs, term = _ipm_point(P.masspoint_obstacle(seed=1), settings)
    plain = S.sqp_iteration(pb, it, lqs, term, settings, do_refine=False)
    ref = S.sqp_iteration(pb, it, lqs, term, settings, do_refine=True)
    assert 1 <= ref.refines <= settings.refine_max
    assert ref.qp_solves == 3 + ref.refines and plain.qp_solves == 3
    hess = [barrier.apply_modification(lq, barrier.modify_lq(lq, it.ts[k], it.nus[k], 0.0,
                                                             settings.rho))
            for k, lq in enumerate(lqs)]
    rhs = S._ipm_rhs(lqs, it.ts, it.nus, ref.mu, settings.rho,
                     [a * b for a, b in zip(*_affine(pb, it, lqs, term, settings))]
                     if ref.corrector else None)
    r_plain = residual_norm(*linear_residual(hess, term, plain.step, rhs, term.V_x))
    r_ref = residual_norm(*linear_residual(hess, term, ref.step, rhs, term.V_x))
    assert r_ref <= r_plain


def _affine(pb, it, lqs, term, settings):
    hess = [barrier.apply_modification(lq, barrier.modify_lq(lq, it.ts[k], it.nus[k], 0.0,
                                                             settings.rho))
            for k, lq in enumerate(lqs)]
    gains = backward_pass(hess, S.project_stages(lqs), term)
    aff = S._with_ipm(lqs, recover_steps(gains, forward_rollout(gains)), it.ts, it.nus, 0.0,
                      settings.rho)
    return aff.dnu, aff.dt


def test_threads_do_not_change_trace():
    pb = P.masspoint_obstacle(seed=2)
    _, r1 = S.solve(pb, settings=S.SolverSettings(threads=1))
    _, r2 = S.solve(pb, settings=S.SolverSettings(threads=3))
    assert [r.key() for r in r1.trace] == [r.key() for r in r2.trace]


def test_non_finite_start_reported():
    from dataclasses import replace
    pb = scalar_lqr(N=2)
    bad = replace(pb.stages[0], cost=lambda x, u: (np.inf, x, u, np.eye(1), np.eye(1),
                                                   np.zeros((1, 1))))
    _, rep = S.solve(replace(pb, stages=(bad, bad)))
    assert rep.status is S.Status.NON_FINITE
