from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from riccati_ipm import problems as P
from riccati_ipm.model import Iterate, evaluate_trajectory
from riccati_ipm.oracle import assemble_dense, dense_solve, split_solution
from riccati_ipm.riccati import (JITTER_MAX, Rhs, RiccatiGains, StepComputationError,
                                 backward_pass, cho_with_jitter, factorize, forward_rollout,
                                 linear_residual, project_stages, recover_steps, refine,
                                 residual_norm, resolve, rhs_from_lq, solve_lq, with_rhs)
from riccati_ipm.projection import StageProjection
from riccati_ipm.verify import random_iterate

from conftest import scalar_lqr
from naive import naive_value_derivatives, random_stage, rel


def _lq(problem, rng=None):
    it = Iterate.initial(problem) if rng is None else random_iterate(problem, rng, False)
    lqs, term = evaluate_trajectory(problem, it)
    return it, lqs, term


def test_scalar_lqr_one_step_riccati():
    _, lqs, term = _lq(scalar_lqr(N=1))
    gains = backward_pass(lqs, project_stages(lqs), term)
    # P1 = 1; P0 = q + a^2 P1 - (a b P1)^2 / (r + b^2 P1) = 1 + 1 - 1/2
    assert gains.V_xx[0][0, 0] == pytest.approx(1.5, rel=1e-14)


def _tail_schur(lqs, term, k):
    """Hessian of the optimal cost-to-go from node k via the dense tail KKT matrix."""
    tail = lqs[k:]
    kkt = assemble_dense(tail, term)
    lq = tail[0]
    C = np.zeros((kkt.n, lq.nx))
    C[kkt.index[(0, "u")]] = lq.Q_ux
    C[kkt.index[(0, "y")]] = lq.Q_yx
    C[kkt.index[(0, "lam")]] = lq.h_x
    return lq.Q_xx - C.T @ np.linalg.solve(kkt.matrix, C)


def test_value_hessians_match_dense_schur_complement(rng):
    pb = P.lq_random(7, N=5, nx=3, nu=3)
    _, lqs, term = _lq(pb, rng)
    gains = backward_pass(lqs, project_stages(lqs), term)
    for k in range(pb.N):
        assert rel(gains.V_xx[k], _tail_schur(lqs, term, k)) <= 1e-8


def test_equality_constrained_step_matches_dense(rng):
    pb = P.lq_random(8, N=6, nx=3, nu=3, nc=1)
    it, lqs, term = _lq(pb, rng)
    _, step = solve_lq(lqs, project_stages(lqs), term)
    kkt = assemble_dense(lqs, term)
    ds = split_solution(kkt, dense_solve(kkt).x, pb.x0.size)
    for a, b in ((step.dx, ds.dx), (step.du, ds.du), (step.dlam, ds.dlam)):
        assert rel(np.concatenate(a), np.concatenate(b)) <= 1e-8


def _fake_gains(k_y, K_y, N):
    stages = [SimpleNamespace(K_y=np.array([[K_y]])) for _ in range(N)]
    ff = [SimpleNamespace(k_y=np.array([k_y])) for _ in range(N)]
    return RiccatiGains(stages, ff, None, None)


def test_homogeneous_rollout_is_zero():
    dx = forward_rollout(_fake_gains(0.0, 0.7, 4))
    assert all(np.all(d == 0) for d in dx)


def test_scalar_chain_rollout():
    dx = forward_rollout(_fake_gains(1.0, 0.5, 3))
    assert np.concatenate(dx).tolist() == [0.0, 1.0, 1.5, 1.75]


def test_rollout_matches_dense_states(rng):
    pb = P.lq_random(9, N=7, nx=4, nu=2, ns=1, implicit=True)
    _, lqs, term = _lq(pb, rng)
    gains = backward_pass(lqs, project_stages(lqs), term)
    kkt = assemble_dense(lqs, term)
    ds = split_solution(kkt, dense_solve(kkt).x, pb.x0.size)
    assert rel(np.concatenate(forward_rollout(gains)), np.concatenate(ds.dx)) <= 1e-8


def test_zero_rhs_gives_zero_step(rng):
    pb = P.lq_random(3, N=4, nx=3, nu=3, nc=1, ns=1)
    _, lqs, term = _lq(pb, rng)
    gains = backward_pass(lqs, project_stages(lqs), term)
    zero = [Rhs(np.zeros(lq.nx), np.zeros(lq.nu), np.zeros(lq.ny), np.zeros(lq.nh))
            for lq in lqs]
    g0 = with_rhs(gains, zero, np.zeros(term.V_x.size))
    step = recover_steps(g0, forward_rollout(g0))
    for arr in step.dx + step.du + step.dlam:
        assert np.all(arr == 0)


def test_unconstrained_gains_match_classical_lqr(rng):
    pb = P.lq_random(11, N=6, nx=3, nu=2)
    _, lqs, term = _lq(pb, rng)
    gains = backward_pass(lqs, project_stages(lqs), term)
    Pk = term.V_xx
    for k in range(pb.N - 1, -1, -1):
        lq = lqs[k]
        A, B = lq.f_x, lq.f_u  # explicit: f = A x + B u + e - y
        H = lq.Q_uu + B.T @ Pk @ B
        G = lq.Q_ux + B.T @ Pk @ A
        K = -np.linalg.solve(H, G)
        assert np.array_equal(gains.stages[k].proj.Z_u, np.eye(2))
        assert rel(gains.stages[k].K_z, K) <= 1e-10
        Pk = lq.Q_xx + A.T @ Pk @ A + G.T @ K
    # and the applied input is k_z + K_z dx
    step = recover_steps(gains, forward_rollout(gains))
    for k in range(pb.N):
        sg, ff = gains.stages[k], gains.ff[k]
        assert rel(step.du[k], ff.k_z + sg.K_z @ step.dx[k]) <= 1e-12


def test_equality_rows_satisfied_by_step(rng):
    pb = P.lq_random(12, N=5, nx=3, nu=4, nc=2, ns=1)
    _, lqs, term = _lq(pb, rng)
    _, step = solve_lq(lqs, project_stages(lqs), term)
    for k, lq in enumerate(lqs):
        lin = lq.h0 + lq.h_x @ step.dx[k] + lq.h_u @ step.du[k] + lq.h_y @ step.dx[k + 1]
        assert np.abs(lin).max() <= 1e-8


def test_refinement_of_polluted_step(rng):
    pb = P.lq_random(13, N=8, nx=4, nu=3, nc=1)
    _, lqs, term = _lq(pb, rng)
    gains, step = solve_lq(lqs, project_stages(lqs), term)
    polluted = step.copy()
    for name in ("dx", "du", "dlam"):
        arrs = getattr(polluted, name)
        for i in range(1 if name == "dx" else 0, len(arrs)):
            arrs[i] = arrs[i] + 1e-6 * rng.standard_normal(arrs[i].size)
    res, vN = linear_residual(lqs, term, polluted)
    before = residual_norm(res, vN)
    fixed = polluted.copy().axpy(refine(gains, res, vN))
    after = residual_norm(*linear_residual(lqs, term, fixed))
    assert after <= before / 10


def test_zero_residual_gives_zero_correction(rng):
    pb = P.lq_random(14, N=3, nx=2, nu=2, nc=1)
    _, lqs, term = _lq(pb, rng)
    gains = backward_pass(lqs, project_stages(lqs), term)
    zero = [Rhs(np.zeros(lq.nx), np.zeros(lq.nu), np.zeros(lq.ny), np.zeros(lq.nh))
            for lq in lqs]
    corr = refine(gains, zero, np.zeros(term.V_x.size))
    assert all(np.all(a == 0) for a in corr.dx + corr.du + corr.dlam)


def test_resolve_reuses_factorization(rng):
    """A second right-hand side through resolve equals a fresh full backward pass."""
    pb = P.lq_random(15, N=5, nx=3, nu=3, ns=1, nc=1, implicit=True)
    _, lqs, term = _lq(pb, rng)
    projs = project_stages(lqs)
    g1 = backward_pass(lqs, projs, term)
    rhs = [Rhs(rng.standard_normal(lq.nx), rng.standard_normal(lq.nu),
               rng.standard_normal(lq.ny), rng.standard_normal(lq.nh)) for lq in lqs]
    g2 = with_rhs(g1, rhs, term.V_x)
    g3 = backward_pass(lqs, projs, term, rhs)
    for a, b in zip(g2.V_x, g3.V_x):
        assert np.array_equal(a, b)


@given(st.integers(0, 10**6))
def test_value_propagation_equals_naive(seed):
    rng = np.random.default_rng(seed)
    lq, Vxx, Vx = random_stage(rng)
    stages, Vxx0 = factorize([lq], [StageProjection(lq)], Vxx)
    ff = resolve(stages, rhs_from_lq([lq]), Vx)
    nVx, nVxx = naive_value_derivatives(lq, Vxx, Vx)
    assert rel(Vxx0, nVxx) <= 1e-9 and rel(ff[0].V_x, nVx) <= 1e-9


def test_jitter_escalation():
    c, jit = cho_with_jitter(np.diag([1.0, -1e-9]))
    assert 0 < jit <= 1e-7
    with pytest.raises(StepComputationError):
        cho_with_jitter(np.diag([1.0, -1.0]))
    assert cho_with_jitter(np.eye(2))[1] == 0.0
    assert JITTER_MAX == 1e-2


def test_threaded_projection_identical(rng):
    pb = P.lq_random(16, N=9, nx=3, nu=3, nc=1, ns=1)
    _, lqs, term = _lq(pb, rng)
    a = backward_pass(lqs, project_stages(lqs, threads=1), term)
    b = backward_pass(lqs, project_stages(lqs, threads=3), term)
    for x, y in zip(a.V_xx + a.V_x, b.V_xx + b.V_x):
        assert np.array_equal(x, y)
