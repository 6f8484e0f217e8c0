"""SQP outer loop: predictor-corrector steps, line search, escape, termination."""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import barrier
from .model import (Iterate, KktResidual, NonFiniteError, OcpProblem, evaluate_trajectory,
                    primal_dual_measures, residual_from_lq)
from .projection import SingularDynamicsError
from .riccati import (Rhs, RolloutError, StepComputationError, StepTrajectory, backward_pass,
                      forward_rollout, linear_residual, project_stages, recover_steps, refine,
                      residual_norm, with_rhs)

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    STEP_FAILURE = "step_failure"
    NON_FINITE = "non_finite"

    @property
    def label(self):
        return {"converged": "Success", "max_iters": "MaxIters",
                "step_failure": "StepFailure", "non_finite": "NonFinite"}[self.value]


@dataclass
class SolverSettings:
    abs_tol: float = 1e-3
    max_iters: int = 100
    n_ls: int = 10
    alpha_min: float = 0.01
    tau: float = 0.995
    rho: float = 1e-8
    mu0: float = 1.0
    t_min: float = 1e-2
    # "projection" or "ipm" for every non-dynamics equality group, or a
    # mapping such as {"c": "projection", "s": "ipm"}
    eq_mode: Union[str, dict] = "projection"
    refine_threshold: Optional[float] = None  # default 100 * abs_tol
    refine_max: int = 2
    refine_tol: float = 1e-10
    pivot_tol: Optional[float] = None
    threads: int = 1

    def __post_init__(self):
        for name in ("abs_tol", "rho", "mu0", "t_min", "refine_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.alpha_min <= 1:
            raise ValueError("alpha_min must lie in (0, 1]")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.n_ls < 1 or self.max_iters < 0 or self.refine_max < 0:
            raise ValueError("n_ls >= 1, max_iters >= 0 and refine_max >= 0 required")
        self.ipm_groups()  # validates eq_mode

    @property
    def refine_level(self):
        return 100 * self.abs_tol if self.refine_threshold is None else self.refine_threshold

    @property
    def mu_floor(self):
        return min(1e-12, self.abs_tol / 100)

    def ipm_groups(self):
        mode = self.eq_mode
        if isinstance(mode, str):
            mode = {"c": mode, "s": mode}
        bad = {v for v in mode.values()} - {"projection", "ipm"}
        if bad or set(mode) - {"c", "s"}:
            raise ValueError(f"invalid eq_mode {self.eq_mode!r}")
        return tuple(sorted(g for g, v in mode.items() if v == "ipm"))


@dataclass
class IterationRecord:
    iteration: int
    kkt: KktResidual
    mu_start: float  # barrier parameter of the iterate entering this iteration
    mu: float = float("nan")  # barrier parameter targeted by the step
    alpha: float = float("nan")
    alpha_nu: float = float("nan")
    ls_trials: int = 0
    escape: bool = False
    forced: bool = False
    refines: int = 0
    sigma: float = float("nan")
    corrector: Optional[bool] = None
    qp_solves: int = 0

    def key(self):
        """Timing-free tuple used for determinism comparisons."""
        return (self.iteration, self.mu_start, self.kkt.stationarity, self.kkt.eq_violation,
                self.kkt.ineq_violation, self.kkt.complementarity, self.mu, self.alpha,
                self.alpha_nu, self.ls_trials, self.escape, self.forced, self.refines,
                self.sigma, self.corrector, self.qp_solves)


@dataclass
class SolveReport:
    status: Status
    iterations: int
    trace: list = field(default_factory=list)
    wall_time: float = 0.0
    kkt: Optional[KktResidual] = None
    message: str = ""

    @property
    def converged(self):
        return self.status is Status.CONVERGED

    @property
    def qp_count(self):
        return sum(r.qp_solves for r in self.trace)

    @property
    def escapes(self):
        return sum(1 for r in self.trace if r.escape)

    @property
    def refines(self):
        return sum(r.refines for r in self.trace)


def check_termination(res: KktResidual, iteration, settings: SolverSettings):
    """``Status.CONVERGED``, ``Status.MAX_ITERS`` or ``None`` (keep going)."""
    if not res.finite:
        return Status.NON_FINITE
    if res.total <= settings.abs_tol:
        return Status.CONVERGED
    if iteration >= settings.max_iters:
        return Status.MAX_ITERS
    return None


def wants_refinement(res: KktResidual, settings: SolverSettings) -> bool:
    """Refine near convergence when stationarity dominates the other residuals."""
    others = max(res.eq_violation, res.ineq_violation, res.complementarity)
    return (settings.refine_max > 0 and res.total <= settings.refine_level
            and res.stationarity > 10 * others)


# ---------------------------------------------------------------------------

@dataclass
class IterationStep:
    step: StepTrajectory
    mu: float
    sigma: float = float("nan")
    corrector: Optional[bool] = None
    refines: int = 0
    qp_solves: int = 1


def _ipm_rhs(lqs, ts, nus, mu, rho, corrector=None):
    out = []
    for k, lq in enumerate(lqs):
        cx, cu, cy = barrier.gradient_increment(
            lq, ts[k], nus[k], mu, rho, None if corrector is None else corrector[k])
        out.append(Rhs(lq.Q_x + cx, lq.Q_u + cu, lq.Q_y + cy, lq.h0))
    return out


def _with_ipm(lqs, step, ts, nus, mu, rho, corrector=None):
    step.dnu, step.dt = [], []
    for k, lq in enumerate(lqs):
        dnu, dt = barrier.recover_ipm_step(lq, step.dx[k], step.du[k], step.dx[k + 1], ts[k],
                                           nus[k], mu, rho,
                                           None if corrector is None else corrector[k])
        step.dnu.append(dnu)
        step.dt.append(dt)
    return step


def _solve_rhs(gains, rhs, term):
    g = with_rhs(gains, rhs, term.V_x)
    return g, recover_steps(g, forward_rollout(g))


def _refine(gains, hess_lqs, term, rhs, step, settings):
    """Iterative refinement on the linear system; never accepts a worse residual."""
    passes = 0
    res, vN = linear_residual(hess_lqs, term, step, rhs, term.V_x)
    norm = residual_norm(res, vN)
    while passes < settings.refine_max and norm > settings.refine_tol:
        corr = refine(gains, res, vN)
        trial = step.copy().axpy(corr)
        res2, vN2 = linear_residual(hess_lqs, term, trial, rhs, term.V_x)
        norm2 = residual_norm(res2, vN2)
        passes += 1
        if not norm2 < norm:
            break
        step, res, vN, norm = trial, res2, vN2, norm2
    return step, passes


def sqp_iteration(problem: OcpProblem, it: Iterate, lqs, term, settings: SolverSettings,
                  do_refine=False) -> IterationStep:
    """One Newton step (predictor, barrier update, corrector with safeguard)."""
    projs = project_stages(lqs, settings.pivot_tol, settings.threads)
    if problem.n_ipm == 0:
        gains = backward_pass(lqs, projs, term)
        step = recover_steps(gains, forward_rollout(gains))
        refines = 0
        if do_refine:
            step, refines = _refine(gains, lqs, term, None, step, settings)
        step.dnu = [np.zeros(0) for _ in lqs]
        step.dt = [np.zeros(0) for _ in lqs]
        return IterationStep(step, 0.0, refines=refines, qp_solves=1 + refines)

    rho = settings.rho
    ts, nus = it.ts, it.nus
    hess = [barrier.apply_modification(lq, barrier.modify_lq(lq, ts[k], nus[k], 0.0, rho))
            for k, lq in enumerate(lqs)]
    # predictor (mu = 0)
    gains = backward_pass(hess, projs, term)
    aff = _with_ipm(lqs, recover_steps(gains, forward_rollout(gains)), ts, nus, 0.0, rho)
    a_aff, an_aff = barrier.step_bounds(ts, aff.dt, nus, aff.dnu, settings.tau)
    sigma, mu_new = barrier.mpc_update(nus, ts, aff.dnu, aff.dt, a_aff, an_aff, problem.n_ipm)
    mu_new = max(mu_new, settings.mu_floor)

    rhs_plain = _ipm_rhs(lqs, ts, nus, mu_new, rho)
    _, plain = _solve_rhs(gains, rhs_plain, term)
    plain = _with_ipm(lqs, plain, ts, nus, mu_new, rho)

    corr_term = [dn * dt for dn, dt in zip(aff.dnu, aff.dt)]
    rhs_corr = _ipm_rhs(lqs, ts, nus, mu_new, rho, corr_term)
    _, corr = _solve_rhs(gains, rhs_corr, term)
    corr = _with_ipm(lqs, corr, ts, nus, mu_new, rho, corr_term)

    def trial_comp(s):
        a, an = barrier.step_bounds(ts, s.dt, nus, s.dnu, settings.tau)
        return barrier.complementarity(nus, ts, s.dnu, s.dt, a, an)

    use_corr = barrier.corrector_safeguard(trial_comp(corr), trial_comp(plain))
    step, rhs, cterm = (corr, rhs_corr, corr_term) if use_corr else (plain, rhs_plain, None)
    refines = 0
    if do_refine:
        step, refines = _refine(gains, hess, term, rhs, step, settings)
        if refines:
            step = _with_ipm(lqs, step, ts, nus, mu_new, rho, cterm)
    return IterationStep(step, mu_new, sigma, use_corr, refines, 3 + refines)


def take_step(it: Iterate, step: StepTrajectory, alpha, alpha_nu) -> Iterate:
    return Iterate(
        [x + alpha * d for x, d in zip(it.xs, step.dx)],
        [u + alpha * d for u, d in zip(it.us, step.du)],
        [l + alpha * d for l, d in zip(it.lams, step.dlam)],
        [n + alpha_nu * d for n, d in zip(it.nus, step.dnu)],
        [t + alpha * d for t, d in zip(it.ts, step.dt)],
        it.mu,
    )


@dataclass
class LineSearchResult:
    alpha: float
    alpha_nu: float
    accepted: bool
    trials: int
    iterate: Optional[Iterate] = None
    lq: Optional[tuple] = None


def line_search(problem, it: Iterate, lqs, term, step, alpha_max, alpha_nu_max,
                settings: SolverSettings, mu) -> LineSearchResult:
    """Fixed-decrement backtracking on ``alpha``; ``alpha_nu`` stays at its cap.

    A trial is accepted when either the primal or the dual measure strictly
    decreases.
    """
    p0, d0 = primal_dual_measures(lqs, term, it, mu)
    dalpha = alpha_max / settings.n_ls
    for i in range(settings.n_ls):
        alpha = alpha_max - i * dalpha
        trial = take_step(it, step, alpha, alpha_nu_max)
        trial.mu = mu
        try:
            tl, tt = evaluate_trajectory(problem, trial, settings.threads)
        except NonFiniteError:
            continue
        p, d = primal_dual_measures(tl, tt, trial, mu)
        if p < p0 or d < d0:
            return LineSearchResult(alpha, alpha_nu_max, True, i + 1, trial, (tl, tt))
    return LineSearchResult(0.0, 0.0, False, settings.n_ls)


def escape(problem, it: Iterate, lqs, settings: SolverSettings):
    """Reset ``mu`` to 1 and re-initialize slacks/multipliers at the current ``g``."""
    state = barrier.init_ipm([lq.g0 for lq in lqs], 1.0, settings.t_min, settings.rho)
    new = Iterate([x.copy() for x in it.xs], [u.copy() for u in it.us],
                  [l.copy() for l in it.lams], state.nu, state.t, state.mu)
    return new, evaluate_trajectory(problem, new, settings.threads)


def prepare_problem(problem: OcpProblem, settings: SolverSettings) -> OcpProblem:
    groups = settings.ipm_groups()
    return barrier.equality_to_box(problem, groups) if groups else problem


def solve(problem: OcpProblem, xs=None, us=None, settings: Optional[SolverSettings] = None):
    """Solve the OCP; returns ``(iterate, report)``.

    With ``eq_mode`` set to ``"ipm"`` the returned iterate belongs to the
    transformed problem (equality rows moved into the inequality set).
    Numerical breakdowns are reported through ``report.status``.
    """
    settings = settings or SolverSettings()
    t_start = time.perf_counter()
    problem = prepare_problem(problem, settings)
    it = Iterate.initial(problem, xs, us)
    report = SolveReport(Status.MAX_ITERS, 0)
    try:
        lqs, term = evaluate_trajectory(problem, it, settings.threads)
    except NonFiniteError as exc:
        report.status, report.message = Status.NON_FINITE, str(exc)
        report.wall_time = time.perf_counter() - t_start
        return it, report
    if problem.n_ipm:
        state = barrier.init_ipm([lq.g0 for lq in lqs], settings.mu0, settings.t_min,
                                 settings.rho)
        it.ts, it.nus, it.mu = state.t, state.nu, state.mu
        lqs, term = evaluate_trajectory(problem, it, settings.threads)

    best, best_res = it, None
    forced = False
    iteration = 0
    while True:
        res = residual_from_lq(lqs, term, it)
        rec = IterationRecord(iteration, res, it.mu)
        report.trace.append(rec)
        if res.finite and (best_res is None or res.total < best_res.total):
            best, best_res = it, res
        status = check_termination(res, iteration, settings)
        if status is not None:
            report.status = status
            break
        do_refine = wants_refinement(res, settings)
        try:
            st = sqp_iteration(problem, it, lqs, term, settings, do_refine)
        except (StepComputationError, RolloutError, SingularDynamicsError,
                np.linalg.LinAlgError) as exc:
            report.status, report.message = Status.STEP_FAILURE, str(exc)
            break
        rec.sigma, rec.corrector, rec.refines, rec.qp_solves = (st.sigma, st.corrector,
                                                                st.refines, st.qp_solves)
        step = st.step
        if problem.n_ipm:
            a_max, an_max = barrier.step_bounds(it.ts, step.dt, it.nus, step.dnu, settings.tau)
        else:
            a_max, an_max = 1.0, 1.0
        iteration += 1
        if forced:
            alpha = min(a_max, settings.alpha_min)
            new = take_step(it, step, alpha, an_max)
            new.mu = st.mu
            try:
                lqs, term = evaluate_trajectory(problem, new, settings.threads)
            except NonFiniteError as exc:
                report.status, report.message = Status.NON_FINITE, str(exc)
                break
            it, forced = new, False
            rec.alpha, rec.alpha_nu, rec.forced, rec.mu = alpha, an_max, True, st.mu
            continue
        ls = line_search(problem, it, lqs, term, step, a_max, an_max, settings, st.mu)
        rec.ls_trials, rec.mu = ls.trials, st.mu
        if ls.accepted:
            rec.alpha, rec.alpha_nu = ls.alpha, ls.alpha_nu
            it = ls.iterate
            lqs, term = ls.lq
        else:
            rec.escape = True
            it, (lqs, term) = escape(problem, it, lqs, settings)
            forced = True
            log.debug("iteration %d: line search failed, escaping", iteration)

    report.iterations = iteration
    report.kkt = report.trace[-1].kkt
    report.wall_time = time.perf_counter() - t_start
    if report.status is Status.CONVERGED:
        return it, report
    return best, report
