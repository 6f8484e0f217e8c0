"""Structured-vs-dense equivalence checks on random LQ instances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import barrier
from .model import Iterate, OcpProblem, evaluate_trajectory
from .oracle import assemble_dense, dense_solve, split_solution
from .problems import lq_random, random_lq_options
from .riccati import backward_pass, forward_rollout, project_stages, recover_steps
from .solver import _with_ipm

# Instances whose dense KKT matrix is worse conditioned than this are
# redrawn: neither solver can be expected to agree to 1e-7 beyond it.
COND_LIMIT = 1e8


@dataclass
class LqCase:
    problem: OcpProblem
    iterate: Iterate
    lqs: list
    term: object
    mu: float
    rho: float
    cond: float


def random_iterate(problem: OcpProblem, rng, ipm: bool) -> Iterate:
    """Random primal-dual point (positive slacks/multipliers when ``ipm``)."""
    it = Iterate.initial(problem)
    it.xs = [it.xs[0]] + [rng.standard_normal(x.size) for x in it.xs[1:]]
    it.us = [rng.standard_normal(u.size) for u in it.us]
    it.lams = [rng.standard_normal(l.size) for l in it.lams]
    if ipm:
        it.ts = [rng.uniform(0.05, 2.0, n.size) for n in it.nus]
        it.nus = [rng.uniform(0.05, 2.0, n.size) for n in it.nus]
        it.mu = float(rng.uniform(0.0, 1.0))
    return it


def sample_case(rng, inequalities=False, rho=barrier.RHO, max_N=10, max_dim=6) -> LqCase:
    """Draw a random LQ instance and evaluation point with bounded KKT conditioning."""
    while True:
        opts = random_lq_options(rng, max_N, max_dim, inequalities=inequalities)
        problem = lq_random(seed=int(rng.integers(2**31)), options=opts)
        it = random_iterate(problem, rng, inequalities)
        lqs, term = evaluate_trajectory(problem, it)
        kkt = assemble_dense(lqs, term, it.ts, it.nus, it.mu, rho)
        cond = float(np.linalg.cond(kkt.matrix))
        if cond <= COND_LIMIT:
            return LqCase(problem, it, lqs, term, it.mu, rho, cond)


def structured_step(case: LqCase, corrector=None):
    """Modified-and-reduced step with slack/multiplier recovery."""
    it, lqs = case.iterate, case.lqs
    if case.problem.n_ipm:
        mods = [barrier.modify_lq(lq, it.ts[k], it.nus[k], case.mu, case.rho,
                                  None if corrector is None else corrector[k])
                for k, lq in enumerate(lqs)]
        work = [barrier.apply_modification(lq, m) for lq, m in zip(lqs, mods)]
    else:
        work = lqs
    gains = backward_pass(work, project_stages(lqs), case.term)
    step = recover_steps(gains, forward_rollout(gains))
    if case.problem.n_ipm:
        step = _with_ipm(lqs, step, it.ts, it.nus, case.mu, case.rho, corrector)
    return gains, step


def dense_step(case: LqCase, corrector=None):
    it = case.iterate
    kkt = assemble_dense(case.lqs, case.term, it.ts, it.nus, case.mu, case.rho, corrector)
    sol = dense_solve(kkt)
    return kkt, sol, split_solution(kkt, sol.x, case.problem.x0.size)


def rel_error(a, b):
    """Relative L-infinity distance of two lists of arrays (scale floor 1)."""
    a = np.concatenate([np.ravel(v) for v in a]) if len(a) else np.zeros(0)
    b = np.concatenate([np.ravel(v) for v in b]) if len(b) else np.zeros(0)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def step_error(case: LqCase, corrector=None) -> float:
    _, st = structured_step(case, corrector)
    _, _, ds = dense_step(case, corrector)
    parts = [(st.dx, ds.dx), (st.du, ds.du), (st.dlam, ds.dlam)]
    if case.problem.n_ipm:
        parts += [(st.dnu, ds.dnu), (st.dt, ds.dt)]
    return max(rel_error(a, b) for a, b in parts)


@dataclass
class EquivalenceSummary:
    name: str
    count: int
    worst: float
    tol: float

    @property
    def ok(self):
        return self.worst <= self.tol


def equivalence_suite(count=200, seed=0, inequalities=False, tol=1e-7) -> EquivalenceSummary:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        worst = max(worst, step_error(sample_case(rng, inequalities)))
    name = "ipm path" if inequalities else "equality path"
    return EquivalenceSummary(name, count, worst, tol)
