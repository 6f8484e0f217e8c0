"""Backward Riccati recursion over nullspace-reduced stage systems.

The recursion is split in two sweeps.  :func:`factorize` handles everything
that depends on Hessians only (the reduced Hessian factorization, the
feedback gains and ``V_xx``).  :func:`resolve` handles the right-hand-side
dependent part (feedforward terms and ``V_x``) and can be re-run cheaply
with new gradients, which is how the corrector and iterative refinement
reuse the predictor's factorization.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .model import StageLq, TerminalLq
from .projection import StageProjection

JITTER_START = 1e-8
JITTER_MAX = 1e-2


class StepComputationError(np.linalg.LinAlgError):
    """The reduced Hessian could not be factorized even after regularization."""


def _sym(a):
    return 0.5 * (a + a.T)


def cho_with_jitter(H):
    """Cholesky of ``H + d I`` with ``d`` escalating by 10 from 1e-8 to 1e-2.

    Returns ``(factor, jitter)``; ``jitter`` is 0 when no shift was needed.
    """
    n = H.shape[0]
    if n == 0:
        return (np.zeros((0, 0)), True), 0.0
    delta = 0.0
    while True:
        try:
            c = sla.cho_factor(H + delta * np.eye(n) if delta else H, check_finite=True)
            return c, delta
        except np.linalg.LinAlgError:
            delta = JITTER_START if delta == 0.0 else delta * 10.0
            if delta > JITTER_MAX * (1 + 1e-12):
                raise StepComputationError("reduced Hessian is not positive definite")
        except ValueError as exc:  # non-finite entries
            raise StepComputationError(str(exc)) from exc


def cho_solve(c, b):
    if b.shape[0] == 0:
        return np.zeros_like(b)
    return sla.cho_solve(c, b, check_finite=False)


@dataclass
class StageGains:
    """Hessian-dependent quantities of one stage (fixed within an iteration)."""

    proj: StageProjection
    Q_uu: np.ndarray
    Q_yy: np.ndarray  # includes V_xx of the next node
    Q_ux: np.ndarray
    Q_yx: np.ndarray
    Q_xx: np.ndarray
    chol: tuple
    jitter: float
    Hinv: np.ndarray  # inverse of the (regularized) reduced Hessian
    K_z: np.ndarray
    K_u: np.ndarray
    K_y: np.ndarray
    V_xx: np.ndarray


@dataclass
class Feedforward:
    """Right-hand-side dependent terms of one stage."""

    k_z: np.ndarray
    k_u: np.ndarray
    k_y: np.ndarray
    du0: np.ndarray
    dy0: np.ndarray
    V_x: np.ndarray
    g_u: np.ndarray  # Q_u used for this solve
    g_y: np.ndarray  # Q_y (+ V_x of next node) used for this solve


@dataclass
class RiccatiGains:
    stages: List[StageGains]
    ff: List[Feedforward]
    V_xx_N: np.ndarray
    V_x_N: np.ndarray

    @property
    def N(self):
        return len(self.stages)

    @property
    def V_xx(self):
        return [g.V_xx for g in self.stages] + [self.V_xx_N]

    @property
    def V_x(self):
        return [f.V_x for f in self.ff] + [self.V_x_N]

    @property
    def jitter_count(self):
        return sum(1 for g in self.stages if g.jitter > 0)


@dataclass
class Rhs:
    """Zero-order right-hand side of one stage: ``(q_x, q_u, q_y, h0)``."""

    q_x: np.ndarray
    q_u: np.ndarray
    q_y: np.ndarray
    h0: np.ndarray


def rhs_from_lq(lqs: Sequence[StageLq]):
    return [Rhs(lq.Q_x, lq.Q_u, lq.Q_y, lq.h0) for lq in lqs]


def project_stages(lqs, pivot_tol=None, threads=1):
    from .model import map_stages
    return map_stages(lambda k: StageProjection(lqs[k], pivot_tol), len(lqs), threads)


def factorize(lqs: Sequence[StageLq], projs, V_xx_N) -> tuple:
    """Hessian sweep: reduced factorizations, feedback gains and ``V_xx``."""
    N = len(lqs)
    out = [None] * N
    Vxx = V_xx_N
    for k in range(N - 1, -1, -1):
        lq, pj = lqs[k], projs[k]
        Zu, Zy = pj.Z_u, pj.Z_y
        Qyy = lq.Q_yy + Vxx
        Ubar = lq.Q_ux - lq.Q_uu @ pj.dU
        Ybar = lq.Q_yx - Qyy @ pj.dY
        Qzz = _sym(Zu.T @ lq.Q_uu @ Zu + Zy.T @ Qyy @ Zy)
        chol, jit = cho_with_jitter(Qzz)
        Hinv = cho_solve(chol, np.eye(Qzz.shape[0]))
        Z0 = Zu.T @ Ubar + Zy.T @ Ybar
        Kz = -cho_solve(chol, Z0)
        Vxx = (lq.Q_xx + Z0.T @ Kz - Ubar.T @ pj.dU - Ybar.T @ pj.dY
               - pj.dU.T @ lq.Q_ux - pj.dY.T @ lq.Q_yx)
        Vxx = _sym(Vxx)
        out[k] = StageGains(pj, lq.Q_uu, Qyy, lq.Q_ux, lq.Q_yx, lq.Q_xx, chol, jit, Hinv, Kz,
                            Zu @ Kz - pj.dU, Zy @ Kz - pj.dY, Vxx)
    return out, Vxx


def resolve(stages: Sequence[StageGains], rhs: Sequence[Rhs], V_x_N) -> List[Feedforward]:
    """Gradient sweep reusing the factorization in ``stages``."""
    N = len(stages)
    ff = [None] * N
    Vx = V_x_N
    for k in range(N - 1, -1, -1):
        sg, r = stages[k], rhs[k]
        pj = sg.proj
        du0, dy0 = pj.particular(r.h0)
        qy = r.q_y + Vx
        ubar = r.q_u - sg.Q_uu @ du0
        ybar = qy - sg.Q_yy @ dy0
        z0 = pj.Z_u.T @ ubar + pj.Z_y.T @ ybar
        kz = -(sg.Hinv @ z0)
        Vx = (r.q_x + sg.K_z.T @ z0 - pj.dU.T @ ubar - pj.dY.T @ ybar
              - sg.Q_ux.T @ du0 - sg.Q_yx.T @ dy0)
        ff[k] = Feedforward(kz, pj.Z_u @ kz - du0, pj.Z_y @ kz - dy0, du0, dy0, Vx, r.q_u, qy)
    return ff


def backward_pass(lqs: Sequence[StageLq], projs, terminal: TerminalLq,
                  rhs: Optional[Sequence[Rhs]] = None) -> RiccatiGains:
    """Full backward recursion from the terminal value function derivatives."""
    stages, _ = factorize(lqs, projs, terminal.V_xx)
    ff = resolve(stages, rhs_from_lq(lqs) if rhs is None else rhs, terminal.V_x)
    return RiccatiGains(stages, ff, terminal.V_xx, terminal.V_x)


def with_rhs(gains: RiccatiGains, rhs: Sequence[Rhs], V_x_N) -> RiccatiGains:
    """Same factorization, new zero-order right-hand side."""
    return RiccatiGains(gains.stages, resolve(gains.stages, rhs, V_x_N), gains.V_xx_N, V_x_N)


class RolloutError(FloatingPointError):
    def __init__(self, stage):
        super().__init__(f"non-finite state step at stage {stage}")
        self.stage = stage


def forward_rollout(gains: RiccatiGains, nx0: Optional[int] = None):
    """Linear rollout ``dx_{k+1} = k_y + K_y dx_k`` from ``dx_0 = 0``."""
    if nx0 is None:
        nx0 = gains.stages[0].K_y.shape[1]
    dx = [np.zeros(nx0)]
    for k, (sg, f) in enumerate(zip(gains.stages, gains.ff)):
        nxt = f.k_y + sg.K_y @ dx[-1]
        if not np.all(np.isfinite(nxt)):
            raise RolloutError(k)
        dx.append(nxt)
    return dx


@dataclass
class StepTrajectory:
    dx: list
    du: list
    dz: list
    dlam: list
    dnu: list = field(default_factory=list)
    dt: list = field(default_factory=list)

    def copy(self):
        return StepTrajectory(*[[a.copy() for a in getattr(self, n)]
                                for n in ("dx", "du", "dz", "dlam", "dnu", "dt")])

    def axpy(self, other, a=1.0):
        """In-place ``self += a * other`` (primal and equality-dual parts)."""
        for name in ("dx", "du", "dz", "dlam"):
            mine = getattr(self, name)
            for i, v in enumerate(getattr(other, name)):
                mine[i] = mine[i] + a * v
        return self


def recover_steps(gains: RiccatiGains, dx) -> StepTrajectory:
    """Per-stage reconstruction of ``dz``, ``du`` and the multiplier step.

    The primal part uses the affine particular solution ``du0 + dU dx``; the
    multiplier step solves the stationarity rows in the least-squares sense.
    IPM variables are recovered separately (see :mod:`barrier`).
    """
    du, dz, dlam = [], [], []
    for k, (sg, f) in enumerate(zip(gains.stages, gains.ff)):
        x = dx[k]
        pj = sg.proj
        z = f.k_z + sg.K_z @ x
        u = pj.Z_u @ z - (f.du0 + pj.dU @ x)
        y = dx[k + 1]
        grad_u = f.g_u + sg.Q_uu @ u + sg.Q_ux @ x
        grad_y = f.g_y + sg.Q_yy @ y + sg.Q_yx @ x
        dz.append(z)
        du.append(u)
        dlam.append(pj.dual(grad_u, grad_y))
    return StepTrajectory([a.copy() for a in dx], du, dz, dlam)


def solve_lq(lqs, projs, terminal, rhs=None):
    """Convenience: backward pass, rollout and recovery in one call."""
    gains = backward_pass(lqs, projs, terminal, rhs)
    dx = forward_rollout(gains, lqs[0].nx)
    return gains, recover_steps(gains, dx)


# ---------------------------------------------------------------------------
# linear residual of the (possibly IPM-modified) LQ system and refinement
# ---------------------------------------------------------------------------

def linear_residual(lqs: Sequence[StageLq], terminal: TerminalLq, step: StepTrajectory,
                    rhs: Optional[Sequence[Rhs]] = None, V_x_N=None):
    """Residual of the whole-horizon LQ-KKT rows at ``step``, split per stage.

    Returns ``(rhs_list, V_x_N_residual)`` in the same layout as the
    right-hand side of :func:`resolve`, so the residual can be fed straight
    back into the recursion.
    """
    rhs = rhs_from_lq(lqs) if rhs is None else rhs
    V_x_N = terminal.V_x if V_x_N is None else V_x_N
    out = []
    N = len(lqs)
    for k, (lq, r) in enumerate(zip(lqs, rhs)):
        x, u, y, lam = step.dx[k], step.du[k], step.dx[k + 1], step.dlam[k]
        r_u = r.q_u + lq.Q_uu @ u + lq.Q_ux @ x + lq.h_u.T @ lam
        r_y = r.q_y + lq.Q_yy @ y + lq.Q_yx @ x + lq.h_y.T @ lam
        if k == 0:
            r_x = np.zeros_like(r.q_x)  # x0 is fixed: no stationarity row
        else:
            r_x = r.q_x + lq.Q_xx @ x + lq.Q_ux.T @ u + lq.Q_yx.T @ y + lq.h_x.T @ lam
        r_h = r.h0 + lq.h_x @ x + lq.h_u @ u + lq.h_y @ y
        out.append(Rhs(r_x, r_u, r_y, r_h))
    v_N = V_x_N + terminal.V_xx @ step.dx[N]
    return out, v_N


def residual_norm(res, v_N):
    """L-infinity norm of the assembled global residual (x0 row excluded)."""
    m = 0.0
    N = len(res)
    for k, r in enumerate(res):
        node = r.q_y + (res[k + 1].q_x if k + 1 < N else v_N)
        for a in (r.q_u, node, r.h0):
            if a.size:
                m = max(m, float(np.max(np.abs(a))))
    return m


def refine(gains: RiccatiGains, residual, v_N) -> StepTrajectory:
    """One back-substitution with the linear residual as right-hand side.

    Uses the factorization already stored in ``gains``; the returned step is
    the correction to *add* to the current step.
    """
    g2 = with_rhs(gains, residual, v_N)
    dx = forward_rollout(g2, gains.stages[0].K_y.shape[1])
    return recover_steps(g2, dx)
