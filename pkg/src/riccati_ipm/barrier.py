"""Regularized primal-dual interior-point machinery.

Inequalities ``g(w) <= 0`` are slacked as ``g + t = 0`` with ``t, nu > 0`` and
``nu * t = mu``.  Eliminating the slack and multiplier steps from the
linearized system leaves the stage LQ structure intact: only gradients and
Hessian blocks receive increments (see :func:`modify_lq`), with
``T_rho = diag(t) + rho * diag(nu)`` bounding the Hessian increment by
``1 / rho``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .model import OcpProblem, StageLq

T_MIN = 1e-2
MU0 = 1.0
RHO = 1e-8
TAU = 0.995


class ContractViolation(ValueError):
    pass


@dataclass
class IpmState:
    t: list
    nu: list
    mu: float
    rho: float = RHO

    @property
    def n_ipm(self):
        return sum(a.size for a in self.t)


def init_ipm(g0: Sequence[np.ndarray], mu0=MU0, t_min=T_MIN, rho=RHO) -> IpmState:
    """``t = max(-g0, t_min)``, ``nu = mu0 / t``, ``mu = mu0``."""
    ts = [np.maximum(-np.asarray(g, dtype=float), t_min) for g in g0]
    nus = [mu0 / t for t in ts]
    return IpmState(ts, nus, float(mu0), rho)


def ipm_residuals(g, t, nu, mu, corrector=None):
    """``r_g = g + t`` and ``r_s = nu * t - mu`` (plus an optional corrector term)."""
    r_g = g + t
    r_s = nu * t - mu
    if corrector is not None:
        r_s = r_s + corrector
    return r_g, r_s


@dataclass
class LqModification:
    dQ_x: np.ndarray
    dQ_u: np.ndarray
    dQ_y: np.ndarray
    dQ_xx: np.ndarray
    dQ_uu: np.ndarray
    dQ_yy: np.ndarray
    dQ_ux: np.ndarray
    dQ_yx: np.ndarray


def _weights(t, nu, rho):
    if min(t.min(), nu.min()) <= 0:
        raise ContractViolation("slacks and multipliers must be strictly positive")
    return 1.0 / (t + rho * nu)


def gradient_increment(lq: StageLq, t, nu, mu, rho, corrector=None):
    """``g_w^T T_rho^{-1} (N r_g - r_s)`` for w in (x, u, y)."""
    if lq.ng == 0:
        return np.zeros(lq.nx), np.zeros(lq.nu), np.zeros(lq.ny)
    w = _weights(t, nu, rho)
    r_g, r_s = ipm_residuals(lq.g0, t, nu, mu, corrector)
    v = w * (nu * r_g - r_s)
    return lq.g_x.T @ v, lq.g_u.T @ v, lq.g_y.T @ v


def modify_lq(lq: StageLq, t, nu, mu, rho=RHO, corrector=None) -> LqModification:
    """Gradient and Hessian increments that fold the slack/multiplier rows into the LQ data.

    Without a corrector term the gradient increment equals
    ``(T_rho^{-1} N g + mu T_rho^{-1} 1)^T g_w``.  There is no u-y block:
    ``psi`` rows have zero ``y`` Jacobian and ``phi`` rows zero ``u`` Jacobian.
    """
    if lq.ng == 0:
        z = np.zeros
        return LqModification(z(lq.nx), z(lq.nu), z(lq.ny), z((lq.nx, lq.nx)),
                              z((lq.nu, lq.nu)), z((lq.ny, lq.ny)), z((lq.nu, lq.nx)),
                              z((lq.ny, lq.nx)))
    d = _weights(t, nu, rho) * nu
    gx, gu, gy = lq.g_x, lq.g_u, lq.g_y
    dgx = d[:, None] * gx
    dx, du, dy = gradient_increment(lq, t, nu, mu, rho, corrector)
    return LqModification(
        dx, du, dy,
        gx.T @ dgx,
        gu.T @ (d[:, None] * gu),
        gy.T @ (d[:, None] * gy),
        gu.T @ dgx,
        gy.T @ dgx,
    )


def apply_modification(lq: StageLq, mod: LqModification) -> StageLq:
    """A modified copy; ``lq`` itself is left untouched."""
    return replace(
        lq,
        Q_x=lq.Q_x + mod.dQ_x, Q_u=lq.Q_u + mod.dQ_u, Q_y=lq.Q_y + mod.dQ_y,
        Q_xx=lq.Q_xx + mod.dQ_xx, Q_uu=lq.Q_uu + mod.dQ_uu, Q_yy=lq.Q_yy + mod.dQ_yy,
        Q_ux=lq.Q_ux + mod.dQ_ux, Q_yx=lq.Q_yx + mod.dQ_yx,
    )


def recover_ipm_step(lq: StageLq, dx, du, dy, t, nu, mu, rho=RHO, corrector=None):
    """Slack and multiplier steps of one stage from its primal step.

    ``dnu = T_rho^{-1} [-r_s + N (r_g + g_w dw)]`` and
    ``dt = -r_g - g_w dw + rho dnu``.
    """
    if lq.ng == 0:
        return np.zeros(0), np.zeros(0)
    r_g, r_s = ipm_residuals(lq.g0, t, nu, mu, corrector)
    lin = r_g + lq.g_x @ dx + lq.g_u @ du + lq.g_y @ dy
    dnu = (nu * lin - r_s) / (t + rho * nu)
    dt = -lin + rho * dnu
    return dnu, dt


def fraction_to_boundary(v, dv, tau=TAU):
    """Largest ``a`` in [0, 1] with ``v + a dv >= (1 - tau) v`` elementwise.

    ``v`` and ``dv`` are per-stage lists of arrays.
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    if not len(v):
        return 1.0
    a = np.concatenate(v)
    d = np.concatenate(dv)
    neg = d < 0
    if not neg.any():
        return 1.0
    alpha = min(1.0, float(np.min(-tau * a[neg] / d[neg])))
    # the quotient can round up by an ulp; step back until the bound holds exactly
    floor = (1 - tau) * a[neg]
    while alpha > 0 and np.any(a[neg] + alpha * d[neg] < floor):
        alpha = float(np.nextafter(alpha, 0.0))
    return alpha


def step_bounds(ts, dts, nus, dnus, tau=TAU):
    """Primal (slack) and inequality-dual step size caps."""
    return fraction_to_boundary(ts, dts, tau), fraction_to_boundary(nus, dnus, tau)


def complementarity(nus, ts, dnus=None, dts=None, alpha=0.0, alpha_nu=0.0):
    """Total complementarity ``sum (nu + a_nu dnu)^T (t + a dt)`` in stage order."""
    if not len(nus):
        return 0.0
    n = np.concatenate(nus)
    t = np.concatenate(ts)
    if dnus is not None:
        n = n + alpha_nu * np.concatenate(dnus)
        t = t + alpha * np.concatenate(dts)
    return float(n @ t)


def mpc_update(nus, ts, dnus_aff, dts_aff, alpha, alpha_nu, n_ipm):
    """Recentering ``sigma = clip(trial / current, 0, 1)^3`` and ``mu = sigma * current / n_ipm``.

    Returns ``None`` when there are no inequality rows.
    """
    if n_ipm == 0:
        return None
    cur = complementarity(nus, ts)
    trial = complementarity(nus, ts, dnus_aff, dts_aff, alpha, alpha_nu)
    ratio = trial / cur if cur > 0 else 0.0
    sigma = float(np.clip(ratio, 0.0, 1.0) ** 3)
    return sigma, sigma * cur / n_ipm


def corrector_safeguard(trial_with, trial_without):
    """Keep the corrector only if it does not increase the trial complementarity."""
    return trial_with <= trial_without


# ---------------------------------------------------------------------------
# equality constraints handled as zero-width boxes
# ---------------------------------------------------------------------------

def _box(fn):
    def boxed(a, b):
        h, ha, hb = fn(a, b)
        h = np.asarray(h, dtype=float)
        return (np.concatenate([h, -h]), np.vstack([ha, -np.asarray(ha)]),
                np.vstack([hb, -np.asarray(hb)]))
    return boxed


def _stack_ineq(first, n1, second, n2):
    if not n1:
        return second
    if not n2:
        return first

    def both(a, b):
        v1, a1, b1 = first(a, b)
        v2, a2, b2 = second(a, b)
        return np.concatenate([v1, v2]), np.vstack([a1, a2]), np.vstack([b1, b2])
    return both


def equality_to_box(problem: OcpProblem, groups=("c", "s")) -> OcpProblem:
    """Move ``c`` and/or ``s`` equality rows into the inequality set.

    Each row ``h_i`` becomes the pair ``h_i <= 0`` and ``-h_i <= 0``; the
    boxed rows are prepended to ``psi`` (for ``c``) or ``phi`` (for ``s``)
    and are no longer part of the projection.
    """
    groups = set(groups)
    unknown = groups - {"c", "s"}
    if unknown:
        raise ValueError(f"unknown equality group(s): {sorted(unknown)}")
    stages = []
    for st in problem.stages:
        kw = {}
        if "c" in groups and st.nc:
            kw.update(eq_xu=None, nc=0,
                      ineq_xu=_stack_ineq(_box(st.eq_xu), 2 * st.nc, st.ineq_xu, st.npsi),
                      npsi=2 * st.nc + st.npsi)
        if "s" in groups and st.ns:
            kw.update(eq_xy=None, ns=0,
                      ineq_xy=_stack_ineq(_box(st.eq_xy), 2 * st.ns, st.ineq_xy, st.nphi),
                      nphi=2 * st.ns + st.nphi)
        stages.append(replace(st, **kw) if kw else st)
    return replace(problem, stages=tuple(stages))
