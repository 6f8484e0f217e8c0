"""Dense whole-horizon reference solvers.

:func:`assemble_dense` writes the stagewise linearized KKT system (with the
slack and multiplier rows kept explicit) into one dense matrix without any
elimination; :func:`dense_solve` factorizes it directly.  The structured
solver is checked against these.  :func:`dense_barrier_solve` is an
independent textbook primal-dual barrier method with a monotone barrier
schedule for small nonlinear instances.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .model import (Iterate, OcpProblem, StageLq, TerminalLq, evaluate_trajectory,
                    residual_from_lq)

MAX_DENSE_VARS = 500


class SingularKktError(np.linalg.LinAlgError):
    def __init__(self, pivot):
        super().__init__(f"dense KKT matrix is singular at pivot {pivot}")
        self.pivot = pivot


@dataclass
class DenseKkt:
    matrix: np.ndarray
    rhs: np.ndarray
    index: dict  # (stage, block) -> slice; blocks: u, y, lam, nu, t

    @property
    def n(self):
        return self.matrix.shape[0]

    def block(self, sol, k, name):
        return sol[self.index[(k, name)]]


def _layout(lqs):
    index = {}
    off = 0
    for k, lq in enumerate(lqs):
        for name, n in (("u", lq.nu), ("y", lq.ny), ("lam", lq.nh), ("nu", lq.ng), ("t", lq.ng)):
            index[(k, name)] = slice(off, off + n)
            off += n
    return index, off


def assemble_dense(lqs: Sequence[StageLq], terminal: TerminalLq, ts=None, nus=None,
                   mu=0.0, rho=1e-8, corrector=None) -> DenseKkt:
    """Whole-horizon linearized KKT system (initial state step eliminated).

    ``lqs`` must be the *unmodified* stage data.  ``corrector`` optionally
    adds a per-stage term to the complementarity residual.
    """
    N = len(lqs)
    index, n = _layout(lqs)
    K = np.zeros((n, n))
    b = np.zeros(n)

    def add_x(rk, rn, k, blk):
        # column of x_k, which is y of stage k-1; x_0 is fixed
        if k > 0:
            K[index[(rk, rn)], index[(k - 1, "y")]] += blk

    for k, lq in enumerate(lqs):
        iu, iy, il = index[(k, "u")], index[(k, "y")], index[(k, "lam")]
        # u rows
        K[iu, iu] += lq.Q_uu
        add_x(k, "u", k, lq.Q_ux)
        K[iu, il] += lq.h_u.T
        b[iu] -= lq.Q_u
        # y rows (node k+1): stage k part
        K[iy, iy] += lq.Q_yy
        add_x(k, "y", k, lq.Q_yx)
        K[iy, il] += lq.h_y.T
        b[iy] -= lq.Q_y
        # node k rows contributed by stage k (x = y of stage k-1)
        if k > 0:
            ix = index[(k - 1, "y")]
            K[ix, ix] += lq.Q_xx
            K[ix, iu] += lq.Q_ux.T
            K[ix, iy] += lq.Q_yx.T
            K[ix, il] += lq.h_x.T
            b[ix] -= lq.Q_x
        # equality rows
        K[il, iu] += lq.h_u
        K[il, iy] += lq.h_y
        add_x(k, "lam", k, lq.h_x)
        b[il] -= lq.h0
        if lq.ng:
            inu, it = index[(k, "nu")], index[(k, "t")]
            t, nu = ts[k], nus[k]
            K[iu, inu] += lq.g_u.T
            K[iy, inu] += lq.g_y.T
            if k > 0:
                K[index[(k - 1, "y")], inu] += lq.g_x.T
            K[inu, iu] += lq.g_u
            K[inu, iy] += lq.g_y
            add_x(k, "nu", k, lq.g_x)
            K[inu, inu] -= rho * np.eye(lq.ng)
            K[inu, it] += np.eye(lq.ng)
            K[it, inu] += np.diag(t)
            K[it, it] += np.diag(nu)
            b[inu] -= lq.g0 + t
            r_s = nu * t - mu
            if corrector is not None:
                r_s = r_s + corrector[k]
            b[it] -= r_s
    iy = index[(N - 1, "y")]
    K[iy, iy] += terminal.V_xx
    b[iy] -= terminal.V_x
    return DenseKkt(K, b, index)


@dataclass
class DenseSolution:
    x: np.ndarray
    residual: float
    singular: bool = False
    pivot: Optional[int] = None


def dense_solve(kkt: DenseKkt, pivot_tol=None, allow_lstsq=True) -> DenseSolution:
    """Direct LU solve; falls back to minimum-norm least squares when singular."""
    A, b = kkt.matrix, kkt.rhs
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise FloatingPointError("non-finite dense KKT data")
    n = A.shape[0]
    if n == 0:
        return DenseSolution(np.zeros(0), 0.0)
    with warnings.catch_warnings():
        # singular pivots are handled below
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(A, check_finite=False)
    d = np.abs(np.diag(lu))
    tol = (np.finfo(float).eps * n if pivot_tol is None else pivot_tol) * max(d.max(), 1e-300)
    bad = np.flatnonzero(d <= tol)
    if bad.size:
        if not allow_lstsq:
            raise SingularKktError(int(bad[0]))
        x = np.linalg.lstsq(A, b, rcond=None)[0]
        return DenseSolution(x, float(np.max(np.abs(A @ x - b))), True, int(bad[0]))
    x = sla.lu_solve((lu, piv), b, check_finite=False)
    return DenseSolution(x, float(np.max(np.abs(A @ x - b))))


@dataclass
class DenseStep:
    dx: list
    du: list
    dlam: list
    dnu: list
    dt: list


def split_solution(kkt: DenseKkt, sol, nx0) -> DenseStep:
    N = 1 + max(k for k, _ in kkt.index)
    dx = [np.zeros(nx0)] + [kkt.block(sol, k, "y") for k in range(N)]
    return DenseStep(dx, [kkt.block(sol, k, "u") for k in range(N)],
                     [kkt.block(sol, k, "lam") for k in range(N)],
                     [kkt.block(sol, k, "nu") for k in range(N)],
                     [kkt.block(sol, k, "t") for k in range(N)])


# ---------------------------------------------------------------------------
# monotone barrier reference for tiny nonlinear problems
# ---------------------------------------------------------------------------

@dataclass
class BarrierReference:
    iterate: Iterate
    kkt: float
    converged: bool
    iterations: int


def _global_blocks(problem, it):
    """Stack stage data into whole-horizon Hessian, gradients and Jacobians.

    Decision vector: ``[x_1 .. x_N, u_0 .. u_{N-1}]``.
    """
    lqs, term = evaluate_trajectory(problem, it)
    N = problem.N
    nxs = [st.ny for st in problem.stages]
    nus = [st.nu for st in problem.stages]
    xoff = np.concatenate([[0], np.cumsum(nxs)]).astype(int)
    uoff = xoff[-1] + np.concatenate([[0], np.cumsum(nus)]).astype(int)
    n = int(uoff[-1])
    H = np.zeros((n, n))
    grad = np.zeros(n)
    eq_rows, ineq_rows = [], []

    def xs_(k):  # slice of x_k in z (k >= 1)
        return slice(xoff[k - 1], xoff[k])

    def us_(k):
        return slice(uoff[k], uoff[k + 1])

    for k, (st, lq) in enumerate(zip(problem.stages, lqs)):
        # raw cost gradient: evaluate without multipliers
        _, l_x, l_u, l_xx, l_uu, l_ux = st.cost(it.xs[k], it.us[k])
        su = us_(k)
        grad[su] += l_u
        H[su, su] += l_uu
        if k > 0:
            sx = xs_(k)
            grad[sx] += l_x
            H[sx, sx] += l_xx
            H[su, sx] += l_ux
            H[sx, su] += l_ux.T
        for rows0, Jx, Ju, Jy, dest in ((lq.h0, lq.h_x, lq.h_u, lq.h_y, eq_rows),
                                        (lq.g0, lq.g_x, lq.g_u, lq.g_y, ineq_rows)):
            if rows0.size == 0:
                continue
            J = np.zeros((rows0.size, n))
            if k > 0:
                J[:, xs_(k)] = Jx
            J[:, su] = Ju
            J[:, xs_(k + 1)] = Jy
            dest.append((rows0, J))
    sN = xs_(N)
    grad[sN] += term.V_x
    H[sN, sN] += term.V_xx

    def stack(rows):
        if not rows:
            return np.zeros(0), np.zeros((0, n))
        return np.concatenate([r for r, _ in rows]), np.vstack([J for _, J in rows])

    h, Jh = stack(eq_rows)
    g, Jg = stack(ineq_rows)
    return H, grad, h, Jh, g, Jg, xoff, uoff


def _unpack(problem, z, xoff, uoff):
    N = problem.N
    xs = [problem.x0.copy()] + [z[xoff[k]:xoff[k + 1]].copy() for k in range(N)]
    us = [z[uoff[k]:uoff[k + 1]].copy() for k in range(N)]
    return xs, us


def _split(vec, sizes):
    out, off = [], 0
    for s in sizes:
        out.append(vec[off:off + s].copy())
        off += s
    return out


def dense_barrier_solve(problem: OcpProblem, xs=None, us=None,
                        mu_schedule=(1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8,
                                     1e-9, 1e-10, 1e-11),
                        tol=1e-8, max_newton=50, tau=0.99) -> BarrierReference:
    """Whole-horizon primal-dual barrier method with a fixed decreasing ``mu`` list.

    Each barrier subproblem is solved by full Newton steps on the perturbed
    KKT conditions (slacks eliminated, ``Sigma = T^{-1} N``), damped only by
    the fraction-to-boundary rule.  Intended for small problems.
    """
    it = Iterate.initial(problem, xs, us)
    H, grad, h, Jh, g, Jg, xoff, uoff = _global_blocks(problem, it)
    n = H.shape[0]
    if n > MAX_DENSE_VARS:
        raise ValueError(f"dense barrier reference limited to {MAX_DENSE_VARS} variables")
    z = np.concatenate([x for x in it.xs[1:]] + [u for u in it.us])
    lam = np.zeros(h.size)
    t = np.maximum(-g, 1.0)
    nu = np.ones(g.size)
    nh_sizes = [st.nh for st in problem.stages]
    ng_sizes = [st.ng for st in problem.stages]
    iters = 0

    def make_iterate(z, lam, nu, t):
        xs_, us_ = _unpack(problem, z, xoff, uoff)
        return Iterate(xs_, us_, _split(lam, nh_sizes), _split(nu, ng_sizes),
                       _split(t, ng_sizes), 0.0)

    final_mu = mu_schedule[-1] if g.size else 0.0
    for mu in (mu_schedule if g.size else (0.0,)):
        for _ in range(max_newton):
            itr = make_iterate(z, lam, nu, t)
            H, grad, h, Jh, g, Jg, *_ = _global_blocks(problem, itr)
            r_d = grad + Jh.T @ lam + Jg.T @ nu
            r_g = g + t
            r_c = nu * t - mu
            err = max(np.max(np.abs(r_d), initial=0.0), np.max(np.abs(h), initial=0.0),
                      np.max(np.abs(r_g), initial=0.0), np.max(np.abs(r_c), initial=0.0))
            # the last subproblem is solved tighter so the unperturbed residual is below tol
            target = 0.1 * tol if mu <= final_mu else max(tol, 0.1 * mu)
            if err <= target:
                break
            iters += 1
            sig = nu / t
            # eliminate dt = -r_g - Jg dz, dnu = (-r_c - nu*dt) / t
            W = H + Jg.T @ (sig[:, None] * Jg)
            rhs_z = -(r_d + Jg.T @ ((nu * r_g - r_c) / t))
            m = h.size
            KKT = np.block([[W, Jh.T], [Jh, np.zeros((m, m))]])
            sol = np.linalg.lstsq(KKT, np.concatenate([rhs_z, -h]), rcond=None)[0]
            dz, dlam = sol[:n], sol[n:]
            dt = -r_g - Jg @ dz
            dnu = (-r_c - nu * dt) / t
            a_p = a_d = 1.0
            if g.size:
                neg = dt < 0
                if np.any(neg):
                    a_p = min(1.0, float(np.min(-tau * t[neg] / dt[neg])))
                neg = dnu < 0
                if np.any(neg):
                    a_d = min(1.0, float(np.min(-tau * nu[neg] / dnu[neg])))
            z = z + a_p * dz
            t = t + a_p * dt
            lam = lam + a_p * dlam
            nu = nu + a_d * dnu
    itr = make_iterate(z, lam, nu, t)
    lqs, term = evaluate_trajectory(problem, itr)
    kkt = residual_from_lq(lqs, term, itr).total
    return BarrierReference(itr, kkt, kkt <= tol, iters)
