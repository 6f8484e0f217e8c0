"""Projection kernels for the nullspace-reduced stage KKT system.

All rank decisions go through :class:`FullPivLU`, a complete-pivoting LU whose
nonzero-pivot test is relative to the largest pivot.  Minimum-norm
(Moore-Penrose) solutions are built from the rank factorization it exposes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

EPS = np.finfo(float).eps


class SingularDynamicsError(np.linalg.LinAlgError):
    """``f_y`` is not invertible; the projection cannot be formed."""


def default_pivot_tol(shape):
    return EPS * max(max(shape), 1)


class FullPivLU:
    """Complete-pivoting LU ``A[p][:, q] = L @ U`` truncated at the numerical rank.

    A pivot is accepted as nonzero when ``|pivot| > pivot_tol * |first pivot|``.
    ``L`` is ``m x r`` unit lower trapezoidal and ``U`` is ``r x n``.
    """

    def __init__(self, a, pivot_tol=None):
        a = np.array(a, dtype=float)
        m, n = a.shape
        self.shape = (m, n)
        self.pivot_tol = default_pivot_tol(a.shape) if pivot_tol is None else float(pivot_tol)
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite matrix passed to FullPivLU")
        p = np.arange(m)
        q = np.arange(n)
        work = a
        r = 0
        first = 0.0
        for k in range(min(m, n)):
            sub = np.abs(work[k:, k:])
            idx = int(np.argmax(sub))
            i, j = divmod(idx, n - k)
            piv = sub[i, j]
            if k == 0:
                first = piv
            if piv == 0.0 or piv <= self.pivot_tol * first:
                break
            i += k
            j += k
            if i != k:
                work[[k, i]] = work[[i, k]]
                p[[k, i]] = p[[i, k]]
            if j != k:
                work[:, [k, j]] = work[:, [j, k]]
                q[[k, j]] = q[[j, k]]
            work[k + 1 :, k] /= work[k, k]
            work[k + 1 :, k + 1 :] -= np.outer(work[k + 1 :, k], work[k, k + 1 :])
            r += 1
        self.rank = r
        self.p = p
        self.q = q
        self.L = np.tril(work[:, :r], -1)
        self.L[np.arange(r), np.arange(r)] = 1.0
        self.U = np.triu(work[:r, :])
        self._pinv = None

    def kernel(self):
        """Basis (``n x (n - r)``) of the right nullspace."""
        m, n = self.shape
        r = self.rank
        if r == 0:
            return np.eye(n)
        top = -sla.solve_triangular(self.U[:, :r], self.U[:, r:], lower=False)
        k = np.vstack([top, np.eye(n - r)])
        out = np.empty_like(k)
        out[self.q] = k
        return out

    def pinv(self):
        """Moore-Penrose inverse from the rank factorization ``A = C @ R``."""
        if self._pinv is None:
            m, n = self.shape
            r = self.rank
            if r == 0:
                self._pinv = np.zeros((n, m))
            else:
                C = np.empty((m, r))
                C[self.p] = self.L
                R = np.empty((r, n))
                R[:, self.q] = self.U
                qc, rc = np.linalg.qr(C)
                qr_, rr = np.linalg.qr(R.T)
                mid = sla.solve_triangular(rr, sla.solve_triangular(rc, np.eye(r)), trans="T")
                self._pinv = qr_ @ mid @ qc.T
        return self._pinv


# ---------------------------------------------------------------------------

@dataclass
class CondensedDynamics:
    F_u: np.ndarray
    F_0: np.ndarray
    lu: tuple


def condense_dynamics(f_y, f_u, f0, pivot_tol=None) -> CondensedDynamics:
    """``F_u = f_y^{-1} f_u`` and ``F_0 = f_y^{-1} f0``."""
    f_y = np.asarray(f_y, dtype=float)
    if f_y.ndim != 2 or f_y.shape[0] != f_y.shape[1]:
        raise ValueError("f_y must be square")
    n = f_y.shape[0]
    if n == 0:
        return CondensedDynamics(np.zeros((0, np.shape(f_u)[1])), np.zeros(0), None)
    if np.array_equal(f_y, -np.eye(n)):
        # explicit dynamics
        return CondensedDynamics(-np.asarray(f_u, dtype=float), -np.asarray(f0, dtype=float), None)
    with warnings.catch_warnings():
        # singularity is detected and reported below
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(f_y, check_finite=True)
    d = np.abs(np.diag(lu))
    tol = default_pivot_tol(f_y.shape) if pivot_tol is None else pivot_tol
    if d.min() <= tol * d.max() or d.max() == 0.0:
        raise SingularDynamicsError("f_y is singular to working precision")
    F_u = sla.lu_solve((lu, piv), f_u)
    F_0 = sla.lu_solve((lu, piv), f0)
    return CondensedDynamics(F_u, F_0, (lu, piv))


@dataclass
class NullspaceBasis:
    Z_u: np.ndarray
    Z_y: np.ndarray
    rank: int
    pivot_tol: float

    @property
    def nz(self):
        return self.Z_u.shape[1]


def nullspace_basis(s_y, c_u, cond: CondensedDynamics, pivot_tol=None) -> NullspaceBasis:
    """Kernel of the stage equality Jacobian restricted to ``(u, y)``.

    ``Z_u`` spans the kernel of ``[-s_y F_u; c_u]`` and ``Z_y = -F_u Z_u``.
    Without ``s``/``c`` rows ``Z_u`` is exactly the identity.
    """
    F_u = cond.F_u
    nu = F_u.shape[1]
    s_y = np.asarray(s_y, dtype=float).reshape(-1, F_u.shape[0])
    c_u = np.asarray(c_u, dtype=float).reshape(-1, nu)
    if s_y.shape[0] + c_u.shape[0] == 0:
        tol = default_pivot_tol((0, nu)) if pivot_tol is None else pivot_tol
        return NullspaceBasis(np.eye(nu), -F_u, 0, tol)
    if pivot_tol is not None and pivot_tol <= 0:
        raise ValueError("pivot_tol must be positive")
    red = np.vstack([-s_y @ F_u, c_u])
    lu = FullPivLU(red, pivot_tol)
    Z = lu.kernel()
    if Z.shape[1]:
        Z, _ = np.linalg.qr(Z)
    return NullspaceBasis(Z, -F_u @ Z, lu.rank, lu.pivot_tol)


def stacked_jacobian(f_u, f_y, s_y, c_u):
    """``h_{u,y} = [[f_u, f_y], [0, s_y], [c_u, 0]]``."""
    nf, nu = np.shape(f_u)
    ny = np.shape(f_y)[1]
    s_y = np.asarray(s_y, dtype=float).reshape(-1, ny)
    c_u = np.asarray(c_u, dtype=float).reshape(-1, nu)
    ns, nc = s_y.shape[0], c_u.shape[0]
    A = np.zeros((nf + ns + nc, nu + ny))
    A[:nf, :nu] = f_u
    A[:nf, nu:] = f_y
    A[nf : nf + ns, nu:] = s_y
    A[nf + ns :, :nu] = c_u
    return A


@dataclass
class ParticularSolution:
    du: np.ndarray
    dy: np.ndarray
    consistent: bool
    residual: float


def _consistency(A, sol, rhs):
    res = A @ sol - rhs
    r = float(np.max(np.abs(res))) if res.size else 0.0
    scale = max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 0.0)
    return r <= 1e-8 * scale, r


class StageProjection:
    """Per-stage projection data reused across every solve of one iteration.

    Holds the nullspace basis, a right inverse ``R`` of ``h_{u,y}`` and the
    first-order particular solution (right-hand side ``h_x``).  With ``s`` or
    ``c`` rows ``R`` is the Moore-Penrose inverse; a dynamics-only stage uses
    ``R = [0; f_y^{-1}]``, which makes the recursion coincide with the
    classical Riccati recursion (``Z_u = I``, no input correction).  The
    zero-order particular solution depends on the right-hand side and is
    produced by :meth:`particular`.
    """

    def __init__(self, lq, pivot_tol=None):
        nu, ny = lq.nu, lq.ny
        self.nu, self.ny = nu, ny
        self.cond = condense_dynamics(lq.f_y, lq.f_u, lq.f0)
        self.basis = nullspace_basis(lq.s_y, lq.c_u, self.cond, pivot_tol)
        self.A = np.hstack([lq.h_u, lq.h_y])
        if lq.ns + lq.nc == 0:
            R = np.zeros((nu + ny, ny))
            if self.cond.lu is None:  # f_y = -I
                R[nu:] = -np.eye(ny)
            elif ny:
                R[nu:] = sla.lu_solve(self.cond.lu, np.eye(ny))
            self.rinv = R
            self.rank = ny
        else:
            lu = FullPivLU(self.A, pivot_tol)
            self.rinv = lu.pinv()
            self.rank = lu.rank
        P1 = self.rinv @ lq.h_x
        self.dU, self.dY = P1[:nu], P1[nu:]

    @property
    def Z_u(self):
        return self.basis.Z_u

    @property
    def Z_y(self):
        return self.basis.Z_y

    def particular(self, rhs):
        sol = self.rinv @ rhs
        return sol[: self.nu], sol[self.nu :]

    def dual(self, grad_u, grad_y):
        """``h_{u,y}^T dlam = -[grad_u; grad_y]``, least squares when rows are dependent."""
        return -(self.rinv.T @ np.concatenate([grad_u, grad_y]))


def particular_solution(f_u, f_y, s_y, c_u, rhs, pivot_tol=None) -> ParticularSolution:
    """Minimum-norm least-squares solution of ``h_{u,y} [du; dy] = rhs``.

    ``rhs`` may be a vector or a matrix (one column per right-hand side).
    """
    A = stacked_jacobian(f_u, f_y, s_y, c_u)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != A.shape[0]:
        raise ValueError(f"rhs has {rhs.shape[0]} rows, expected {A.shape[0]}")
    sol = FullPivLU(A, pivot_tol).pinv() @ rhs
    ok, r = _consistency(A, sol, rhs)
    nu = np.shape(f_u)[1]
    return ParticularSolution(sol[:nu], sol[nu:], ok, r)


@dataclass
class DualStep:
    lam_f: np.ndarray
    lam_s: np.ndarray
    lam_c: np.ndarray
    residual: float

    @property
    def stacked(self):
        return np.concatenate([self.lam_f, self.lam_s, self.lam_c])


def dual_reconstruct(f_u, f_y, s_y, c_u, grad_u, grad_y, pivot_tol=None) -> DualStep:
    """Multiplier step from ``h_{u,y}^T dlam = -[grad_u; grad_y]`` (least squares)."""
    A = stacked_jacobian(f_u, f_y, s_y, c_u)
    rhs = -np.concatenate([np.asarray(grad_u, float), np.asarray(grad_y, float)])
    lam = FullPivLU(A, pivot_tol).pinv().T @ rhs
    res = A.T @ lam - rhs
    nf = np.shape(f_u)[0]
    ns = np.asarray(s_y).reshape(-1, np.shape(f_y)[1]).shape[0]
    r = float(np.max(np.abs(res))) if res.size else 0.0
    return DualStep(lam[:nf], lam[nf : nf + ns], lam[nf + ns :], r)
