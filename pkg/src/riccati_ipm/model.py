"""OCP data model, stagewise LQ evaluation and the KKT residual.

A problem is a list of :class:`Stage` objects (one per shooting interval) plus
a :class:`TerminalCost`.  Stage ``k`` couples the triplet ``(x, u, y)`` where
``y`` is the next state ``x_{k+1}``.  Every evaluator returns its value
together with first derivatives; costs additionally return a Gauss-Newton
Hessian.  Equality and inequality multipliers are stacked per stage as
``lam = [lam_f, lam_s, lam_c]`` and ``nu = [nu_phi, nu_psi]``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """An evaluator returned an array of the wrong shape."""


class NonFiniteError(FloatingPointError):
    """An evaluator returned NaN or inf."""


def _empty(m, n=None):
    return np.zeros(m) if n is None else np.zeros((m, n))


@dataclass(frozen=True)
class Stage:
    """Evaluators for one shooting interval.

    ``cost(x, u) -> (l, l_x, l_u, l_xx, l_uu, l_ux)``
    ``dynamics(x, u, y) -> (f, f_x, f_u, f_y)`` (implicit, ``f = 0``)
    ``eq_xu(x, u) -> (c, c_x, c_u)``, ``eq_xy(x, y) -> (s, s_x, s_y)``
    ``ineq_xu(x, u) -> (psi, psi_x, psi_u)``, ``ineq_xy(x, y) -> (phi, phi_x, phi_y)``
    """

    nx: int
    nu: int
    ny: int
    cost: Callable
    dynamics: Callable
    eq_xu: Optional[Callable] = None
    nc: int = 0
    eq_xy: Optional[Callable] = None
    ns: int = 0
    ineq_xu: Optional[Callable] = None
    npsi: int = 0
    ineq_xy: Optional[Callable] = None
    nphi: int = 0

    @property
    def nh(self):
        return self.ny + self.ns + self.nc

    @property
    def ng(self):
        return self.nphi + self.npsi


@dataclass(frozen=True)
class TerminalCost:
    """``cost(x) -> (l, l_x, l_xx)``."""

    nx: int
    cost: Callable


@dataclass(frozen=True)
class OcpProblem:
    x0: np.ndarray
    stages: tuple
    terminal: TerminalCost
    name: str = ""
    # optional problem-specific initial trajectory (xs, us)
    guess: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).copy())
        object.__setattr__(self, "stages", tuple(self.stages))
        self.x0.setflags(write=False)
        if len(self.stages) < 1:
            raise ValueError("an OCP needs at least one stage")

    @property
    def N(self):
        return len(self.stages)

    @property
    def n_ipm(self):
        return sum(st.ng for st in self.stages)

    def default_trajectory(self):
        """x held at x0 (padded/truncated when nx varies), u = 0."""
        xs = [self.x0.copy()]
        for st in self.stages:
            prev = xs[-1]
            nxt = np.zeros(st.ny)
            m = min(st.ny, prev.size)
            nxt[:m] = prev[:m]
            xs.append(nxt)
        us = [np.zeros(st.nu) for st in self.stages]
        return xs, us

    def initial_guess(self):
        if self.guess is None:
            return self.default_trajectory()
        xs, us = self.guess
        return [np.array(x, dtype=float) for x in xs], [np.array(u, dtype=float) for u in us]


@dataclass
class StageLq:
    """Gauss-Newton LQ data of one stage.

    Constraint data is stored stacked: ``h = [f; s; c]`` and ``g = [phi; psi]``
    with Jacobians w.r.t. ``x``, ``u`` and ``y`` (structurally zero blocks are
    stored as zeros).  Gradients already include ``lam^T h_w + nu^T g_w``; the
    value function of the next node is *not* included in ``Q_y``/``Q_yy``.
    There is no ``Q_uy`` block.
    """

    nf: int
    ns: int
    nc: int
    nphi: int
    npsi: int
    cost: float
    h0: np.ndarray
    h_x: np.ndarray
    h_u: np.ndarray
    h_y: np.ndarray
    g0: np.ndarray
    g_x: np.ndarray
    g_u: np.ndarray
    g_y: np.ndarray
    Q_x: np.ndarray
    Q_u: np.ndarray
    Q_y: np.ndarray
    Q_xx: np.ndarray
    Q_uu: np.ndarray
    Q_yy: np.ndarray
    Q_ux: np.ndarray
    Q_yx: np.ndarray

    @property
    def nx(self):
        return self.Q_x.size

    @property
    def nu(self):
        return self.Q_u.size

    @property
    def ny(self):
        return self.Q_y.size

    @property
    def nh(self):
        return self.h0.size

    @property
    def ng(self):
        return self.g0.size

    # component views
    @property
    def f0(self):
        return self.h0[: self.nf]

    @property
    def s0(self):
        return self.h0[self.nf : self.nf + self.ns]

    @property
    def c0(self):
        return self.h0[self.nf + self.ns :]

    @property
    def f_x(self):
        return self.h_x[: self.nf]

    @property
    def f_u(self):
        return self.h_u[: self.nf]

    @property
    def f_y(self):
        return self.h_y[: self.nf]

    @property
    def s_x(self):
        return self.h_x[self.nf : self.nf + self.ns]

    @property
    def s_y(self):
        return self.h_y[self.nf : self.nf + self.ns]

    @property
    def c_x(self):
        return self.h_x[self.nf + self.ns :]

    @property
    def c_u(self):
        return self.h_u[self.nf + self.ns :]


@dataclass
class TerminalLq:
    cost: float
    V_x: np.ndarray
    V_xx: np.ndarray


@dataclass
class Iterate:
    """Primal-dual iterate.  ``xs[0]`` is always the problem's ``x0``."""

    xs: list
    us: list
    lams: list
    nus: list
    ts: list
    mu: float = 0.0

    @classmethod
    def initial(cls, problem: OcpProblem, xs=None, us=None):
        if xs is None or us is None:
            dxs, dus = problem.initial_guess()
            xs = dxs if xs is None else xs
            us = dus if us is None else us
        xs = [np.asarray(x, dtype=float).copy() for x in xs]
        us = [np.asarray(u, dtype=float).copy() for u in us]
        if len(xs) != problem.N + 1 or len(us) != problem.N:
            raise DimensionError(
                f"trajectory lengths {len(xs)}/{len(us)} do not match N={problem.N}"
            )
        if not np.array_equal(xs[0], problem.x0):
            raise ValueError("initial trajectory must start at the problem's x0")
        lams = [np.zeros(st.nh) for st in problem.stages]
        nus = [np.zeros(st.ng) for st in problem.stages]
        ts = [np.zeros(st.ng) for st in problem.stages]
        return cls(xs, us, lams, nus, ts, 0.0)

    def copy(self):
        return Iterate(
            [a.copy() for a in self.xs],
            [a.copy() for a in self.us],
            [a.copy() for a in self.lams],
            [a.copy() for a in self.nus],
            [a.copy() for a in self.ts],
            self.mu,
        )


@dataclass(frozen=True)
class KktResidual:
    stationarity: float
    eq_violation: float
    ineq_violation: float
    complementarity: float

    @property
    def total(self):
        return max(self.stationarity, self.eq_violation, self.ineq_violation,
                   self.complementarity)

    @property
    def finite(self):
        return bool(np.isfinite(self.total))

    def as_dict(self):
        return {
            "total": self.total,
            "stationarity": self.stationarity,
            "eq_violation": self.eq_violation,
            "ineq_violation": self.ineq_violation,
            "complementarity": self.complementarity,
        }


def _check(name, k, arr, shape):
    arr = np.asarray(arr, dtype=float)
    if arr.shape != shape:
        if arr.size == 0 and 0 in shape:
            return np.zeros(shape)
        raise DimensionError(f"stage {k}: {name} has shape {arr.shape}, expected {shape}")
    if arr.size and not np.isfinite(arr.sum()):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"stage {k}: {name} is not finite")
    return arr


def evaluate_stage(problem: OcpProblem, k: int, x, u, y, lam, nu) -> StageLq:
    st = problem.stages[k]
    nx, nu_, ny = st.nx, st.nu, st.ny
    if x.shape != (nx,) or u.shape != (nu_,) or y.shape != (ny,):
        raise DimensionError(f"stage {k}: primal shapes {x.shape}, {u.shape}, {y.shape}"
                             f" do not match ({nx},), ({nu_},), ({ny},)")
    l, l_x, l_u, l_xx, l_uu, l_ux = st.cost(x, u)
    l_x = _check("l_x", k, l_x, (nx,))
    l_u = _check("l_u", k, l_u, (nu_,))
    l_xx = _check("l_xx", k, l_xx, (nx, nx))
    l_uu = _check("l_uu", k, l_uu, (nu_, nu_))
    l_ux = _check("l_ux", k, l_ux, (nu_, nx))
    if not np.isfinite(l):
        raise NonFiniteError(f"stage {k}: cost is not finite")

    f, f_x, f_u, f_y = st.dynamics(x, u, y)
    blocks_0 = [_check("f", k, f, (ny,))]
    blocks_x = [_check("f_x", k, f_x, (ny, nx))]
    blocks_u = [_check("f_u", k, f_u, (ny, nu_))]
    blocks_y = [_check("f_y", k, f_y, (ny, ny))]
    if st.ns:
        s, s_x, s_y = st.eq_xy(x, y)
        blocks_0.append(_check("s", k, s, (st.ns,)))
        blocks_x.append(_check("s_x", k, s_x, (st.ns, nx)))
        blocks_u.append(np.zeros((st.ns, nu_)))
        blocks_y.append(_check("s_y", k, s_y, (st.ns, ny)))
    if st.nc:
        c, c_x, c_u = st.eq_xu(x, u)
        blocks_0.append(_check("c", k, c, (st.nc,)))
        blocks_x.append(_check("c_x", k, c_x, (st.nc, nx)))
        blocks_u.append(_check("c_u", k, c_u, (st.nc, nu_)))
        blocks_y.append(np.zeros((st.nc, ny)))
    if len(blocks_0) == 1:
        h0, h_x, h_u, h_y = blocks_0[0], blocks_x[0], blocks_u[0], blocks_y[0]
    else:
        h0 = np.concatenate(blocks_0)
        h_x, h_u, h_y = np.vstack(blocks_x), np.vstack(blocks_u), np.vstack(blocks_y)

    ng = st.ng
    if ng:
        g0 = np.empty(ng)
        g_x = np.zeros((ng, nx))
        g_u = np.zeros((ng, nu_))
        g_y = np.zeros((ng, ny))
        if st.nphi:
            p, p_x, p_y = st.ineq_xy(x, y)
            g0[: st.nphi] = _check("phi", k, p, (st.nphi,))
            g_x[: st.nphi] = _check("phi_x", k, p_x, (st.nphi, nx))
            g_y[: st.nphi] = _check("phi_y", k, p_y, (st.nphi, ny))
        if st.npsi:
            p, p_x, p_u = st.ineq_xu(x, u)
            g0[st.nphi :] = _check("psi", k, p, (st.npsi,))
            g_x[st.nphi :] = _check("psi_x", k, p_x, (st.npsi, nx))
            g_u[st.nphi :] = _check("psi_u", k, p_u, (st.npsi, nu_))
    else:
        g0, g_x, g_u, g_y = _empty(0), _empty(0, nx), _empty(0, nu_), _empty(0, ny)

    lam = np.asarray(lam, dtype=float)
    nu = np.asarray(nu, dtype=float)
    Q_x = l_x + h_x.T @ lam
    Q_u = l_u + h_u.T @ lam
    Q_y = h_y.T @ lam
    if ng:
        Q_x = Q_x + g_x.T @ nu
        Q_u = Q_u + g_u.T @ nu
        Q_y = Q_y + g_y.T @ nu
    return StageLq(
        nf=ny, ns=st.ns, nc=st.nc, nphi=st.nphi, npsi=st.npsi, cost=float(l),
        h0=h0, h_x=h_x, h_u=h_u, h_y=h_y, g0=g0, g_x=g_x, g_u=g_u, g_y=g_y,
        Q_x=Q_x, Q_u=Q_u, Q_y=Q_y,
        Q_xx=l_xx, Q_uu=l_uu, Q_yy=np.zeros((ny, ny)), Q_ux=l_ux, Q_yx=np.zeros((ny, nx)),
    )


def evaluate_terminal(problem: OcpProblem, x) -> TerminalLq:
    term = problem.terminal
    l, l_x, l_xx = term.cost(x)
    l_x = _check("lN_x", problem.N, l_x, (term.nx,))
    l_xx = _check("lN_xx", problem.N, l_xx, (term.nx, term.nx))
    if not np.isfinite(l):
        raise NonFiniteError("terminal cost is not finite")
    return TerminalLq(float(l), l_x, l_xx)


def map_stages(fn, n, threads=1):
    """Apply ``fn`` to ``range(n)``; results are always in stage order."""
    if threads and threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(k) for k in range(n)]


def evaluate_trajectory(problem: OcpProblem, it: Iterate, threads=1):
    """LQ data for every stage plus the terminal node."""

    def one(k):
        return evaluate_stage(problem, k, it.xs[k], it.us[k], it.xs[k + 1],
                              it.lams[k], it.nus[k])

    lqs = map_stages(one, problem.N, threads)
    return lqs, evaluate_terminal(problem, it.xs[-1])


def _linf(arrays):
    """L-infinity norm over a list of arrays; NaN propagates."""
    arrays = [a for a in arrays if a.size]
    if not arrays:
        return 0.0
    return float(np.abs(np.concatenate(arrays)).max())


def stationarity_vectors(lqs: Sequence[StageLq], term: TerminalLq):
    """Lagrangian gradient blocks: ``u_k`` for every stage and ``x_{k+1}``."""
    N = len(lqs)
    out = []
    for k, lq in enumerate(lqs):
        out.append(lq.Q_u)
        nxt = lqs[k + 1].Q_x if k + 1 < N else term.V_x
        out.append(lq.Q_y + nxt)
    return out


def residual_from_lq(lqs, term, it: Iterate, mu=0.0) -> KktResidual:
    """KKT residual from already evaluated LQ data.

    With ``mu > 0`` the complementarity entry is the barrier-perturbed
    ``nu*t - mu``; ``mu = 0`` gives the true complementarity used for
    termination.
    """
    stat = _linf(stationarity_vectors(lqs, term))
    eq = _linf([lq.h0 for lq in lqs])
    ineq = _linf([np.maximum(lq.g0, 0.0) for lq in lqs])
    comp = _linf([n * t - mu for n, t in zip(it.nus, it.ts)])
    return KktResidual(stat, eq, ineq, comp)


def kkt_residual(problem: OcpProblem, it: Iterate) -> KktResidual:
    """Unscaled L-infinity KKT residual of ``it``.

    Non-finite evaluator output is reported as an all-``inf`` residual
    (``finite`` is then False) instead of raising.
    """
    try:
        lqs, term = evaluate_trajectory(problem, it)
    except NonFiniteError:
        return KktResidual(np.inf, np.inf, np.inf, np.inf)
    return residual_from_lq(lqs, term, it)


def primal_dual_measures(lqs, term, it: Iterate, mu):
    """(primal, dual) progress measures used by the line search."""
    primal = max(_linf([lq.h0 for lq in lqs]),
                 _linf([lq.g0 + t for lq, t in zip(lqs, it.ts)]))
    dual = max(_linf(stationarity_vectors(lqs, term)),
               _linf([n * t - mu for n, t in zip(it.nus, it.ts)]))
    return primal, dual


# ---------------------------------------------------------------------------
# validation / derivative checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageIssue:
    stage: int
    evaluator: str
    expected: tuple
    actual: tuple

    def __str__(self):
        return (f"stage {self.stage}: {self.evaluator} expected shape {self.expected}, "
                f"got {self.actual}")


@dataclass
class ValidationReport:
    N: int
    errors: list = field(default_factory=list)
    table: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.errors


def _probe(k, name, out, shapes, errors):
    if out is None:
        errors.append(StageIssue(k, name, shapes[0], ()))
        return
    for (label, shape), arr in zip(shapes, out):
        actual = np.shape(arr)
        if tuple(actual) != tuple(shape):
            errors.append(StageIssue(k, label, tuple(shape), tuple(actual)))
        elif not np.all(np.isfinite(arr)):
            errors.append(StageIssue(k, label + " (non-finite)", tuple(shape), tuple(actual)))


def validate_problem(problem: OcpProblem, xs=None, us=None) -> ValidationReport:
    """Probe every evaluator and collect *all* dimension inconsistencies."""
    rep = ValidationReport(problem.N)
    if xs is None or us is None:
        xs, us = problem.default_trajectory()
    if problem.x0.shape != (problem.stages[0].nx,):
        rep.errors.append(StageIssue(0, "x0", (problem.stages[0].nx,), problem.x0.shape))
    for k, st in enumerate(problem.stages):
        rep.table.append({"stage": k, "nx": st.nx, "nu": st.nu, "ny": st.ny, "nc": st.nc,
                          "ns": st.ns, "npsi": st.npsi, "nphi": st.nphi})
        if k + 1 < problem.N and problem.stages[k + 1].nx != st.ny:
            rep.errors.append(StageIssue(k, "ny/next nx", (problem.stages[k + 1].nx,), (st.ny,)))
            continue
        x, u, y = xs[k], us[k], xs[k + 1]
        if x.shape != (st.nx,) or u.shape != (st.nu,) or y.shape != (st.ny,):
            rep.errors.append(StageIssue(k, "trajectory", (st.nx, st.nu, st.ny),
                                         (x.size, u.size, y.size)))
            continue
        nx, nu, ny = st.nx, st.nu, st.ny
        _probe(k, "cost", st.cost(x, u)[1:], [("l_x", (nx,)), ("l_u", (nu,)),
                                              ("l_xx", (nx, nx)), ("l_uu", (nu, nu)),
                                              ("l_ux", (nu, nx))], rep.errors)
        _probe(k, "f", st.dynamics(x, u, y), [("f", (ny,)), ("f_x", (ny, nx)),
                                              ("f_u", (ny, nu)), ("f_y", (ny, ny))], rep.errors)
        if st.ns:
            _probe(k, "s", st.eq_xy(x, y), [("s", (st.ns,)), ("s_x", (st.ns, nx)),
                                            ("s_y", (st.ns, ny))], rep.errors)
        if st.nc:
            _probe(k, "c", st.eq_xu(x, u), [("c", (st.nc,)), ("c_x", (st.nc, nx)),
                                            ("c_u", (st.nc, nu))], rep.errors)
        if st.nphi:
            _probe(k, "phi", st.ineq_xy(x, y), [("phi", (st.nphi,)), ("phi_x", (st.nphi, nx)),
                                                ("phi_y", (st.nphi, ny))], rep.errors)
        if st.npsi:
            _probe(k, "psi", st.ineq_xu(x, u), [("psi", (st.npsi,)), ("psi_x", (st.npsi, nx)),
                                                ("psi_u", (st.npsi, nu))], rep.errors)
    term = problem.terminal
    if term.nx != problem.stages[-1].ny:
        rep.errors.append(StageIssue(problem.N, "terminal nx", (problem.stages[-1].ny,),
                                     (term.nx,)))
    else:
        _probe(problem.N, "terminal", problem.terminal.cost(xs[-1])[1:],
               [("lN_x", (term.nx,)), ("lN_xx", (term.nx, term.nx))], rep.errors)
    return rep


def _fd_jacobian(fun, args, i, eps):
    """Central differences of ``fun(*args)[0]`` w.r.t. ``args[i]``.

    Also returns an entrywise bound on the rounding noise of the quotient
    (function values and the perturbed argument are each rounded once).
    """
    base = np.asarray(args[i], dtype=float)
    cols, noise = [], []
    for j in range(base.size):
        p = [np.array(a, dtype=float) for a in args]
        m = [np.array(a, dtype=float) for a in args]
        p[i][j] += eps
        m[i][j] -= eps
        fp = np.atleast_1d(np.asarray(fun(*p)[0], dtype=float))
        fm = np.atleast_1d(np.asarray(fun(*m)[0], dtype=float))
        d = (fp - fm) / (2 * eps)
        cols.append(d)
        noise.append(_ROUND * ((np.abs(fp) + np.abs(fm)) / (2 * eps)
                               + np.abs(d) * (abs(base[j]) + eps) / eps))
    if not cols:
        out = np.atleast_1d(np.asarray(fun(*args)[0], dtype=float))
        return np.zeros((out.size, 0)), np.zeros((out.size, 0))
    return np.column_stack(cols), np.column_stack(noise)


# safety factor times unit roundoff used in the finite-difference noise bound
_ROUND = 8 * np.finfo(float).eps


def _rel_err(fd, an):
    """Mismatch beyond the rounding-noise floor, relative to ``max(1, |an|)``."""
    fd, noise = fd
    an = np.atleast_2d(np.asarray(an, dtype=float)).reshape(fd.shape)
    if fd.size == 0:
        return 0.0
    if not (np.all(np.isfinite(fd)) and np.all(np.isfinite(an))):
        raise NonFiniteError("non-finite value in derivative check")
    excess = np.maximum(np.abs(fd - an) - noise, 0.0)
    return float(np.max(excess) / max(1.0, np.max(np.abs(an))))


def derivative_check(problem: OcpProblem, xs=None, us=None, eps=1e-6) -> dict:
    """Worst relative mismatch between analytic and central-difference Jacobians.

    The mismatch of each entry is measured beyond the rounding noise of the
    difference quotient, so exact derivatives of linear maps report 0 for any
    ``eps``; truncation error of nonlinear maps remains, O(eps^2).

    Returns ``{evaluator_name: discrepancy}`` with evaluator names ``cost``,
    ``f``, ``c``, ``s``, ``psi``, ``phi`` and ``terminal``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if xs is None or us is None:
        xs, us = problem.default_trajectory()
    worst = {}

    def upd(name, v):
        worst[name] = max(worst.get(name, 0.0), v)

    for k, st in enumerate(problem.stages):
        x, u, y = xs[k], us[k], xs[k + 1]

        def cost_val(x_, u_):
            return (np.atleast_1d(st.cost(x_, u_)[0]),)

        _, l_x, l_u = st.cost(x, u)[:3]
        upd("cost", _rel_err(_fd_jacobian(cost_val, (x, u), 0, eps), l_x))
        upd("cost", _rel_err(_fd_jacobian(cost_val, (x, u), 1, eps), l_u))
        f, f_x, f_u, f_y = st.dynamics(x, u, y)
        for i, J in enumerate((f_x, f_u, f_y)):
            upd("f", _rel_err(_fd_jacobian(st.dynamics, (x, u, y), i, eps), J))
        for name, fn, n, a2 in (("c", st.eq_xu, st.nc, u), ("psi", st.ineq_xu, st.npsi, u),
                                ("s", st.eq_xy, st.ns, y), ("phi", st.ineq_xy, st.nphi, y)):
            if not n:
                continue
            _, J1, J2 = fn(x, a2)
            upd(name, _rel_err(_fd_jacobian(fn, (x, a2), 0, eps), J1))
            upd(name, _rel_err(_fd_jacobian(fn, (x, a2), 1, eps), J2))

    def term_val(x_):
        return (np.atleast_1d(problem.terminal.cost(x_)[0]),)

    upd("terminal", _rel_err(_fd_jacobian(term_val, (xs[-1],), 0, eps),
                             problem.terminal.cost(xs[-1])[1]))
    return worst
