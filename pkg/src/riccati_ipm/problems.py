"""Built-in benchmark problems.

Every constructor returns an :class:`~riccati_ipm.model.OcpProblem` with
analytic first derivatives.  Nonlinear dynamics are integrated explicitly
and written in implicit form ``f = step(x, u) - y``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import OcpProblem, Stage, TerminalCost

# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def quadratic_cost(Q, R, x_ref=None, u_ref=None, S=None, scale=1.0):
    """``scale * (0.5 dx'Q dx + 0.5 du'R du + du'S dx)``."""
    Q = scale * np.atleast_2d(np.asarray(Q, dtype=float))
    R = scale * np.atleast_2d(np.asarray(R, dtype=float))
    nx, nu = Q.shape[0], R.shape[0]
    S = np.zeros((nu, nx)) if S is None else scale * np.asarray(S, dtype=float)
    x_ref = np.zeros(nx) if x_ref is None else np.asarray(x_ref, dtype=float)
    u_ref = np.zeros(nu) if u_ref is None else np.asarray(u_ref, dtype=float)

    def cost(x, u):
        dx, du = x - x_ref, u - u_ref
        gx = Q @ dx + S.T @ du
        gu = R @ du + S @ dx
        return 0.5 * (dx @ gx + du @ gu), gx, gu, Q, R, S

    return cost


def terminal_quadratic(P, x_ref=None):
    P = np.atleast_2d(np.asarray(P, dtype=float))
    x_ref = np.zeros(P.shape[0]) if x_ref is None else np.asarray(x_ref, dtype=float)

    def cost(x):
        d = x - x_ref
        g = P @ d
        return 0.5 * d @ g, g, P

    return cost


def explicit_dynamics(step: Callable):
    """Wrap ``step(x, u) -> (x_next, A, B)`` as ``f = step(x, u) - y``."""

    def dynamics(x, u, y):
        xn, A, B = step(x, u)
        return xn - y, A, B, -np.eye(y.size)

    return dynamics


def linear_dynamics(A, B, e=None, E=None):
    """``f = A x + B u + e - E y`` (``E = I`` gives explicit dynamics)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    e = np.zeros(A.shape[0]) if e is None else np.asarray(e, dtype=float)
    E = np.eye(A.shape[0]) if E is None else np.asarray(E, dtype=float)
    mE = -E

    def dynamics(x, u, y):
        return A @ x + B @ u + e - E @ y, A, B, mE

    return dynamics


def linear_constraint(Ja, Jb, c0):
    """``c = Ja a + Jb b + c0`` for a pair of arguments ``(a, b)``."""
    Ja = np.asarray(Ja, dtype=float)
    Jb = np.asarray(Jb, dtype=float)
    c0 = np.asarray(c0, dtype=float)

    def con(a, b):
        return Ja @ a + Jb @ b + c0, Ja, Jb

    return con


def rk4(ode: Callable, dt: float):
    """Explicit RK4 step with chain-rule Jacobians.

    ``ode(x, u) -> (xdot, J_x, J_u)``.
    """

    def step(x, u):
        n = x.size
        I = np.eye(n)
        k1, a1, b1 = ode(x, u)
        x2 = x + 0.5 * dt * k1
        k2, a2, b2 = ode(x2, u)
        d2x = a2 @ (I + 0.5 * dt * a1)
        d2u = a2 @ (0.5 * dt * b1) + b2
        x3 = x + 0.5 * dt * k2
        k3, a3, b3 = ode(x3, u)
        d3x = a3 @ (I + 0.5 * dt * d2x)
        d3u = a3 @ (0.5 * dt * d2u) + b3
        x4 = x + dt * k3
        k4, a4, b4 = ode(x4, u)
        d4x = a4 @ (I + dt * d3x)
        d4u = a4 @ (dt * d3u) + b4
        xn = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        A = I + dt / 6.0 * (a1 + 2 * d2x + 2 * d3x + d4x)
        B = dt / 6.0 * (b1 + 2 * d2u + 2 * d3u + d4u)
        return xn, A, B

    return step


def box_xu(nx, idx, lo, hi):
    """``lo <= u[idx] <= hi`` as ``psi(x, u) <= 0`` (two rows per index)."""
    idx = np.atleast_1d(idx)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), idx.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), idx.shape)

    def psi(x, u):
        nu = u.size
        J = np.zeros((2 * idx.size, nu))
        J[np.arange(idx.size), idx] = 1.0
        J[idx.size + np.arange(idx.size), idx] = -1.0
        val = np.concatenate([u[idx] - hi, lo - u[idx]])
        return val, np.zeros((2 * idx.size, nx)), J

    return psi, 2 * idx.size


def box_xy(nx, idx, lo, hi):
    """``lo <= y[idx] <= hi`` as ``phi(x, y) <= 0``."""
    idx = np.atleast_1d(idx)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), idx.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), idx.shape)

    def phi(x, y):
        J = np.zeros((2 * idx.size, y.size))
        J[np.arange(idx.size), idx] = 1.0
        J[idx.size + np.arange(idx.size), idx] = -1.0
        val = np.concatenate([y[idx] - hi, lo - y[idx]])
        return val, np.zeros((2 * idx.size, nx)), J

    return phi, 2 * idx.size


def rollout(problem_step: Callable, x0, us):
    xs = [np.asarray(x0, dtype=float)]
    for u in us:
        xs.append(problem_step(xs[-1], u)[0])
    return xs


# ---------------------------------------------------------------------------
# random LQ instances
# ---------------------------------------------------------------------------

@dataclass
class LqOptions:
    N: int = 5
    nx: int = 3
    nu: int = 3
    nc: int = 0
    ns: int = 0
    npsi: int = 0
    nphi: int = 0
    implicit: bool = False
    vary_nx: bool = False


def random_lq_options(rng, max_N=10, max_dim=6, inequalities=False, equalities=True):
    """Random mix of dimensions and constraint kinds for the equivalence suites."""
    N = int(rng.integers(1, max_N + 1))
    nx = int(rng.integers(1, max_dim + 1))
    nu = int(rng.integers(1, max_dim + 1))
    nc = ns = 0
    if equalities:
        budget = int(rng.integers(0, nu + 1))
        nc = int(rng.integers(0, budget + 1))
        ns = min(budget - nc, nx)
    npsi = nphi = 0
    if inequalities:
        npsi = int(rng.integers(0, 4))
        nphi = int(rng.integers(0 if npsi else 1, 4))
    return LqOptions(N, nx, nu, nc, ns, npsi, nphi, bool(rng.integers(0, 2)),
                     bool(rng.integers(0, 2)))


def _spd(rng, n, lo=0.5):
    M = rng.standard_normal((n, n))
    return M @ M.T / n + lo * np.eye(n)


def _rows(rng, m, n):
    """``m x n`` matrix with orthonormal rows scaled into [0.5, 2] (``m <= n``)."""
    q, _ = np.linalg.qr(rng.standard_normal((n, m)))
    return rng.uniform(0.5, 2.0, m)[:, None] * q.T


def lq_random(seed=0, options: Optional[LqOptions] = None, **kw) -> OcpProblem:
    """Random strictly convex LQ problem.

    Dynamics ``E y = A x + B u + e`` (``E`` random and well conditioned when
    ``implicit``), linear ``c(x, u)`` / ``s(x, y)`` rows with
    ``nc + ns <= nu``, and optional linear inequalities.  When ``vary_nx`` is
    set, state dimensions alternate between stages.
    """
    rng = np.random.default_rng(seed)
    o = options or LqOptions(**kw)
    if o.nc + o.ns > o.nu:
        raise ValueError("nc + ns must not exceed nu")
    dims = [o.nx]
    for k in range(o.N):
        dims.append(max(1, o.nx - (k % 2)) if o.vary_nx else o.nx)
    stages = []
    for k in range(o.N):
        nx, ny, nu = dims[k], dims[k + 1], o.nu
        A = rng.standard_normal((ny, nx)) / np.sqrt(nx)
        B = rng.standard_normal((ny, nu)) / np.sqrt(nu)
        e = 0.1 * rng.standard_normal(ny)
        E = np.eye(ny) + (0.3 * rng.standard_normal((ny, ny)) / np.sqrt(ny) if o.implicit else 0)
        cost = quadratic_cost(_spd(rng, nx, 0.1), _spd(rng, nu, 0.5),
                              x_ref=rng.standard_normal(nx), u_ref=0.1 * rng.standard_normal(nu),
                              S=0.05 * rng.standard_normal((nu, nx)))
        kw_st = {}
        ns = min(o.ns, ny)
        if o.nc:
            kw_st.update(eq_xu=linear_constraint(0.5 * rng.standard_normal((o.nc, nx)),
                                                 _rows(rng, o.nc, nu),
                                                 0.1 * rng.standard_normal(o.nc)), nc=o.nc)
        if ns:
            kw_st.update(eq_xy=linear_constraint(0.5 * rng.standard_normal((ns, nx)),
                                                 _rows(rng, ns, ny) @ E,
                                                 0.1 * rng.standard_normal(ns)), ns=ns)
        if o.npsi:
            kw_st.update(ineq_xu=linear_constraint(0.5 * rng.standard_normal((o.npsi, nx)),
                                                   rng.standard_normal((o.npsi, nu)),
                                                   -1.0 - rng.random(o.npsi)), npsi=o.npsi)
        if o.nphi:
            kw_st.update(ineq_xy=linear_constraint(0.5 * rng.standard_normal((o.nphi, nx)),
                                                   rng.standard_normal((o.nphi, ny)),
                                                   -1.0 - rng.random(o.nphi)), nphi=o.nphi)
        stages.append(Stage(nx, nu, ny, cost, linear_dynamics(A, B, e, E), **kw_st))
    term = TerminalCost(dims[-1], terminal_quadratic(_spd(rng, dims[-1], 0.5),
                                                     rng.standard_normal(dims[-1])))
    return OcpProblem(rng.standard_normal(dims[0]), stages, term, name="lq_random")


# ---------------------------------------------------------------------------
# double integrator (2-D point mass) with input and velocity bounds
# ---------------------------------------------------------------------------

def _double_integrator_matrices(dt):
    I2 = np.eye(2)
    A = np.block([[I2, dt * I2], [np.zeros((2, 2)), I2]])
    B = np.vstack([0.5 * dt**2 * I2, dt * I2])
    return A, B


def double_integrator(seed=0, N=50, dt=0.02, u_max=3.0, v_max=2.0, target=None,
                      w_term=100.0, r=1e-2) -> OcpProblem:
    """Reach a random planar target from rest with ``|u_i| <= u_max``, ``|v_i| <= v_max``."""
    rng = np.random.default_rng(seed)
    if target is None:
        target = rng.uniform(-1.0, 1.0, 2)
    target = np.asarray(target, dtype=float)
    A, B = _double_integrator_matrices(dt)
    dyn = linear_dynamics(A, B)
    cost = quadratic_cost(np.diag([0.0, 0.0, 1e-2, 1e-2]), r * np.eye(2), scale=dt)
    psi, npsi = box_xu(4, [0, 1], -u_max, u_max)
    phi, nphi = box_xy(4, [2, 3], -v_max, v_max)
    stages = [Stage(4, 2, 4, cost, dyn, ineq_xu=psi, npsi=npsi, ineq_xy=phi, nphi=nphi)
              for _ in range(N)]
    x_ref = np.concatenate([target, np.zeros(2)])
    term = TerminalCost(4, terminal_quadratic(np.diag([w_term, w_term, 1.0, 1.0]), x_ref))
    return OcpProblem(np.zeros(4), stages, term, name="double_integrator")


# ---------------------------------------------------------------------------
# pendulum and cartpole swing-up (RK4)
# ---------------------------------------------------------------------------

def pendulum_ode(m=1.0, l=1.0, g=9.81, b=0.1):
    ml2 = m * l * l

    def ode(x, u):
        th, om = x
        xd = np.array([om, -g / l * np.sin(th) - b * om + u[0] / ml2])
        Jx = np.array([[0.0, 1.0], [-g / l * np.cos(th), -b]])
        Ju = np.array([[0.0], [1.0 / ml2]])
        return xd, Jx, Ju

    return ode


def pendulum_swingup(seed=0, N=50, dt=0.02, u_max=8.0, w_term=20.0) -> OcpProblem:
    """Swing a damped pendulum towards upright (``theta = pi``) under torque limits."""
    rng = np.random.default_rng(seed)
    x0 = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.5, 0.5)])
    step = rk4(pendulum_ode(), dt)
    dyn = explicit_dynamics(step)
    cost = quadratic_cost(np.diag([0.1, 0.01]), [[0.01]], x_ref=[np.pi, 0.0], scale=dt)
    psi, npsi = box_xu(2, [0], -u_max, u_max)
    stages = [Stage(2, 1, 2, cost, dyn, ineq_xu=psi, npsi=npsi) for _ in range(N)]
    term = TerminalCost(2, terminal_quadratic(np.diag([w_term, 1.0]), [np.pi, 0.0]))
    return OcpProblem(x0, stages, term, name="pendulum_swingup")


def cartpole_ode(m_c=1.0, m_p=0.3, l=0.5, g=9.81):
    """Cart-pole with ``theta = 0`` hanging down; state ``(p, theta, v, omega)``."""
    M = m_c + m_p

    def ode(x, u):
        _, th, v, om = x
        F = u[0]
        s, c = np.sin(th), np.cos(th)
        D = m_c + m_p * s * s
        dD = 2 * m_p * s * c
        A_ = F + m_p * s * (l * om * om + g * c)
        dA_th = m_p * (c * l * om * om + g * (c * c - s * s))
        dA_om = 2 * m_p * s * l * om
        B_ = -F * c - m_p * l * om * om * c * s - M * g * s
        dB_th = F * s - m_p * l * om * om * (c * c - s * s) - M * g * c
        dB_om = -2 * m_p * l * om * c * s
        acc = A_ / D
        alp = B_ / (l * D)
        xd = np.array([v, om, acc, alp])
        Jx = np.zeros((4, 4))
        Jx[0, 2] = 1.0
        Jx[1, 3] = 1.0
        Jx[2, 1] = (dA_th * D - A_ * dD) / (D * D)
        Jx[2, 3] = dA_om / D
        Jx[3, 1] = (dB_th * D - B_ * dD) / (l * D * D)
        Jx[3, 3] = dB_om / (l * D)
        Ju = np.array([[0.0], [0.0], [1.0 / D], [-c / (l * D)]])
        return xd, Jx, Ju

    return ode


# Input profile (sine-series coefficients, soft-saturated at 25 N) that swings
# the default cart-pole from rest at theta = 0 to rest upright at p = 0 in
# 50 RK4 steps of 20 ms.  Found offline by derivative-free search.
_SWING_COEFFS = np.array([716.95036866, -1001.76056669, 362.96531983, 575.12048094,
                          -704.52908841, 270.70168129])


def swingup_reference(N=50, dt=0.02, ode=None):
    """Reference swing-up ``(xs, us)`` from the frozen input profile."""
    t = (np.arange(N) + 0.5) / N
    raw = sum(c * np.sin((i + 1) * np.pi * t) for i, c in enumerate(_SWING_COEFFS))
    us = [np.array([25.0 * np.tanh(v / 25.0)]) for v in raw]
    step = rk4(ode or cartpole_ode(), dt)
    return rollout(step, np.zeros(4), us), us


def cartpole_swingup(seed=0, N=50, dt=0.02, f_max=30.0, q=10.0, r=1e-2,
                     w_term=100.0, spread=0.1) -> OcpProblem:
    """Swing the pole up from a randomly perturbed hanging state.

    The running cost tracks a dynamically feasible swing-up reference, the
    terminal cost pulls towards rest upright; ``|F| <= f_max``.
    """
    rng = np.random.default_rng(seed)
    x0 = np.concatenate([rng.uniform(-spread, spread, 2), rng.uniform(-spread, spread, 2)])
    step = rk4(cartpole_ode(), dt)
    dyn = explicit_dynamics(step)
    psi, npsi = box_xu(4, [0], -f_max, f_max)
    xs_ref, us_ref = swingup_reference(N, dt)
    W = np.diag([1.0, 1.0, 0.1, 0.1])
    stages = [Stage(4, 1, 4, quadratic_cost(q * W, [[r]], x_ref=xs_ref[k], u_ref=us_ref[k],
                                            scale=dt), dyn, ineq_xu=psi, npsi=npsi)
              for k in range(N)]
    target = np.array([0.0, np.pi, 0.0, 0.0])
    term = TerminalCost(4, terminal_quadratic(w_term * W, target))
    return OcpProblem(x0, stages, term, name="cartpole_swingup")


# ---------------------------------------------------------------------------
# unicycle with a hard terminal constraint
# ---------------------------------------------------------------------------

def unicycle_step(dt):
    """Heading-midpoint unicycle step, state ``(px, py, theta)``, input ``(v, omega)``."""

    def step(x, u):
        px, py, th = x
        v, om = u
        ph = th + 0.5 * dt * om
        c, s = np.cos(ph), np.sin(ph)
        xn = np.array([px + dt * v * c, py + dt * v * s, th + dt * om])
        A = np.array([[1.0, 0.0, -dt * v * s], [0.0, 1.0, dt * v * c], [0.0, 0.0, 1.0]])
        B = np.array([[dt * c, -0.5 * dt * dt * v * s],
                      [dt * s, 0.5 * dt * dt * v * c],
                      [0.0, dt]])
        return xn, A, B

    return step


def unicycle_reach(seed=0, N=50, dt=0.02, rank_deficient=False, v_max=4.0,
                   w_max=6.0) -> OcpProblem:
    """Reach a random planar target exactly at the final node.

    The regular variant constrains the final position (two rows, both
    reachable through the last input).  The rank-deficient variant constrains
    the full pose and repeats the position rows: five rows whose Jacobian,
    restricted to the last input, has rank two.  Projection can then only
    satisfy the constraint in the least-squares sense stage by stage.
    """
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.6, 1.2)
    ang = rng.uniform(-0.6, 0.6)
    target = np.array([r * np.cos(ang), r * np.sin(ang)])
    heading = rng.uniform(-0.5, 0.5)
    x0 = np.array([0.0, 0.0, rng.uniform(-0.3, 0.3)])
    step = unicycle_step(dt)
    dyn = explicit_dynamics(step)
    cost = quadratic_cost(np.zeros((3, 3)), np.diag([0.5, 0.05]), scale=dt)
    psi, npsi = box_xu(3, [0, 1], [-v_max, -w_max], [v_max, w_max])
    if rank_deficient:
        sel = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [1.0, 0, 0], [0, 1.0, 0]])
        ref = np.array([target[0], target[1], heading, target[0], target[1]])
    else:
        sel = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        ref = target
    term_con = linear_constraint(np.zeros((sel.shape[0], 3)), sel, -ref)
    stages = []
    for k in range(N):
        kw = dict(ineq_xu=psi, npsi=npsi)
        if k == N - 1:
            kw.update(eq_xy=term_con, ns=sel.shape[0])
        stages.append(Stage(3, 2, 3, cost, dyn, **kw))
    term = TerminalCost(3, terminal_quadratic(np.zeros((3, 3))))
    # cruise straight ahead at the speed that covers the distance
    us = [np.array([r / (N * dt), 0.0]) for _ in range(N)]
    xs = rollout(step, x0, us)
    name = "unicycle_reach_rd" if rank_deficient else "unicycle_reach"
    return OcpProblem(x0, stages, term, name=name, guess=(xs, us))


# ---------------------------------------------------------------------------
# point mass around a circular obstacle
# ---------------------------------------------------------------------------

def obstacle_constraint(center, radius):
    """``radius^2 - |p(y) - center|^2 <= 0`` on the position part of ``y``."""
    center = np.asarray(center, dtype=float)

    def phi(x, y):
        d = y[:2] - center
        J = np.zeros((1, y.size))
        J[0, :2] = -2.0 * d
        return np.array([radius**2 - d @ d]), np.zeros((1, x.size)), J

    return phi


def masspoint_obstacle(seed=0, N=50, dt=0.02, u_max=6.0, radius=0.25,
                       window=(0.2, 0.8)) -> OcpProblem:
    """Planar point mass passing a circular keep-out region.

    The obstacle rows exist only for stages inside ``window`` (fractions of
    the horizon), so the inequality dimension changes along the horizon.
    """
    rng = np.random.default_rng(seed)
    start = np.array([-1.0, rng.uniform(-0.1, 0.1)])
    goal = np.array([1.0, rng.uniform(-0.3, 0.3)])
    center = np.array([0.0, rng.uniform(-0.15, 0.15)])
    A, B = _double_integrator_matrices(dt)
    dyn = linear_dynamics(A, B)
    cost = quadratic_cost(np.diag([0.0, 0.0, 1e-2, 1e-2]), 1e-2 * np.eye(2), scale=dt)
    psi, npsi = box_xu(4, [0, 1], -u_max, u_max)
    obs = obstacle_constraint(center, radius)
    lo, hi = int(window[0] * N), int(window[1] * N)
    stages = []
    for k in range(N):
        kw = dict(ineq_xu=psi, npsi=npsi)
        if lo <= k < hi:
            kw.update(ineq_xy=obs, nphi=1)
        stages.append(Stage(4, 2, 4, cost, dyn, **kw))
    x_ref = np.concatenate([goal, np.zeros(2)])
    term = TerminalCost(4, terminal_quadratic(np.diag([100.0, 100.0, 1.0, 1.0]), x_ref))
    x0 = np.concatenate([start, np.zeros(2)])
    # straight-line guess, pushed off the obstacle towards the side with more room
    side = -1.0 if center[1] > 0 else 1.0
    xs = [x0]
    for k in range(1, N + 1):
        s = k / N
        p = (1 - s) * start + s * goal
        bump = np.sin(np.pi * s) * side * (radius + 0.15)
        xs.append(np.array([p[0], p[1] + bump, 0.0, 0.0]))
    us = [np.zeros(2) for _ in range(N)]
    return OcpProblem(x0, stages, term, name="masspoint_obstacle", guess=(xs, us))


# ---------------------------------------------------------------------------

PROBLEMS = {
    "lq_random": lq_random,
    "double_integrator": double_integrator,
    "pendulum_swingup": pendulum_swingup,
    "cartpole_swingup": cartpole_swingup,
    "unicycle_reach": unicycle_reach,
    "masspoint_obstacle": masspoint_obstacle,
}


def problem_library(name: str, seed=0, **params) -> OcpProblem:
    """Build a named problem; extra keyword arguments go to its constructor."""
    try:
        ctor = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return ctor(seed=seed, **params)
