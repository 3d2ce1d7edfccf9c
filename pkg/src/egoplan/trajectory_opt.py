"""Gradient-based refinement of a B-spline trajectory around an FRS tube.

Cost terms (each returns ``(cost, gradient)`` with the gradient shaped like
the control points):

* smoothness: squared third differences of control points,
* collision: squared shortfall of obstacle clearance below the tube radius,
  integrated along the predicted (tube center) trajectory,
* physical: quartic penalties on control-point velocities/accelerations
  exceeding their limits.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import minimize

from .bspline import UniformBSpline, pinned_points
from .disturbance import DisturbanceField
from .kinodynamic import path_duration, sample_path
from .reachability import ErrorSystem, FRSTube, propagate_tube
from .voxel_map import VoxelMap

log = logging.getLogger(__name__)


@dataclass
class CostWeights:
    smooth: float = 1.0
    collision: float = 50.0
    physical: float = 1.0

    def __post_init__(self):
        if min(self.smooth, self.collision, self.physical) < 0:
            raise ValueError("cost weights must be non-negative")


@dataclass
class OptimizerConfig:
    degree: int = 3
    knot_interval: float = 0.1
    command_dt: float = 0.02
    v_max: float = 1.5
    a_max: float = 2.0
    block_iterations: int = 10
    max_iterations: int = 500
    rel_tol: float = 1e-6
    grad_tol: float = 1e-5
    inflation: float = 0.0
    buffer: float = 0.02
    escalations: int = 4
    eps: float = 1e-4
    k_sigma: float = 3.0


# -- parameterisation ----------------------------------------------------------

def parameterize(path, degree: int = 3, knot_interval: float = 0.1, fit_tol: float = 0.05,
                 max_refine: int = 4, end=None, time_scale: float = 1.0) -> UniformBSpline:
    """Least-squares B-spline through a primitive path with pinned end states.

    The first and last ``degree`` control points reproduce the path's end
    positions and velocities with zero higher derivatives.  ``end`` (a
    ``(position, velocity)`` pair) replaces the path's final state, e.g. to
    land exactly on a goal the search reached within tolerance.  The knot
    interval is shrunk until every interior breakpoint is within ``fit_tol``.
    ``time_scale > 1`` follows the same geometry proportionally slower.
    """
    if len(path) < 2:
        raise ValueError("path needs at least two states")
    if time_scale <= 0:
        raise ValueError("time_scale must be positive")
    T = path_duration(path) * time_scale
    breaks = np.cumsum([0.0] + [tau for _, _, tau in path[1:]]) * time_scale
    p_break = np.array([s.position for s, _, _ in path])
    dt_target = knot_interval
    for _ in range(max_refine + 1):
        M = max(int(np.ceil(T / dt_target - 1e-9)), 2 * degree)
        dt = T / M
        t = np.arange(M + 1) * dt
        P, _ = sample_path(path, t / time_scale)
        head = _end_derivs(path[0][0].velocity / time_scale, P[0], degree)
        if end is None:
            tail = _end_derivs(path[-1][0].velocity / time_scale, P[-1], degree)
        else:
            tail = _end_derivs(np.asarray(end[1], float), np.asarray(end[0], float), degree)
        spline = _fit(P, t, dt, degree, head, tail)
        check = slice(None) if end is None else slice(0, -1)
        resid = np.linalg.norm(spline.evaluate(breaks[check]) - p_break[check], axis=1).max()
        if resid <= fit_tol:
            return spline
        dt_target = dt / 2
    log.warning("parameterize: breakpoint residual %.3f m exceeds %.3f m", resid, fit_tol)
    return spline


def time_scale_for_limits(path, v_max: float, a_max: float, rate: float = 100.0) -> float:
    """Stretch factor (at least 1) so a min-jerk timing of the path length meets the limits.

    A rest-to-rest min-jerk profile over length ``L`` and time ``T`` peaks at
    ``1.875 L / T`` in speed and ``(10 / sqrt(3)) L / T^2`` in acceleration.
    """
    T = path_duration(path)
    if T <= 0:
        return 1.0
    p, _ = sample_path(path, np.linspace(0.0, T, max(int(T * rate), 2) + 1))
    L = float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))
    need = max(1.875 * L / v_max, np.sqrt(10.0 / np.sqrt(3.0) * L / a_max))
    return max(1.0, need / T)


def _end_derivs(v, p, degree):
    out = np.zeros((degree, 3))
    out[0] = p
    if degree > 1:
        out[1] = v
    return out


def _fit(P, t, dt, degree, start, end) -> UniformBSpline:
    n_ctrl = len(t) - 1 + degree
    head = pinned_points(start, degree, dt)
    tail = pinned_points(end, degree, dt, at_end=True)
    pts = np.zeros((n_ctrl, 3))
    pts[:degree] = head
    pts[-degree:] = tail
    spline = UniformBSpline(pts, dt, degree)
    S = spline.sampling_matrix(t[1:-1])
    free = slice(degree, n_ctrl - degree)
    rhs = P[1:-1] - S[:, :degree] @ head - S[:, n_ctrl - degree:] @ tail
    sol, *_ = np.linalg.lstsq(S[:, free], rhs, rcond=None)
    pts[free] = sol
    return spline.with_points(pts)


def straight_line(start, goal, duration: float, degree: int = 3, knot_interval: float = 0.1):
    """Rest-to-rest path primitive list for a straight move (used when search is skipped)."""
    from .kinodynamic import SearchState
    start = np.asarray(start, float)
    goal = np.asarray(goal, float)
    a = 4.0 * (goal - start) / duration**2
    s0 = SearchState(start, np.zeros(3))
    mid = SearchState(start + 0.5 * (goal - start), a * duration / 2, parent=s0)
    end = SearchState(goal, np.zeros(3), parent=mid)
    return [(s0, None, 0.0), (mid, a, duration / 2), (end, -a, duration / 2)]


# -- cost terms -------------------------------------------------------------------

def smoothness_cost(points, first: int = 0, last: int | None = None):
    """Elastic-band cost ``sum_i |-Q_i + 3Q_{i+1} - 3Q_{i+2} + Q_{i+3}|^2``.

    ``i`` runs from ``first`` to ``last`` (default ``N - 3``, every third
    difference), clipped so ``i + 3 <= N``.
    """
    Q = np.asarray(points, dtype=float)
    N = len(Q) - 1
    lo = first
    hi = N - 3 if last is None else min(last, N - 3)
    grad = np.zeros_like(Q)
    if hi < lo:
        return 0.0, grad
    i = np.arange(lo, hi + 1)
    r = -Q[i] + 3 * Q[i + 1] - 3 * Q[i + 2] + Q[i + 3]
    for k, c in enumerate((-1.0, 3.0, -3.0, 1.0)):
        np.add.at(grad, i + k, 2.0 * c * r)
    return float(np.sum(r * r)), grad


def _limit_penalty(x, limit):
    excess = x * x - limit * limit
    on = excess > 0
    cost = np.where(on, excess**2, 0.0)
    dcost = np.where(on, 4.0 * excess * x, 0.0)
    return cost, dcost


def physical_cost(points, knot_interval: float, v_max: float, a_max: float, degree: int = 3):
    """Penalty on control-point velocities and accelerations beyond per-axis limits."""
    Q = np.asarray(points, dtype=float)
    N = len(Q) - 1
    dt = knot_interval
    grad = np.zeros_like(Q)
    total = 0.0
    V = np.diff(Q, axis=0) / dt
    iv = np.arange(max(degree - 1, 0), min(N - degree, len(V) - 1) + 1)
    if len(iv):
        c, dc = _limit_penalty(V[iv], v_max)
        total += c.sum()
        np.add.at(grad, iv + 1, dc / dt)
        np.add.at(grad, iv, -dc / dt)
    A = np.diff(V, axis=0) / dt
    ia = np.arange(max(degree - 2, 0), min(N - degree, len(A) - 1) + 1)
    if len(ia):
        c, dc = _limit_penalty(A[ia], a_max)
        total += c.sum()
        np.add.at(grad, ia + 2, dc / dt**2)
        np.add.at(grad, ia + 1, -2.0 * dc / dt**2)
        np.add.at(grad, ia, dc / dt**2)
    return float(total), grad


@dataclass
class FrozenTube:
    """Tube quantities held fixed while the control points move."""

    times: np.ndarray
    pos_offset: np.ndarray
    vel_offset: np.ndarray
    radii: np.ndarray
    dt: float

    @classmethod
    def from_tube(cls, spline: UniformBSpline, tube: FRSTube, dt: float, margin: float | None = None):
        t = tube.times
        p = spline.evaluate(t)
        v = spline.evaluate(t, 1)
        r = tube.radii if margin is None else np.full(len(t), float(margin))
        return cls(t, tube.centers[:, :3] - p, tube.centers[:, 3:6] - v, r.copy(), dt)


def collision_cost(points, spline: UniformBSpline, frozen: FrozenTube, vmap: VoxelMap,
                   inflation: float = 0.0, extra_margin: float = 0.0):
    """Clearance shortfall integrated along the predicted trajectory.

    ``sum_i F(d_i) |v_i| dt`` with ``F = (d - r)^2`` when ``d <= r``.  ``d``
    is the interpolated obstacle distance minus ``inflation``; ``r`` is the
    frozen tube radius plus ``extra_margin``.
    """
    Q = np.asarray(points, dtype=float)
    sp = spline.with_points(Q)
    Sp = sp.sampling_matrix(frozen.times)
    Sv = sp.sampling_matrix(frozen.times, 1)
    pp = Sp @ Q + frozen.pos_offset
    vp = Sv @ Q + frozen.vel_offset
    d, gd = vmap.distance_and_gradient(pp)
    d = np.atleast_1d(d) - inflation
    r = frozen.radii + extra_margin
    speed = np.linalg.norm(vp, axis=1)
    short = d - r
    on = short <= 0
    F = np.where(on, short**2, 0.0)
    cost = float(np.sum(F * speed) * frozen.dt)
    dp = (2.0 * short * speed * frozen.dt)[:, None] * gd
    dp[~on] = 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(speed[:, None] > 0, vp / np.where(speed > 0, speed, 1.0)[:, None], 0.0)
    dv = (F * frozen.dt)[:, None] * unit
    grad = Sp.T @ dp + Sv.T @ dv
    return cost, grad


# -- optimiser ------------------------------------------------------------------

@dataclass
class OptimizeResult:
    spline: UniformBSpline
    tube: FRSTube
    collision: float
    smoothness: float
    iterations: int
    unsafe_samples: np.ndarray = field(default_factory=lambda: np.empty(0, int))
    stalled: bool = False
    history: list = field(default_factory=list)

    @property
    def safe(self) -> bool:
        return self.unsafe_samples.size == 0


def build_tube(spline: UniformBSpline, fld: DisturbanceField, sys: ErrorSystem, cfg: OptimizerConfig,
               Q0=None, clamp_unsafe: bool = False) -> FRSTube:
    cmds = spline.commands(cfg.command_dt)
    bounds = None
    if clamp_unsafe:
        var = fld.lookup(cmds[:, :3])
        finite = fld.variance[np.isfinite(fld.variance)]
        cap = 4.0 * (finite.max() if finite.size else 1.0)
        var = np.where(np.isfinite(var), var, cap)
        bounds = cfg.k_sigma * np.sqrt(var)
    return propagate_tube(cmds, fld, sys, Q0=Q0, eps=cfg.eps, dt=cfg.command_dt, k_sigma=cfg.k_sigma,
                          bounds=bounds)


def violations(spline: UniformBSpline, tube: FRSTube, vmap: VoxelMap, inflation: float,
               margin: float | None = None) -> np.ndarray:
    """Indices of tube samples whose predicted point lacks clearance ``r``."""
    r = tube.radii if margin is None else np.full(len(tube), float(margin))
    d = np.atleast_1d(vmap.distance(tube.centers[:, :3])) - inflation
    return np.flatnonzero(d < r)


def optimize(spline: UniformBSpline, fld: DisturbanceField, vmap: VoxelMap, sys: ErrorSystem,
             weights: CostWeights | None = None, cfg: OptimizerConfig | None = None,
             margin: float | None = None, Q0=None) -> OptimizeResult:
    """Refine the interior control points; the first and last ``degree`` stay pinned.

    The tube (centers and radii) is re-propagated every ``block_iterations``
    quasi-Newton iterations and frozen in between.  With ``margin`` set, a
    constant clearance replaces the tube radius.
    """
    weights = weights or CostWeights()
    cfg = cfg or OptimizerConfig()
    p = spline.degree
    Q = spline.control_points.copy()
    free = slice(p, len(Q) - p)
    n_free = len(Q) - 2 * p
    lam_c = weights.collision
    total_iters = 0
    history = []
    stalled = False

    # Tolerances apply to the objective normalised by the initial smoothness
    # cost, so they do not depend on the knot interval or the length scale.
    # Limit and collision penalties can dwarf it at first; normalising by the
    # total would then leave the smoothing phase below the tolerances.
    fs_init = weights.smooth * smoothness_cost(Q)[0]
    scale = 1.0 / fs_init if fs_init > 0 else 1.0

    # The smoothness Hessian is a banded third-difference operator whose
    # conditioning worsens as N^6; optimizing in y = L^T x (H = L L^T)
    # makes that part the identity so L-BFGS stays fast on long splines.
    if n_free > 0:
        D = np.zeros((len(Q) - 3, len(Q)))
        for k, c in enumerate((-1.0, 3.0, -3.0, 1.0)):
            D[np.arange(len(Q) - 3), np.arange(len(Q) - 3) + k] = c
        Df = D[:, free]
        L = cholesky(2.0 * scale * max(weights.smooth, 1e-12) * Df.T @ Df, lower=True)

    def to_y(x):
        return (L.T @ x.reshape(-1, 3)).ravel()

    def to_x(y):
        return solve_triangular(L.T, y.reshape(-1, 3), lower=False)

    def objective_y(y, frozen, lam_c):
        f, g = objective(to_x(y).ravel(), frozen, lam_c)
        return f, solve_triangular(L, g.reshape(-1, 3), lower=True).ravel()

    def objective(x, frozen, lam_c):
        Qx = Q.copy()
        Qx[free] = x.reshape(-1, 3)
        fs, gs = smoothness_cost(Qx)
        fc, gc = collision_cost(Qx, spline, frozen, vmap, cfg.inflation, cfg.buffer)
        fp, gp = physical_cost(Qx, spline.knot_interval, cfg.v_max, cfg.a_max, p)
        f = weights.smooth * fs + lam_c * fc + weights.physical * fp
        g = weights.smooth * gs + lam_c * gc + weights.physical * gp
        return f * scale, g[free].ravel() * scale

    if n_free <= 0:
        tube = build_tube(spline, fld, sys, cfg, Q0)
        return OptimizeResult(spline, tube, 0.0, smoothness_cost(Q)[0], 0,
                              violations(spline, tube, vmap, cfg.inflation, margin))

    for _ in range(cfg.escalations + 1):
        prev = np.inf
        while total_iters < cfg.max_iterations:
            cur = spline.with_points(Q)
            tube = build_tube(cur, fld, sys, cfg, Q0, clamp_unsafe=True)
            frozen = FrozenTube.from_tube(cur, tube, cfg.command_dt, margin)
            y0 = to_y(Q[free])
            f0, g0 = objective_y(y0, frozen, lam_c)
            log.debug("block start: f=%.6g |g|=%.3g", f0, np.linalg.norm(g0))
            if np.linalg.norm(g0) < cfg.grad_tol:
                break
            res = minimize(objective_y, y0, args=(frozen, lam_c), jac=True, method="L-BFGS-B",
                           options={"maxiter": min(cfg.block_iterations, cfg.max_iterations - total_iters),
                                    "gtol": cfg.grad_tol, "ftol": 1e-15, "maxls": 60})
            total_iters += max(int(res.nit), 1)
            if res.fun <= f0:
                Q[free] = to_x(res.x)
            else:
                stalled = True
            history.append(float(min(res.fun, f0)))
            if not res.success and "ABNORMAL" in str(res.message):
                stalled = True
            if ((np.isfinite(prev) and prev - res.fun <= cfg.rel_tol * abs(prev))
                    or np.linalg.norm(res.jac) < cfg.grad_tol):
                break
            prev = res.fun
        cur = spline.with_points(Q)
        tube = build_tube(cur, fld, sys, cfg, Q0, clamp_unsafe=True)
        bad = violations(cur, tube, vmap, cfg.inflation, margin)
        if bad.size == 0 or total_iters >= cfg.max_iterations:
            break
        lam_c *= 10.0
    frozen = FrozenTube.from_tube(cur, tube, cfg.command_dt, margin)
    fc, _ = collision_cost(Q, cur, frozen, vmap, cfg.inflation)
    if not np.all(np.isfinite(fld.lookup(tube.centers[:, :3]))):
        unsafe_cells = np.flatnonzero(~np.all(np.isfinite(fld.lookup(cur.commands(cfg.command_dt)[:, :3])), axis=1))
        bad = np.union1d(bad, unsafe_cells)
    if bad.size:
        log.warning("optimize: unsafe residual at %d samples", bad.size)
    return OptimizeResult(cur, tube, fc, smoothness_cost(Q)[0], total_iters, bad, stalled, history)


def save_spline(spline: UniformBSpline, path) -> None:
    lines = ["# egoplan bspline v1", f"degree {spline.degree}", f"knot_interval {spline.knot_interval!r}",
             f"control_points {len(spline.control_points)}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in spline.control_points]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_spline(path) -> UniformBSpline:
    lines = open(path).read().splitlines()
    if lines[0] != "# egoplan bspline v1":
        raise ValueError("magic: not an egoplan spline file")
    head = dict(line.split(None, 1) for line in lines[1:4])
    n = int(head["control_points"])
    pts = np.array([[float(v) for v in line.split()] for line in lines[4:4 + n]])
    if pts.shape != (n, 3):
        raise ValueError("control_points: count does not match payload")
    return UniformBSpline(pts, float(head["knot_interval"]), int(head["degree"]))


COMMAND_COLUMNS = ("t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az")


def save_commands_csv(spline: UniformBSpline, dt: float, path) -> None:
    """Sampled ``(p, v, a)`` commands every ``dt`` seconds."""
    t = spline.sample(dt)
    rows = np.hstack([t[:, None], spline.commands(dt)])
    with open(path, "w") as fh:
        fh.write(",".join(COMMAND_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")


def load_commands_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """``(times, commands)`` with command rows ``p, v, a``."""
    lines = open(path).read().splitlines()
    if tuple(lines[0].split(",")) != COMMAND_COLUMNS:
        raise ValueError(f"command CSV columns differ from {COMMAND_COLUMNS}")
    a = np.array([[float(v) for v in line.split(",")] for line in lines[1:]]).reshape(-1, len(COMMAND_COLUMNS))
    return a[:, 0], a[:, 1:]
