"""Hybrid-state A* over constant-acceleration primitives of a 3-axis double integrator."""
from __future__ import annotations

import csv
import heapq
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .voxel_map import VoxelMap


class NoPathError(RuntimeError):
    def __init__(self, explored: int, reason: str = "open list exhausted"):
        super().__init__(f"no path: {reason} after expanding {explored} nodes")
        self.explored = explored


class UnsafeEndpointError(ValueError):
    pass


@dataclass
class SearchConfig:
    a_max: float = 2.0
    v_max: float = 1.5
    levels: tuple[float, ...] = (-1.0, -0.5, 0.0, 0.5, 1.0)  # fractions of a_max
    durations: tuple[float, ...] = (0.1, 0.2, 0.4)
    rho: float = 10.0
    goal_tol_pos: float = 0.2
    goal_tol_vel: float = 0.2
    pos_bin: float | None = 0.2  # None: the map resolution
    vel_bin: float | None = 0.5  # None: v_max / 10
    fine_radius: float = 1.0  # within this distance of the goal, bin at (resolution, v_max / 10)
    max_expansions: int = 20_000
    max_depth: int | None = None
    heuristic_weight: float = 2.0
    detour_heuristic: bool = True

    def inputs(self) -> np.ndarray:
        lv = np.asarray(self.levels, dtype=float) * self.a_max
        if not np.allclose(np.sort(lv), np.sort(-lv)):
            raise ValueError("input levels must be symmetric about zero")
        return np.array(list(itertools.product(lv, lv, lv)))


@dataclass
class SearchState:
    position: np.ndarray
    velocity: np.ndarray
    g: float = 0.0
    f: float = 0.0
    parent: "SearchState | None" = field(default=None, repr=False)
    u: np.ndarray | None = None
    tau: float = 0.0
    depth: int = 0


def expand(state: SearchState, u, tau: float, rho: float = 10.0) -> SearchState:
    """Child reached by holding acceleration ``u`` for ``tau`` seconds (f left to the caller)."""
    u = np.asarray(u, dtype=float)
    p = state.position + state.velocity * tau + 0.5 * u * tau**2
    v = state.velocity + u * tau
    g = state.g + (float(u @ u) + rho) * tau
    return SearchState(p, v, g, g, state, u, tau, state.depth + 1)


def _heuristic_coeffs(p, v, goal_p, goal_v):
    D = goal_p - p
    c_d = np.sum(D * D, axis=-1)
    c_dv = np.sum(D * (v + goal_v), axis=-1)
    c_v = np.sum(v * v + v * goal_v + goal_v * goal_v, axis=-1)
    return c_d, c_dv, c_v


def heuristic_cost_at(T, p, v, goal_p, goal_v, rho):
    """Optimal cost of reaching the goal in exactly ``T`` (minimum-effort, obstacle-free)."""
    T = np.asarray(T, dtype=float)[..., None]
    dp = goal_p - p - v * T
    dv = goal_v - v
    alpha = (-12.0 * dp + 6.0 * T * dv) / T**3
    beta = (6.0 * T * dp - 2.0 * T**2 * dv) / T**3
    per_axis = alpha**2 * T**3 / 3.0 + alpha * beta * T**2 + beta**2 * T
    return rho * T[..., 0] + per_axis.sum(axis=-1)


def heuristic(p, v, goal_p, goal_v, rho: float = 10.0, t_min: float = 1e-6) -> np.ndarray | float:
    """Minimum over the free final time of :func:`heuristic_cost_at`.

    Stationary points solve ``rho T^4 - 4 c_v T^2 + 24 c_dv T - 36 c_d = 0``.
    Accepts batches along the leading axis.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    goal_p = np.asarray(goal_p, dtype=float)
    goal_v = np.asarray(goal_v, dtype=float)
    n = max(len(p), len(v))
    p = np.broadcast_to(p, (n, 3))
    v = np.broadcast_to(v, (n, 3))
    c_d, c_dv, c_v = _heuristic_coeffs(p, v, goal_p, goal_v)
    comp = np.zeros((n, 4, 4))
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    comp[:, 0, 1] = 4.0 * c_v / rho
    comp[:, 0, 2] = -24.0 * c_dv / rho
    comp[:, 0, 3] = 36.0 * c_d / rho
    roots = np.linalg.eigvals(comp)
    real = np.abs(roots.imag) <= 1e-7 * np.maximum(1.0, np.abs(roots.real))
    cand = np.where(real & (roots.real > t_min), roots.real, np.nan)
    with np.errstate(all="ignore"):
        costs = heuristic_cost_at(np.nan_to_num(cand, nan=1.0), p[:, None, :], v[:, None, :],
                                  goal_p, goal_v, rho)
    costs = np.where(np.isnan(cand), np.inf, costs)
    h = costs.min(axis=1)
    coincident = (c_d == 0) & np.all(v == goal_v, axis=1)
    h = np.where(coincident, 0.0, h)
    return float(h[0]) if n == 1 else h


class HoverSafety:
    """Decides whether hovering at a point keeps the hover reachable set clear of obstacles.

    ``required(points)`` returns the radius that must fit; ``clearance`` is the
    interpolated obstacle distance minus ``inflation``.
    """

    def __init__(self, vmap: VoxelMap, required: Callable[[np.ndarray], np.ndarray],
                 inflation: float = 0.0):
        self.vmap = vmap
        self.required = required
        self.inflation = inflation

    def clearance(self, pts) -> np.ndarray:
        return np.atleast_1d(self.vmap.distance(np.atleast_2d(pts))) - self.inflation

    def safe(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        inside = self.vmap.contains(pts)
        ok = np.zeros(len(pts), dtype=bool)
        if inside.any():
            q = pts[inside]
            ok[inside] = self.required(q) <= self.clearance(q)
        return ok


def geodesic_to_goal(vmap: VoxelMap, free: np.ndarray, goal) -> np.ndarray:
    """26-connected shortest-path length from every free voxel to the goal voxel (``inf`` if cut off)."""
    dims = vmap.dims
    ids = np.full(dims, -1, dtype=np.int64)
    idx = np.argwhere(free)
    ids[tuple(idx.T)] = np.arange(len(idx))
    out = np.full(dims, np.inf)
    g = vmap.index_of(goal)
    if not vmap.in_bounds_index(g) or not free[tuple(g)]:
        return out
    rows, cols, wts = [], [], []
    offsets = [o for o in np.ndindex(3, 3, 3) if o > (1, 1, 1)]
    for o in offsets:
        o = np.asarray(o) - 1
        nb = idx + o
        ok = np.all((nb >= 0) & (nb < dims), axis=1)
        a, b = idx[ok], nb[ok]
        bid = ids[tuple(b.T)]
        keep = bid >= 0
        rows.append(ids[tuple(a[keep].T)])
        cols.append(bid[keep])
        wts.append(np.full(int(keep.sum()), vmap.resolution * float(np.linalg.norm(o))))
    graph = coo_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(len(idx), len(idx))).tocsr()
    dist = dijkstra(graph, directed=False, indices=int(ids[tuple(g)]))
    out[tuple(idx.T)] = dist
    return out


def _bin(p, v, pos_bin, vel_bin):
    return tuple(np.floor(p / pos_bin).astype(int).tolist() + np.floor(v / vel_bin).astype(int).tolist())


def _binner(gp, cfg: SearchConfig, vmap: VoxelMap):
    """State key: coarse bins far from the goal, fine ones near it so braking states survive pruning."""
    coarse = (cfg.pos_bin or vmap.resolution, cfg.vel_bin or cfg.v_max / 10.0)
    fine = (min(coarse[0], vmap.resolution), min(coarse[1], cfg.v_max / 10.0))

    def key(p, v):
        near = np.linalg.norm(p - gp) <= cfg.fine_radius
        return (near,) + _bin(p, v, *(fine if near else coarse))

    return key


def search(vmap: VoxelMap, safety: HoverSafety, start, goal, config: SearchConfig | None = None):
    """Find a primitive sequence from ``start`` to ``goal`` (each a ``(position, velocity)`` pair).

    Returns ``[(state, u, tau), ...]`` beginning with the start state
    (``u = None``, ``tau = 0``).
    """
    cfg = config or SearchConfig()
    sp, sv = (np.asarray(x, dtype=float) for x in start)
    gp, gv = (np.asarray(x, dtype=float) for x in goal)
    if not safety.safe(sp)[0]:
        raise UnsafeEndpointError(f"start {sp.tolist()} is not hover-safe")
    if not safety.safe(gp)[0]:
        raise UnsafeEndpointError(f"goal {gp.tolist()} is not hover-safe")
    key_of = _binner(gp, cfg, vmap)
    U = cfg.inputs()
    taus = np.asarray(cfg.durations, dtype=float)
    # Samples along each primitive: spacing at most one map cell.
    reach = cfg.v_max * np.sqrt(3) * taus + 0.5 * cfg.a_max * np.sqrt(3) * taus**2
    n_samp = np.maximum(np.ceil(reach / vmap.resolution).astype(int), 1)

    detour = _detour_fn(vmap, safety, gp, cfg)
    root = SearchState(sp, sv, 0.0, 0.0)
    root.f = cfg.heuristic_weight * (heuristic(sp, sv, gp, gv, cfg.rho) + detour(sp[None])[0])
    best_g = {key_of(sp, sv): 0.0}
    counter = itertools.count()
    heap = [(root.f, -root.g, key_of(sp, sv), next(counter), root)]
    expanded = 0
    while heap:
        f, neg_g, key, _, node = heapq.heappop(heap)
        if node.g > best_g.get(key, np.inf) + 1e-12:
            continue
        if (np.linalg.norm(node.position - gp) <= cfg.goal_tol_pos
                and np.linalg.norm(node.velocity - gv) <= cfg.goal_tol_vel):
            return _unwind(node)
        if expanded >= cfg.max_expansions:
            raise NoPathError(expanded, "expansion budget exhausted")
        expanded += 1
        if cfg.max_depth is not None and node.depth >= cfg.max_depth:
            continue
        for tau, ns in zip(taus, n_samp):
            v1 = node.velocity + U * tau
            ok = np.all(np.abs(v1) <= cfg.v_max + 1e-9, axis=1)
            if not ok.any():
                continue
            Uk = U[ok]
            s = np.linspace(0.0, tau, ns + 1)[1:]
            pts = (node.position + node.velocity * s[:, None, None]
                   + 0.5 * Uk[None] * s[:, None, None] ** 2)
            safe = safety.safe(pts.reshape(-1, 3)).reshape(len(s), len(Uk)).all(axis=0)
            if not safe.any():
                continue
            Uk = Uk[safe]
            p1 = node.position + node.velocity * tau + 0.5 * Uk * tau**2
            v1 = node.velocity + Uk * tau
            g1 = node.g + (np.sum(Uk * Uk, axis=1) + cfg.rho) * tau
            h1 = np.atleast_1d(heuristic(p1, v1, gp, gv, cfg.rho)) + detour(p1)
            h1 = cfg.heuristic_weight * h1
            for j in range(len(Uk)):
                k = key_of(p1[j], v1[j])
                if g1[j] >= best_g.get(k, np.inf):
                    continue
                best_g[k] = g1[j]
                child = SearchState(p1[j], v1[j], float(g1[j]), float(g1[j] + h1[j]), node, Uk[j],
                                    float(tau), node.depth + 1)
                heapq.heappush(heap, (child.f, -child.g, k, next(counter), child))
    raise NoPathError(expanded)


def _detour_fn(vmap: VoxelMap, safety: HoverSafety, gp, cfg: SearchConfig):
    """Extra time cost ``rho * (geodesic - straight distance) / v_max`` around obstacles.

    The geodesic runs over hover-safe voxel centers.  The term is not
    admissible; it only steers the weighted search.
    """
    if not cfg.detour_heuristic:
        return lambda pts: np.zeros(len(pts))
    free = vmap.esdf() - safety.inflation > 0
    cand = np.argwhere(free)
    free[tuple(cand.T)] = safety.safe(vmap.center_of(cand))
    geo = geodesic_to_goal(vmap, free, gp)
    finite = np.isfinite(geo)
    if not finite.any():
        return lambda pts: np.zeros(len(pts))
    # Voxels cut off from the goal keep a finite penalty: the continuous
    # search may still squeeze through where voxel centers cannot.
    geo = np.where(finite, geo, geo[finite].max() + vmap.diagonal)

    def fn(pts):
        c = np.clip(vmap.index_of(pts), 0, np.asarray(vmap.dims) - 1)
        g = geo[c[:, 0], c[:, 1], c[:, 2]]
        return cfg.rho * np.maximum(g - np.linalg.norm(pts - gp, axis=1), 0.0) / cfg.v_max

    return fn


def _unwind(node: SearchState):
    out = []
    while node is not None:
        out.append((node, node.u, node.tau))
        node = node.parent
    return out[::-1]


def path_duration(path) -> float:
    return float(sum(tau for _, _, tau in path))


def sample_path(path, times) -> tuple[np.ndarray, np.ndarray]:
    """Exact positions and velocities of a primitive path at the given times."""
    times = np.asarray(times, dtype=float)
    starts = np.cumsum([0.0] + [tau for _, _, tau in path[1:]])
    P = np.empty((len(times), 3))
    V = np.empty((len(times), 3))
    for n, t in enumerate(times):
        k = int(np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(path) - 2)) if len(path) > 1 else 0
        if len(path) == 1:
            P[n], V[n] = path[0][0].position, path[0][0].velocity
            continue
        parent = path[k][0]
        s = min(max(t - starts[k], 0.0), path[k + 1][2])
        u = path[k + 1][1]
        P[n] = parent.position + parent.velocity * s + 0.5 * u * s**2
        V[n] = parent.velocity + u * s
    return P, V


def path_cost(path, rho: float) -> float:
    return float(sum((float(u @ u) + rho) * tau for _, u, tau in path[1:]))


PATH_COLUMNS = ("t", "px", "py", "pz", "vx", "vy", "vz", "ux", "uy", "uz")


def save_path_csv(path, filename) -> None:
    """One row per state; ``u`` is the input of the primitive leaving it (zero on the last row)."""
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PATH_COLUMNS)
        t = 0.0
        for n, (state, _, tau) in enumerate(path):
            t += tau
            u = path[n + 1][1] if n + 1 < len(path) else np.zeros(3)
            w.writerow([repr(float(x)) for x in (t, *state.position, *state.velocity, *u)])


def load_path_csv(filename) -> dict[str, np.ndarray]:
    """Columns of a saved path, keyed by name."""
    with open(filename, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != PATH_COLUMNS:
            raise ValueError(f"path CSV columns differ from {PATH_COLUMNS}")
        a = np.array([[float(v) for v in r] for r in reader]).reshape(-1, len(PATH_COLUMNS))
    return {c: a[:, i] for i, c in enumerate(PATH_COLUMNS)}
