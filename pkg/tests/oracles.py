"""Reference computations shared by the unit and acceptance tests."""
import numpy as np
import pandas as pd

from egoplan.bspline import UniformBSpline
from egoplan.kinodynamic import heuristic_cost_at
from egoplan.trajectory_opt import FrozenTube
from egoplan.voxel_map import VoxelMap


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def gradient_error(g, fd):
    """Largest component error relative to the gradient's scale."""
    scale = max(np.abs(fd).max(), np.abs(g).max(), 1e-12)
    return float(np.abs(g - fd).max() / scale)


def sweep_min(p, v, gp, gv, rho):
    """Dense sweep of the fixed-time cost over T in (0, 100].

    A 1e-2 grid finds every near-minimal cell; those cells are then swept at
    1e-4, which equals a full 1e-4 sweep wherever the global minimum can lie.
    """
    T = np.arange(1, 10_001) * 1e-2
    J = heuristic_cost_at(T, p, v, gp, gv, rho)
    best = J.min()
    out = best
    for c in np.flatnonzero(J <= best * (1 + 1e-2) + 1e-12):
        fine = np.arange(max(T[c] - 1e-2, 1e-4), T[c] + 1e-2 + 1e-12, 1e-4)
        out = min(out, heuristic_cost_at(fine, p, v, gp, gv, rho).min())
    return out


def _reachable(p0, v0, U, taus, depth, rho, backward=False):
    """Every state within ``depth`` primitives of ``(p0, v0)`` with its cheapest cost."""
    P, V, G = [p0[None]], [v0[None]], [np.zeros(1)]
    cp, cv, cg = P[0], V[0], G[0]
    for _ in range(depth):
        nps, nvs, ngs = [], [], []
        for tau in taus:
            if backward:
                v = cv[:, None] - U[None] * tau
                p = cp[:, None] - v * tau - 0.5 * U[None] * tau**2
            else:
                p = cp[:, None] + cv[:, None] * tau + 0.5 * U[None] * tau**2
                v = cv[:, None] + U[None] * tau
            nps.append(p.reshape(-1, 3))
            nvs.append(v.reshape(-1, 3))
            ngs.append((cg[:, None] + (np.sum(U * U, axis=1) + rho)[None] * tau).ravel())
        cp, cv, cg = np.concatenate(nps), np.concatenate(nvs), np.concatenate(ngs)
        P.append(cp)
        V.append(cv)
        G.append(cg)
    key = np.round(np.hstack([np.concatenate(P), np.concatenate(V)]) * 1e6).astype(np.int64)
    df = pd.DataFrame(key, columns=list("abcdef"))
    df["g"] = np.concatenate(G)
    return df.groupby(list("abcdef"), as_index=False)["g"].min()


def enumerate_optimum(p0, v0, gp, gv, cfg, depth=4):
    """Cheapest sequence of at most ``depth`` primitives hitting the goal state exactly.

    Exhaustive over the primitive set, organised as a meet-in-the-middle join
    of forward and backward reachable states.
    """
    U, taus = cfg.inputs(), cfg.durations
    fwd = _reachable(p0, v0, U, taus, depth // 2, cfg.rho)
    bwd = _reachable(gp, gv, U, taus, depth - depth // 2, cfg.rho, backward=True)
    joined = fwd.merge(bwd, on=list("abcdef"))
    return float((joined["g_x"] + joined["g_y"]).min()) if len(joined) else np.inf


def projection_support_oracle(center, shape, p, n=100_000, rng=None):
    """Max of ``p . x`` over ``n`` boundary points of a 6-D ellipsoid, projected to position.

    The points are the boundary points whose outward normal lies in position
    space, ``x = c + Q q / sqrt(q^T Q q)`` with ``q = (q_pos, 0)`` and
    ``q_pos`` uniform on the sphere; those are exactly the points that
    project onto the outline of the shadow.
    """
    rng = rng or np.random.default_rng(0)
    q = np.zeros((n, 6))
    q[:, :3] = rng.normal(size=(n, 3))
    Qq = q @ shape.T
    x = center + Qq / np.sqrt(np.einsum("ij,ij->i", q, Qq))[:, None]
    return float((x[:, :3] @ p).max()), x


def obstacle_map():
    vm = VoxelMap.empty((30, 30, 20), 0.1)
    vm.occupancy[:, :, 0] = True
    vm.occupancy[12:16, 10:20, :] = True
    return vm


def random_collision_case(rng, vm, dt=0.02):
    """Random spline near the obstacles of ``vm`` with a random frozen tube that it partly violates.

    Predicted points avoid the interpolation lattice planes by 1e-4 cells so
    finite differences never straddle a kink.
    """
    while True:
        n = int(rng.integers(8, 14))
        base = np.array([1.2, 1.0, 0.4]) + rng.uniform(-0.6, 0.6, 3)
        Q = base + np.cumsum(rng.normal(0, 0.08, (n, 3)), axis=0)
        sp = UniformBSpline(Q, 0.1)
        t = sp.sample(dt)
        frozen = FrozenTube(t, rng.normal(0, 0.01, (len(t), 3)), rng.normal(0, 0.05, (len(t), 3)),
                            rng.uniform(0.1, 0.5, len(t)), dt)
        pp = sp.evaluate(t) + frozen.pos_offset
        if not np.all(vm.contains(pp)):
            continue
        u = (pp - vm.origin) / vm.resolution - 0.5
        if np.min(np.abs(u - np.round(u))) < 1e-4:
            continue
        return sp, frozen
