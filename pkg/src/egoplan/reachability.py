"""Ellipsoidal forward reachable sets of the closed-loop tracking error.

Error state ``e = [position error, velocity error]`` of a per-axis double
integrator under the feedback ``u = K e + u_nominal``.  The closed-loop
matrix is ``Phi = A + B K``; disturbances enter as accelerations (``D = B``).

Each disturbance channel i with bound ``w_i`` yields a shape ``Q_i(t)`` from
a Lyapunov equation; channels are merged by a trace-weighted Minkowski outer
bound and combined with the initial set before being mapped by
``expm(Phi t)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm, solve_continuous_lyapunov

from .disturbance import DisturbanceField, variance_to_bound

POS = slice(0, 3)


class NotHurwitzError(ValueError):
    pass


class UnsafeCommandError(ValueError):
    def __init__(self, index: int, position):
        super().__init__(f"command {index} at {np.round(position, 4).tolist()} lies in an unsafe field cell")
        self.index = index


def _sym(m):
    return 0.5 * (m + m.T)


def psd_clamp(m: np.ndarray) -> np.ndarray:
    """Symmetrise and clip negative eigenvalues to zero."""
    m = _sym(np.asarray(m, dtype=float))
    if not m.any():
        return m
    w, v = np.linalg.eigh(m)
    if w.min() >= 0:
        return m
    w = np.clip(w, 0.0, None)
    return _sym((v * w) @ v.T)


@dataclass
class Ellipsoid:
    """``{c + Q^(1/2) v : |v| <= 1}``."""

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.shape = np.asarray(self.shape, dtype=float)
        if self.shape.shape != (len(self.center),) * 2:
            raise ValueError("shape matrix does not match center dimension")
        if not np.allclose(self.shape, self.shape.T, atol=1e-10, rtol=0):
            raise ValueError("shape matrix must be symmetric")
        self.shape = psd_clamp(self.shape)

    @property
    def dim(self) -> int:
        return len(self.center)

    def support(self, direction) -> float:
        """``max x.p`` over the ellipsoid."""
        p = np.asarray(direction, dtype=float)
        return float(self.center @ p + np.sqrt(max(p @ self.shape @ p, 0.0)))

    def radius(self) -> float:
        """Half length of the longest axis."""
        return float(np.sqrt(max(np.linalg.eigvalsh(self.shape).max(), 0.0)))

    def axis_extents(self) -> np.ndarray:
        """Half-widths of the axis-aligned bounding box."""
        return np.sqrt(np.clip(np.diag(self.shape), 0.0, None))

    def mahalanobis(self, x, tol: float = 1e-10) -> np.ndarray:
        """``(x-c)^T Q^+ (x-c)``; directions outside the range of Q give ``inf`` unless zero."""
        return mahalanobis(self.shape, np.atleast_2d(x) - self.center, tol)


def mahalanobis(shape, e, tol: float = 1e-10) -> np.ndarray:
    e = np.atleast_2d(e)
    w, v = np.linalg.eigh(_sym(shape))
    scale = max(w.max(initial=0.0), 0.0)
    keep = w > tol * max(scale, 1e-300)
    coords = e @ v
    val = np.sum(coords[:, keep] ** 2 / w[keep], axis=1)
    null = np.abs(coords[:, ~keep]).max(axis=1, initial=0.0)
    return np.where(null > np.sqrt(tol) * (1.0 + np.linalg.norm(e, axis=1)), np.inf, val)


@dataclass
class ErrorSystem:
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    K: np.ndarray
    Phi: np.ndarray = field(init=False)

    def __post_init__(self):
        self.Phi = self.A + self.B @ self.K
        eig = np.linalg.eigvals(self.Phi)
        bad = eig[eig.real >= 0]
        if bad.size:
            raise NotHurwitzError(f"closed-loop matrix is not Hurwitz; offending eigenvalues: {bad.tolist()}")
        self._cache: dict = {}

    @property
    def n_w(self) -> int:
        return self.D.shape[1]

    def transition(self, dt: float) -> np.ndarray:
        key = ("F", float(dt))
        if key not in self._cache:
            self._cache[key] = expm(self.Phi * dt)
        return self._cache[key]

    def input_gain(self, dt: float) -> np.ndarray:
        """``int_0^dt expm(Phi s) ds`` (maps a held affine input to the state)."""
        key = ("G", float(dt))
        if key not in self._cache:
            n = self.Phi.shape[0]
            aug = np.zeros((2 * n, 2 * n))
            aug[:n, :n] = self.Phi
            aug[:n, n:] = np.eye(n)
            self._cache[key] = expm(aug * dt)[:n, n:]
        return self._cache[key]

    def unit_channel_shapes(self, dt: float) -> np.ndarray:
        """Channel shapes for unit bound and zero epsilon, stacked ``(n_w, 6, 6)``.

        ``channel_shape`` is affine in ``w_i**2``; this caches the linear part.
        """
        key = ("X", float(dt))
        if key not in self._cache:
            self._cache[key] = np.stack([
                channel_shape(self.Phi, self.D[:, i], 1.0, dt, 0.0) for i in range(self.n_w)])
        return self._cache[key]


def make_error_system(kp=4.0, kv=4.0, n_w: int = 3) -> ErrorSystem:
    """Per-axis PD tracking error system; gains may be scalars or 3-vectors."""
    kp = np.broadcast_to(np.asarray(kp, dtype=float), (3,))
    kv = np.broadcast_to(np.asarray(kv, dtype=float), (3,))
    I3, Z3 = np.eye(3), np.zeros((3, 3))
    A = np.block([[Z3, I3], [Z3, Z3]])
    B = np.vstack([Z3, I3])
    K = -np.hstack([np.diag(kp), np.diag(kv)])
    if n_w != 3:
        raise ValueError("acceleration disturbances use exactly three channels")
    return ErrorSystem(A, B, B.copy(), K)


def channel_shape(Phi, D_i, w_bar: float, t: float, eps: float) -> np.ndarray:
    """Shape ``Q_i(t)`` of one disturbance channel.

    Solves ``-Phi X - X Phi^T = expm(-Phi t) N expm(-Phi^T t) - N`` with
    ``N = t w^2 D_i D_i^T`` and returns ``X + eps t^2 I``.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if w_bar < 0 or eps < 0:
        raise ValueError("w_bar and eps must be non-negative")
    Phi = np.asarray(Phi, dtype=float)
    n = Phi.shape[0]
    d = np.asarray(D_i, dtype=float).reshape(n, 1)
    N = t * w_bar**2 * (d @ d.T)
    if N.any():
        E = expm(-Phi * t)
        rhs = E @ N @ E.T - N
        # scipy solves A X + X A^H = Q; here A = -Phi.
        X = solve_continuous_lyapunov(-Phi, rhs)
        if not np.all(np.isfinite(X)):
            raise np.linalg.LinAlgError("Lyapunov solve failed")
    else:
        X = np.zeros((n, n))
    return psd_clamp(X + eps * t**2 * np.eye(n))


def lyapunov_residual(Phi, Q_i, D_i, w_bar, t, eps) -> float:
    """Relative Frobenius residual of the channel Lyapunov equation."""
    n = Phi.shape[0]
    d = np.asarray(D_i, dtype=float).reshape(n, 1)
    N = t * w_bar**2 * (d @ d.T)
    X = Q_i - eps * t**2 * np.eye(n)
    E = expm(-Phi * t)
    r = -Phi @ X - X @ Phi.T - (E @ N @ E.T - N)
    return float(np.linalg.norm(r) / max(np.linalg.norm(N), 1e-300))


def minkowski_channels(shapes) -> np.ndarray:
    """Trace-weighted outer bound of the Minkowski sum of centered ellipsoids."""
    shapes = [np.asarray(q, dtype=float) for q in shapes]
    n = shapes[0].shape[0]
    roots = [np.sqrt(max(np.trace(q), 0.0)) for q in shapes]
    total = sum(roots)
    acc = np.zeros((n, n))
    for q, s in zip(shapes, roots):
        if s > 0:
            acc += q / s
    return total * acc


def combine_channels(Q0, channel_shapes, Phi, t: float) -> np.ndarray:
    """Shape after time ``t``: initial set and disturbance set merged, then mapped by ``expm(Phi t)``."""
    Q0 = np.asarray(Q0, dtype=float)
    Qd = minkowski_channels(channel_shapes)
    a = np.sqrt(max(np.trace(Q0), 0.0))
    b = np.sqrt(max(np.trace(Qd), 0.0))
    if a == 0 and b == 0:
        inner = np.zeros_like(Q0)
    elif a == 0:
        inner = Qd
    elif b == 0:
        inner = Q0
    else:
        inner = (1 + b / a) * Q0 + (1 + a / b) * Qd
    F = expm(np.asarray(Phi, dtype=float) * t)
    return psd_clamp(F @ inner @ F.T)


def project_position(E: Ellipsoid) -> Ellipsoid:
    """Projection of a position/velocity ellipsoid onto the position coordinates."""
    return Ellipsoid(E.center[POS], E.shape[POS, POS])


def one_step_shape(sys: ErrorSystem, Q, w_bar, dt: float, eps: float) -> np.ndarray:
    """Advance a shape matrix by one command period with constant channel bounds."""
    unit = sys.unit_channel_shapes(dt)
    n = sys.Phi.shape[0]
    shapes = [np.asarray(w) ** 2 * unit[i] + eps * dt**2 * np.eye(n) for i, w in enumerate(w_bar)]
    Qd = minkowski_channels(shapes)
    return _combine_with(Q, Qd, sys.transition(dt))


def _combine_with(Q, Qd, F):
    a = np.sqrt(max(np.trace(Q), 0.0))
    b = np.sqrt(max(np.trace(Qd), 0.0))
    if a == 0 and b == 0:
        return np.zeros_like(Q)
    if a == 0:
        inner = Qd
    elif b == 0:
        inner = Q
    else:
        inner = (1 + b / a) * Q + (1 + a / b) * Qd
    return psd_clamp(F @ inner @ F.T)


def default_initial_shape(pos_std: float = 0.01, vel_std: float = 0.05) -> np.ndarray:
    return np.diag([pos_std**2] * 3 + [vel_std**2] * 3)


# -- tubes ---------------------------------------------------------------------

@dataclass
class FRSTube:
    """Reachable-set tube sampled at the command period."""

    times: np.ndarray          # (n,)
    centers: np.ndarray        # (n, 6) predicted state (position, velocity)
    shapes: np.ndarray         # (n, 6, 6)
    radii: np.ndarray          # (n,)
    bounds: np.ndarray         # (n, 3) channel bounds applied on the step leaving each sample

    def __len__(self):
        return len(self.times)

    def full(self, k: int) -> Ellipsoid:
        return Ellipsoid(self.centers[k], self.shapes[k])

    def position(self, k: int) -> Ellipsoid:
        return project_position(self.full(k))

    def position_extents(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diagonal(self.shapes[:, POS, POS], axis1=1, axis2=2), 0, None))

    def save_csv(self, path) -> None:
        cols = ["t", "cx", "cy", "cz", "qxx", "qxy", "qxz", "qyy", "qyz", "qzz", "r"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for k in range(len(self)):
                q = self.shapes[k, POS, POS]
                w.writerow([repr(float(v)) for v in (
                    self.times[k], *self.centers[k, :3], q[0, 0], q[0, 1], q[0, 2], q[1, 1], q[1, 2],
                    q[2, 2], self.radii[k])])


def load_tube_csv(path) -> dict[str, np.ndarray]:
    data = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
    names = ["t", "cx", "cy", "cz", "qxx", "qxy", "qxz", "qyy", "qyz", "qzz", "r"]
    return {n: data[:, i] for i, n in enumerate(names)}


def nominal_response(sys: ErrorSystem, commands: np.ndarray, dt: float, x0=None) -> np.ndarray:
    """Disturbance-free closed-loop state under held discrete commands.

    ``commands`` has rows ``(p, v, a)`` (9 columns).  Command k is held over
    ``[k dt, (k+1) dt)`` while the controller ``u = a_k + K (x - x_k)`` runs
    continuously.  Returns the state at every command instant, shape (n, 6).
    """
    commands = np.asarray(commands, dtype=float)
    F = sys.transition(dt)
    G = sys.input_gain(dt)
    ref = commands[:, :6]
    forcing = commands[:, 6:9] @ sys.B.T - ref @ (sys.B @ sys.K).T
    x = np.empty((len(commands), 6))
    x[0] = ref[0] if x0 is None else x0
    for k in range(len(commands) - 1):
        x[k + 1] = F @ x[k] + G @ forcing[k]
    return x


def propagate_tube(commands, fld: DisturbanceField | None, sys: ErrorSystem, Q0=None,
                   eps: float = 1e-4, dt: float = 0.02, k_sigma: float = 3.0,
                   bounds: np.ndarray | None = None) -> FRSTube:
    """Propagate centers and shapes along a 50 Hz (by default) command sequence.

    Channel bounds come from the field cell under each command, held for
    that step; pass ``bounds`` (n, 3) to override the lookup.
    """
    commands = np.asarray(commands, dtype=float)
    n = len(commands)
    if bounds is None:
        var = fld.lookup(commands[:, :3])
        bad = np.flatnonzero(~np.all(np.isfinite(var), axis=1))
        if bad.size:
            raise UnsafeCommandError(int(bad[0]), commands[bad[0], :3])
        bounds = variance_to_bound(var, k_sigma)
    bounds = np.asarray(bounds, dtype=float).reshape(n, -1)
    Q = default_initial_shape() if Q0 is None else np.asarray(Q0, dtype=float)
    centers = nominal_response(sys, commands, dt)
    shapes = np.empty((n, 6, 6))
    shapes[0] = psd_clamp(Q)
    for k in range(n - 1):
        shapes[k + 1] = one_step_shape(sys, shapes[k], bounds[k], dt, eps)
    radii = np.sqrt(np.clip(np.linalg.eigvalsh(shapes[:, POS, POS])[:, -1], 0, None))
    return FRSTube(np.arange(n) * dt, centers, shapes, radii, bounds)


def hover_frs(w_bar, sys: ErrorSystem, eps: float = 1e-4, dt: float = 0.02, Q0=None,
              tol: float = 1e-8, max_steps: int = 10_000) -> float:
    """Steady-state position radius of the tube while hovering under constant bounds."""
    return float(hover_radii(np.atleast_2d(w_bar), sys, eps, dt, Q0, tol, max_steps)[0])


def hover_radii(w_bars, sys: ErrorSystem, eps: float = 1e-4, dt: float = 0.02, Q0=None,
                tol: float = 1e-8, max_steps: int = 10_000) -> np.ndarray:
    """Batched :func:`hover_frs` over rows of channel bounds; ``inf`` rows map to ``inf``."""
    w_bars = np.atleast_2d(np.asarray(w_bars, dtype=float))
    m = len(w_bars)
    out = np.full(m, np.inf)
    finite = np.all(np.isfinite(w_bars), axis=1)
    if not finite.any():
        return out
    W = w_bars[finite]
    unit = sys.unit_channel_shapes(dt)
    n = sys.Phi.shape[0]
    F = sys.transition(dt)
    eye = np.eye(n)
    shapes = W[:, :, None, None] ** 2 * unit[None] + eps * dt**2 * eye  # (m, n_w, n, n)
    tr = np.sqrt(np.clip(np.trace(shapes, axis1=2, axis2=3), 0, None))  # (m, n_w)
    safe = np.where(tr > 0, tr, 1.0)
    Qd = tr.sum(axis=1)[:, None, None] * np.sum(
        np.where(tr[:, :, None, None] > 0, shapes / safe[:, :, None, None], 0.0), axis=1)
    b = np.sqrt(np.clip(np.trace(Qd, axis1=1, axis2=2), 0, None))
    Q = np.broadcast_to(default_initial_shape() if Q0 is None else np.asarray(Q0, float), Qd.shape).copy()
    done = np.zeros(len(W), dtype=bool)
    for _ in range(max_steps):
        a = np.sqrt(np.clip(np.trace(Q, axis1=1, axis2=2), 0, None))
        with np.errstate(divide="ignore", invalid="ignore"):
            ca = np.where(a > 0, 1 + b / np.where(a > 0, a, 1), 0.0)
            cb = np.where(b > 0, np.where(a > 0, 1 + a / np.where(b > 0, b, 1), 1.0), 0.0)
        ca = np.where((a > 0) & (b == 0), 1.0, ca)
        inner = ca[:, None, None] * Q + cb[:, None, None] * Qd
        Qn = F @ inner @ F.T
        Qn = 0.5 * (Qn + np.swapaxes(Qn, 1, 2))
        diff = np.linalg.norm(Qn - Q, axis=(1, 2))
        ref = np.linalg.norm(Q, axis=(1, 2))
        # Converged rows stay frozen so a row's result does not depend on its batch.
        Q = np.where(done[:, None, None], Q, Qn)
        done |= (diff <= tol * ref) | (ref <= 1e-30)
        if done.all():
            break
    else:
        raise RuntimeError("hover reachable set did not converge")
    r = np.sqrt(np.clip(np.linalg.eigvalsh(Q[:, POS, POS])[:, -1], 0, None))
    out[finite] = r
    return out
