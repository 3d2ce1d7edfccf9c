"""Uniform B-spline trajectories."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb, factorial

import numpy as np


@lru_cache(maxsize=None)
def basis_matrix(degree: int) -> np.ndarray:
    """Uniform B-spline basis matrix ``M`` so that a segment is ``[1 s s^2 ...] M P``."""
    k = degree + 1
    M = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            acc = 0.0
            for s in range(j, k):
                acc += (-1) ** (s - j) * comb(k, s - j) * (k - s - 1) ** (k - 1 - i)
            M[i, j] = comb(k - 1, k - 1 - i) * acc / factorial(k - 1)
    return M


def _power_row(s: np.ndarray, degree: int, deriv: int) -> np.ndarray:
    """Rows of d^deriv/ds^deriv [1, s, s^2, ...] for each s."""
    s = np.asarray(s, dtype=float)
    out = np.zeros((len(s), degree + 1))
    for i in range(deriv, degree + 1):
        coef = factorial(i) / factorial(i - deriv)
        out[:, i] = coef * s ** (i - deriv)
    return out


@dataclass
class UniformBSpline:
    """Degree-``degree`` uniform B-spline over ``t in [0, duration]``.

    Segment j (time ``[j dt, (j+1) dt)``) is governed by control points
    ``Q_j .. Q_{j+degree}``.
    """

    control_points: np.ndarray
    knot_interval: float
    degree: int = 3

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=float)
        if self.degree < 1:
            raise ValueError("degree must be at least 1")
        if len(self.control_points) < self.degree + 1:
            raise ValueError("need at least degree + 1 control points")
        if self.knot_interval <= 0:
            raise ValueError("knot interval must be positive")

    @property
    def n_segments(self) -> int:
        return len(self.control_points) - self.degree

    @property
    def duration(self) -> float:
        return self.n_segments * self.knot_interval

    def with_points(self, pts) -> "UniformBSpline":
        return UniformBSpline(np.asarray(pts, dtype=float), self.knot_interval, self.degree)

    def _locate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        u = np.clip(t / self.knot_interval, 0.0, self.n_segments)
        seg = np.minimum(np.floor(u).astype(int), self.n_segments - 1)
        return seg, u - seg

    def basis_weights(self, t, deriv: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Segment index and the ``degree+1`` control-point weights for each time."""
        seg, s = self._locate(t)
        w = _power_row(s, self.degree, deriv) @ basis_matrix(self.degree)
        return seg, w / self.knot_interval**deriv

    def evaluate(self, t, deriv: int = 0) -> np.ndarray:
        seg, w = self.basis_weights(t, deriv)
        idx = seg[:, None] + np.arange(self.degree + 1)
        return np.einsum("nk,nkd->nd", w, self.control_points[idx])

    def sample(self, dt: float) -> np.ndarray:
        """Times ``0, dt, ...`` up to the duration (inclusive when it lands on the grid)."""
        n = int(np.floor(self.duration / dt + 1e-9))
        return np.arange(n + 1) * dt

    def commands(self, dt: float) -> np.ndarray:
        """Rows ``(p, v, a)`` sampled every ``dt``."""
        t = self.sample(dt)
        return np.hstack([self.evaluate(t, 0), self.evaluate(t, 1), self.evaluate(t, 2)])

    def sampling_matrix(self, t, deriv: int = 0) -> np.ndarray:
        """Dense matrix mapping control points to values at times ``t``."""
        seg, w = self.basis_weights(t, deriv)
        S = np.zeros((len(seg), len(self.control_points)))
        for k in range(self.degree + 1):
            np.add.at(S, (np.arange(len(seg)), seg + k), w[:, k])
        return S

    def derivative_points(self, order: int = 1) -> np.ndarray:
        """Control points of the ``order``-th derivative spline (degree drops by ``order``)."""
        pts = self.control_points
        for _ in range(order):
            pts = np.diff(pts, axis=0) / self.knot_interval
        return pts


def endpoint_block(degree: int, knot_interval: float, at_end: bool = False) -> np.ndarray:
    """Matrix mapping the ``degree`` control points nearest an end to derivatives 0..degree-1 there."""
    s = np.array([1.0 if at_end else 0.0])
    rows = []
    for deriv in range(degree):
        w = (_power_row(s, degree, deriv) @ basis_matrix(degree))[0] / knot_interval**deriv
        rows.append(w[1:] if at_end else w[:-1])
    return np.array(rows)


def pinned_points(state_derivs: np.ndarray, degree: int, knot_interval: float, at_end: bool = False):
    """Control points reproducing position/velocity/... ``state_derivs`` (degree x 3) at an end."""
    M = endpoint_block(degree, knot_interval, at_end)
    return np.linalg.solve(M, np.asarray(state_derivs, dtype=float))


def integrated_squared_jerk(spline: UniformBSpline, rate: float = 1000.0) -> float:
    """Riemann sum of |jerk|^2 sampled at ``rate`` Hz."""
    dt = 1.0 / rate
    n = max(int(round(spline.duration * rate)), 1)
    t = (np.arange(n) + 0.5) * dt * spline.duration / (n * dt)
    j = spline.evaluate(t, 3) if spline.degree >= 3 else np.zeros((n, 3))
    return float(np.sum(j**2) * spline.duration / n)


def path_length(spline: UniformBSpline, rate: float = 1000.0) -> float:
    n = max(int(round(spline.duration * rate)), 1)
    t = np.linspace(0.0, spline.duration, n + 1)
    p = spline.evaluate(t)
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))
