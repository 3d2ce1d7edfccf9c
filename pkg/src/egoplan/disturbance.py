"""Voxel-wise ego-airflow acceleration-variance model and the field built from it.

Each labelled surface voxel visible from the vehicle adds a variance
contribution; the contributions of ground, corner and wall voxels are summed
into a per-axis variance bound.

Note on the corner term: its denominator is ``d_c**2 + h_c**6``.  The mixed
powers are dimensionally inconsistent but are kept exactly as the model was
published; calibrated constants absorb the units.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .voxel_map import MAP_MAGIC, MapFormatError, SurfaceLabels, VoxelMap, _header_geometry, \
    _parse_header, visible_from

UNSAFE = np.inf


@dataclass(frozen=True)
class DisturbanceParams:
    """Constants of the ground / corner / wall variance terms (SI units, angles in rad).

    The defaults are the shipped calibration for the reference vehicle
    (5-inch class, ``r0 = 0.15 m``).
    """

    lambda_g: float = 0.01
    k_g1: float = 0.3
    k_g2: float = 6.0
    lambda_c: float = 0.5
    k_w1: float = 6.0
    k_w2: float = 8.0
    theta_g: float = np.deg2rad(30.0)
    l_g: float = 2.0
    r0: float = 0.15
    phi_c: float = np.deg2rad(45.0)
    l_c: float = 2.0
    theta_w_min: float = np.deg2rad(60.0)
    l_w: float = 1.5
    isotropic_fraction: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if not (0 < self.theta_g <= np.pi / 2 and 0 < self.phi_c <= np.pi / 2):
            raise ValueError("cone half-angles must lie in (0, pi/2]")
        if self.theta_w_min > np.pi / 2:
            raise ValueError("theta_w_min must not exceed pi/2")
        if min(self.l_g, self.l_c, self.l_w) <= 0:
            raise ValueError("ranges must be positive")

    @property
    def max_range(self) -> float:
        return max(self.l_g, self.l_c, self.l_w)

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DisturbanceParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown disturbance parameter(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


FIT_KEYS = ("lambda_g", "k_g1", "k_g2", "lambda_c", "k_w1", "k_w2")


# -- per-voxel terms --------------------------------------------------------

def ground_term(l, theta, params: DisturbanceParams, a):
    """Ground contribution for distance(s) ``l`` and angle(s) ``theta`` from the downward vertical."""
    l = np.asarray(l, dtype=float)
    theta = np.asarray(theta, dtype=float)
    in_cone = (theta <= params.theta_g) & (l <= params.l_g)
    in_column = (l * np.sin(theta) <= params.r0) & (theta <= np.pi / 2)
    with np.errstate(divide="ignore"):
        val = a * a * (params.lambda_g / l**2 + params.k_g1 * np.exp(-params.k_g2 * l**2))
    out = np.where(in_cone | in_column, val, 0.0)
    return np.where(l <= 0, UNSAFE, out)


def corner_term(phi, d_c, h_c, l_c, params: DisturbanceParams, a):
    """Corner contribution given the angle ``phi`` from vertical and the corner offsets."""
    phi = np.asarray(phi, dtype=float)
    denom = np.asarray(d_c, dtype=float) ** 2 + np.asarray(h_c, dtype=float) ** 6
    gate = (phi <= params.phi_c) & (np.asarray(l_c) <= params.l_c)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = a * a * (params.phi_c - phi) * params.lambda_c / denom
    out = np.where(gate, val, 0.0)
    return np.where(gate & (denom <= 0), UNSAFE, out)


def wall_term(l, theta, params: DisturbanceParams, a):
    """Wall contribution; ``theta`` is measured from the downward vertical."""
    l = np.asarray(l, dtype=float)
    theta = np.asarray(theta, dtype=float)
    gate = (theta >= params.theta_w_min) & (theta <= np.pi / 2) & (l <= params.l_w)
    return np.where(gate, a * a * params.k_w1 * np.exp(-params.k_w2 * l**2), 0.0)


def _down_angle(quad_pos, pts):
    """Distance and angle between the downward vertical and quad -> point."""
    delta = np.atleast_2d(pts) - quad_pos
    l = np.linalg.norm(delta, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_t = np.where(l > 0, -delta[:, 2] / np.where(l > 0, l, 1.0), 1.0)
    return l, np.arccos(np.clip(cos_t, -1.0, 1.0)), delta


def sigma_ground(quad_pos, voxel_center, params: DisturbanceParams, a: float) -> float:
    l, theta, _ = _down_angle(np.asarray(quad_pos, float), np.asarray(voxel_center, float))
    return float(ground_term(l, theta, params, a)[0])


def corner_geometry(quad_pos, corner_pos):
    delta = np.atleast_2d(corner_pos) - np.asarray(quad_pos, float)
    d_c = np.hypot(delta[:, 0], delta[:, 1])
    h_c = -delta[:, 2]
    l_c = np.linalg.norm(delta, axis=-1)
    phi = np.arctan2(d_c, h_c)
    return phi, d_c, h_c, l_c


def sigma_corner(quad_pos, corner_pos, params: DisturbanceParams, a: float) -> float:
    phi, d_c, h_c, l_c = corner_geometry(quad_pos, corner_pos)
    return float(corner_term(phi, d_c, h_c, l_c, params, a)[0])


def sigma_wall(quad_pos, voxel_center, params: DisturbanceParams, a: float) -> float:
    l, theta, _ = _down_angle(np.asarray(quad_pos, float), np.asarray(voxel_center, float))
    return float(wall_term(l, theta, params, a)[0])


def variance_to_bound(var, k_sigma: float = 3.0):
    """Disturbance magnitude bound ``k_sigma * sqrt(var)``; infinity propagates."""
    if k_sigma <= 0:
        raise ValueError("k_sigma must be positive")
    var = np.asarray(var, dtype=float)
    if np.any(var < 0):
        raise ValueError("variance must be non-negative")
    out = k_sigma * np.sqrt(var)
    return float(out) if out.ndim == 0 else out


# -- geometry cache ---------------------------------------------------------

@dataclass
class _Contrib:
    """Gated, visible voxel contributions seen from one point (params-free part)."""

    kind: np.ndarray      # 0 ground, 1 corner, 2 wall
    l2: np.ndarray        # squared distance (ground / wall)
    corner_coef: np.ndarray  # (phi_c - phi) / (d^2 + h^6) for corners, else 0
    weights: np.ndarray   # (n, 3) squared direction cosines per axis


class _Scene:
    """Spatial indexes over the labelled surfaces of one map."""

    def __init__(self, vmap: VoxelMap, labels: SurfaceLabels):
        self.vmap = vmap
        self.ground = vmap.center_of(labels.ground_voxels) if len(labels.ground_voxels) else np.empty((0, 3))
        self.wall = vmap.center_of(labels.wall_voxels) if len(labels.wall_voxels) else np.empty((0, 3))
        self.corner = labels.corner_positions
        self.corner_vox = vmap.center_of(labels.corner_voxels) if len(labels.corner_voxels) else np.empty((0, 3))
        self._g3 = cKDTree(self.ground) if len(self.ground) else None
        self._g2 = cKDTree(self.ground[:, :2]) if len(self.ground) else None
        self._w3 = cKDTree(self.wall) if len(self.wall) else None
        self._c3 = cKDTree(self.corner) if len(self.corner) else None

    def contributions(self, q, params: DisturbanceParams) -> _Contrib:
        a = self.vmap.resolution
        kinds, l2s, coefs, weights = [], [], [], []
        iso = params.isotropic_fraction

        if self._g3 is not None:
            idx = set(self._g3.query_ball_point(q, params.l_g + 1e-9))
            idx.update(self._g2.query_ball_point(q[:2], params.r0 + 1e-9))
            idx = np.fromiter(idx, dtype=np.int64, count=len(idx))
            if len(idx):
                pts = self.ground[idx]
                l, theta, _ = _down_angle(q, pts)
                keep = ground_term(l, theta, replace(params, lambda_g=1.0, k_g1=0.0), 1.0) != 0
                pts, l = pts[keep], l[keep]
                if len(pts):
                    vis = visible_from(self.vmap, q, pts)
                    l = l[vis]
                    kinds.append(np.zeros(len(l), int))
                    l2s.append(l**2)
                    coefs.append(np.zeros(len(l)))
                    w = np.tile([iso, iso, 1.0 + iso], (len(l), 1))
                    weights.append(w)

        if self._c3 is not None:
            idx = np.asarray(self._c3.query_ball_point(q, params.l_c + 1e-9), dtype=np.int64)
            if len(idx):
                phi, d_c, h_c, l_c = corner_geometry(q, self.corner[idx])
                gate = (phi <= params.phi_c) & (l_c <= params.l_c)
                idx, phi, d_c, h_c = idx[gate], phi[gate], d_c[gate], h_c[gate]
                if len(idx):
                    vis = visible_from(self.vmap, q, self.corner_vox[idx])
                    idx, phi, d_c, h_c = idx[vis], phi[vis], d_c[vis], h_c[vis]
                    denom = d_c**2 + h_c**6
                    with np.errstate(divide="ignore", invalid="ignore"):
                        coef = np.where(denom > 0, (params.phi_c - phi) / np.where(denom > 0, denom, 1.0), np.inf)
                    delta = self.corner[idx] - q
                    kinds.append(np.ones(len(idx), int))
                    l2s.append(np.zeros(len(idx)))
                    coefs.append(coef)
                    weights.append(_horizontal_weights(delta, iso))

        if self._w3 is not None:
            idx = np.asarray(self._w3.query_ball_point(q, params.l_w + 1e-9), dtype=np.int64)
            if len(idx):
                pts = self.wall[idx]
                l, theta, delta = _down_angle(q, pts)
                gate = (theta >= params.theta_w_min) & (theta <= np.pi / 2) & (l <= params.l_w)
                pts, l, delta = pts[gate], l[gate], delta[gate]
                if len(pts):
                    vis = visible_from(self.vmap, q, pts)
                    kinds.append(np.full(int(vis.sum()), 2))
                    l2s.append(l[vis] ** 2)
                    coefs.append(np.zeros(int(vis.sum())))
                    weights.append(_horizontal_weights(delta[vis], iso))

        if not kinds:
            return _Contrib(np.empty(0, int), np.empty(0), np.empty(0), np.empty((0, 3)))
        return _Contrib(np.concatenate(kinds), np.concatenate(l2s), np.concatenate(coefs),
                        np.concatenate(weights))


def _horizontal_weights(delta, iso):
    h = np.hypot(delta[:, 0], delta[:, 1])
    safe = np.where(h > 0, h, 1.0)
    w = np.stack([
        np.where(h > 0, (delta[:, 0] / safe) ** 2, 0.0),
        np.where(h > 0, (delta[:, 1] / safe) ** 2, 0.0),
        np.where(h > 0, 0.0, 1.0),
    ], axis=1)
    return w + iso


def _evaluate(c: _Contrib, params: DisturbanceParams, a: float) -> np.ndarray:
    """Per-axis variance from cached geometry and the (possibly new) constants."""
    if len(c.kind) == 0:
        return np.zeros(3)
    val = np.zeros(len(c.kind))
    g = c.kind == 0
    with np.errstate(divide="ignore"):
        val[g] = params.lambda_g / c.l2[g] + params.k_g1 * np.exp(-params.k_g2 * c.l2[g])
    k = c.kind == 1
    val[k] = params.lambda_c * c.corner_coef[k] if params.lambda_c > 0 else 0.0
    w = c.kind == 2
    val[w] = params.k_w1 * np.exp(-params.k_w2 * c.l2[w])
    return a * a * (val @ c.weights)


# -- field -------------------------------------------------------------------

@dataclass
class QueryGrid:
    resolution: float
    origin: np.ndarray
    dims: tuple[int, int, int]

    def __post_init__(self):
        self.resolution = float(self.resolution)
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)

    @classmethod
    def covering(cls, vmap: VoxelMap, resolution: float) -> "QueryGrid":
        dims = np.maximum(np.floor((vmap.upper - vmap.origin) / resolution + 1e-9).astype(int), 1)
        return cls(resolution, vmap.origin.copy(), tuple(dims))

    def centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + (idx + 0.5) * self.resolution


@dataclass
class DisturbanceField:
    """Per-cell, per-axis acceleration-variance bound (m^2/s^4); ``inf`` marks unsafe cells."""

    grid: QueryGrid
    variance: np.ndarray  # shape dims + (3,)

    def cell_index(self, p):
        p = np.asarray(p, dtype=float)
        return np.floor((p - self.grid.origin) / self.grid.resolution).astype(np.int64)

    def lookup(self, p) -> np.ndarray:
        """Variance of the cell containing each point; points off the grid are unsafe."""
        idx = self.cell_index(p)
        dims = np.asarray(self.grid.dims)
        inside = np.all((idx >= 0) & (idx < dims), axis=-1)
        c = np.clip(idx, 0, dims - 1)
        v = self.variance[c[..., 0], c[..., 1], c[..., 2]]
        return np.where(np.asarray(inside)[..., None], v, UNSAFE)

    def bound(self, p, k_sigma: float = 3.0) -> np.ndarray:
        return variance_to_bound(self.lookup(p), k_sigma)

    def total(self) -> np.ndarray:
        return self.variance.sum(axis=-1)

    def summary(self) -> dict:
        out = {"dims": list(self.grid.dims), "resolution": self.grid.resolution,
               "origin": self.grid.origin.tolist()}
        finite = np.isfinite(self.variance[..., 0])
        out["unsafe_cells"] = int((~finite).sum())
        for k, ax in enumerate("xyz"):
            v = self.variance[..., k][finite]
            if v.size:
                pct = np.percentile(v, [5, 25, 50, 75, 95]).tolist()
                out[ax] = {"min": float(v.min()), "max": float(v.max()),
                           "percentiles": dict(zip(["p5", "p25", "p50", "p75", "p95"], pct))}
            else:
                out[ax] = None
        return out


def constant_field(grid: QueryGrid, variance) -> DisturbanceField:
    v = np.broadcast_to(np.asarray(variance, dtype=float), grid.dims + (3,)).copy()
    return DisturbanceField(grid, v)


def point_variance(vmap: VoxelMap, labels: SurfaceLabels, params: DisturbanceParams, points,
                   scene: _Scene | None = None) -> np.ndarray:
    """Per-axis model variance at arbitrary points, with the unsafe rule applied."""
    scene = scene or _Scene(vmap, labels)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dist = vmap.nearest_obstacle_distances(pts)
    out = np.empty((len(pts), 3))
    for n, q in enumerate(pts):
        if dist[n] < params.r0 or not vmap.contains(q):
            out[n] = UNSAFE
            continue
        out[n] = _evaluate(scene.contributions(q, params), params, vmap.resolution)
    return out


def build_field(vmap: VoxelMap, labels: SurfaceLabels, params: DisturbanceParams,
                query_grid: QueryGrid | None = None) -> DisturbanceField:
    """Sum the visible voxel contributions at every query cell center."""
    grid = query_grid or QueryGrid.covering(vmap, vmap.resolution)
    centers = grid.centers()
    var = point_variance(vmap, labels, params, centers)
    return DisturbanceField(grid, var.reshape(grid.dims + (3,)))


# -- calibration -------------------------------------------------------------

@dataclass
class HoverSample:
    position: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.variance = np.asarray(self.variance, dtype=float).reshape(3)
        if np.any(self.variance < 0):
            raise ValueError("sample variances must be non-negative")


class CalibrationError(RuntimeError):
    def __init__(self, message, best_coverage: float):
        super().__init__(f"{message} (best coverage {best_coverage:.3f})")
        self.best_coverage = best_coverage


def coverage(bound: np.ndarray, observed: np.ndarray) -> float:
    """Smallest per-axis fraction of samples whose bound is at least the observed variance."""
    return float(np.min(np.mean(bound >= observed, axis=0)))


def _grid_values(key, center=None, span=None):
    if center is None:
        if key in ("k_g2", "k_w2"):
            return np.concatenate([[0.0], np.logspace(-2, 2, 17)])
        return np.concatenate([[0.0], np.logspace(-4, 2, 25)])
    if center == 0:
        base = np.logspace(-6, -2, 5)
        return np.concatenate([[0.0], base])
    return np.concatenate([[0.0], center * np.logspace(-span, span, 9)])


def fit_params(samples, vmap: VoxelMap, labels: SurfaceLabels, coverage_target: float = 0.85,
               base: DisturbanceParams | None = None, starts: int = 3, refinements: int = 6,
               seed: int = 0) -> DisturbanceParams:
    """Calibrate the six variance constants so the bound covers ``coverage_target`` of the samples.

    Geometric thresholds come from ``base``.  Multi-start coordinate descent
    over logarithmic grids; each refinement narrows the grid around the
    incumbent.  Among settings meeting the coverage target the mean excess
    ``mean(bound - observed)`` is minimised.
    """
    samples = list(samples)
    if len(samples) < 10:
        raise ValueError("fit_params needs at least 10 samples")
    if not 0 < coverage_target <= 1:
        raise ValueError("coverage_target must lie in (0, 1]")
    base = base or DisturbanceParams()
    a = vmap.resolution
    scene = _Scene(vmap, labels)
    positions = np.array([s.position for s in samples])
    observed = np.array([s.variance for s in samples])
    dist = vmap.nearest_obstacle_distances(positions)
    if np.any(dist < base.r0):
        raise ValueError("hover samples must lie at least r0 away from obstacles")
    cache = [scene.contributions(q, base) for q in positions]

    def score(p: DisturbanceParams):
        bound = np.array([_evaluate(c, p, a) for c in cache])
        cov = coverage(bound, observed)
        excess = float(np.mean(bound - observed))
        return cov, excess

    def better(s1, s2):
        f1, f2 = s1[0] >= coverage_target, s2[0] >= coverage_target
        if f1 != f2:
            return f1
        if f1:
            return s1[1] < s2[1] - 1e-15
        return s1[0] > s2[0]

    rng = np.random.default_rng(seed)
    start_points = [dict(zip(FIT_KEYS, (getattr(base, k) for k in FIT_KEYS)))]
    for _ in range(max(starts - 1, 0)):
        start_points.append({k: float(rng.choice(_grid_values(k)[1:])) for k in FIT_KEYS})

    best_p, best_s = None, None
    for start in start_points:
        cur = replace(base, **start)
        cur_s = score(cur)
        for level in range(refinements + 1):
            span = None if level == 0 else 1.0 / 2 ** (level - 1)
            for _sweep in range(8):
                changed = False
                for key in FIT_KEYS:
                    vals = _grid_values(key, None if span is None else getattr(cur, key), span)
                    for v in vals:
                        cand = replace(cur, **{key: float(v)})
                        s = score(cand)
                        if better(s, cur_s):
                            cur, cur_s, changed = cand, s, True
                if not changed:
                    break
        if best_s is None or better(cur_s, best_s):
            best_p, best_s = cur, cur_s
    if best_s[0] < coverage_target:
        raise CalibrationError("no searched parameter setting reaches the coverage target", best_s[0])
    return best_p


# -- I/O -----------------------------------------------------------------------

def save_field(fld: DisturbanceField, path, summary_path=None) -> None:
    g = fld.grid
    header = "\n".join([
        MAP_MAGIC.replace("voxel map", "field"),
        f"resolution {g.resolution!r}",
        "origin " + " ".join(repr(float(v)) for v in g.origin),
        "dims " + " ".join(str(d) for d in g.dims),
        "channels 3",
        "encoding float64-le",
        "data",
    ]) + "\n"
    payload = np.ascontiguousarray(fld.variance, dtype="<f8").tobytes(order="C")
    Path(path).write_bytes(header.encode("ascii") + payload)
    if summary_path is not None:
        Path(summary_path).write_text(json.dumps(fld.summary(), indent=2))


def load_field(path) -> DisturbanceField:
    raw = Path(path).read_bytes()
    marker = b"\ndata\n"
    cut = raw.find(marker)
    if cut < 0:
        raise MapFormatError("data: missing 'data' line")
    text = raw[:cut + len(marker)].decode("ascii").splitlines()
    text[0] = text[0].replace("field", "voxel map")
    header, _ = _parse_header(text, ("resolution", "origin", "dims", "channels", "encoding"))
    res, origin, dims = _header_geometry(header)
    if header["channels"] != ["3"]:
        raise MapFormatError(f"channels: expected 3, got {header['channels']!r}")
    if header["encoding"] != ["float64-le"]:
        raise MapFormatError(f"encoding: unsupported {header['encoding']!r}")
    payload = raw[cut + len(marker):]
    expected = int(np.prod(dims)) * 3 * 8
    if len(payload) != expected:
        raise MapFormatError(f"dims: payload holds {len(payload)} bytes, dims imply {expected}")
    var = np.frombuffer(payload, dtype="<f8").reshape(tuple(dims) + (3,)).astype(float)
    return DisturbanceField(QueryGrid(res, origin, dims), var)


SAMPLE_COLUMNS = ("x", "y", "z", "var_x", "var_y", "var_z")


def load_samples(path) -> list[HoverSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SAMPLE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"sample CSV missing column(s): {sorted(missing)}")
        return [HoverSample([float(r["x"]), float(r["y"]), float(r["z"])],
                            [float(r["var_x"]), float(r["var_y"]), float(r["var_z"])]) for r in reader]


def save_samples(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_COLUMNS)
        for s in samples:
            w.writerow([repr(float(v)) for v in (*s.position, *s.variance)])
