"""End-to-end planning: hover-safe search, B-spline fit, tube-aware refinement."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .bspline import UniformBSpline, integrated_squared_jerk, path_length
from .disturbance import DisturbanceField, variance_to_bound
from .kinodynamic import HoverSafety, SearchConfig, search
from .reachability import ErrorSystem, FRSTube, hover_radii
from .trajectory_opt import CostWeights, OptimizerConfig, optimize, parameterize, time_scale_for_limits
from .voxel_map import VoxelMap

log = logging.getLogger(__name__)


class HoverTable:
    """Hover tube radius for every field cell, looked up by position.

    Bounds are rounded up onto a geometric grid of ratio ``1 + quantum``
    before solving; the hover radius grows with every bound, so the table
    stays conservative while only distinct rounded rows are solved.
    """

    def __init__(self, fld: DisturbanceField, sys: ErrorSystem, eps: float = 1e-4, dt: float = 0.02,
                 k_sigma: float = 3.0, quantum: float = 0.01):
        self.field = fld
        bounds = variance_to_bound(fld.variance.reshape(-1, 3), k_sigma)
        if quantum > 0:
            step = np.log1p(quantum)
            with np.errstate(divide="ignore", invalid="ignore"):
                q = np.exp(np.ceil(np.log(bounds) / step) * step)
            bounds = np.where(bounds > 0, np.maximum(q, bounds), 0.0)
        uniq, inverse = np.unique(bounds, axis=0, return_inverse=True)
        self.radii = hover_radii(uniq, sys, eps, dt)[inverse.ravel()].reshape(fld.grid.dims)

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        idx = self.field.cell_index(pts)
        dims = np.asarray(self.field.grid.dims)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        c = np.clip(idx, 0, dims - 1)
        return np.where(inside, self.radii[c[:, 0], c[:, 1], c[:, 2]], np.inf)


@dataclass
class PlannerConfig:
    vehicle_radius: float = 0.15
    eps: float = 1e-4
    command_dt: float = 0.02
    k_sigma: float = 3.0
    retime: bool = True
    search: SearchConfig = field(default_factory=SearchConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: CostWeights = field(default_factory=CostWeights)

    def synced_optimizer(self) -> OptimizerConfig:
        """Optimizer settings with the shared vehicle/tube values filled in."""
        o = self.optimizer
        return OptimizerConfig(**{**o.__dict__, "inflation": self.vehicle_radius, "eps": self.eps,
                                  "command_dt": self.command_dt, "k_sigma": self.k_sigma,
                                  "v_max": self.search.v_max, "a_max": self.search.a_max})


@dataclass
class PlanResult:
    path: list
    spline: UniformBSpline
    tube: FRSTube
    collision_cost: float
    unsafe_samples: np.ndarray
    stalled: bool
    timings: dict

    @property
    def safe(self) -> bool:
        return self.unsafe_samples.size == 0 and self.collision_cost == 0.0

    def metrics(self) -> dict:
        return {"length": path_length(self.spline), "time": self.spline.duration,
                "jerk2": integrated_squared_jerk(self.spline), "collision_cost": self.collision_cost,
                "unsafe_samples": int(self.unsafe_samples.size), "stalled": self.stalled}


def plan(vmap: VoxelMap, fld: DisturbanceField, sys: ErrorSystem, start, goal,
         cfg: PlannerConfig | None = None, margin: float | None = None,
         hover: HoverTable | None = None, Q0=None) -> PlanResult:
    """Plan from rest at ``start`` to rest at ``goal``.

    ``margin=None`` uses the adaptive tube radius; a number swaps in that
    constant clearance for both the hover check and the collision cost.
    ``Q0`` is the initial error shape (default: the reachability default).
    Raises :class:`~egoplan.kinodynamic.NoPathError` when search fails.
    """
    cfg = cfg or PlannerConfig()
    timings = {}
    t0 = time.perf_counter()
    if margin is None:
        hover = hover or HoverTable(fld, sys, cfg.eps, cfg.command_dt, cfg.k_sigma)
        required = hover
    else:
        required = lambda pts: np.full(len(np.atleast_2d(pts)), float(margin))  # noqa: E731
    safety = HoverSafety(vmap, required, cfg.vehicle_radius)
    timings["hover"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    zero = np.zeros(3)
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    path = search(vmap, safety, (start, zero), (goal, zero), cfg.search)
    timings["search"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ocfg = cfg.synced_optimizer()
    # Search primitives cruise at the limits; a smooth profile along the same
    # geometry needs more time, otherwise the limit penalty fights smoothing.
    stretch = time_scale_for_limits(path, ocfg.v_max, ocfg.a_max) if cfg.retime else 1.0
    spline = parameterize(path, ocfg.degree, ocfg.knot_interval, time_scale=stretch)
    res = optimize(spline, fld, vmap, sys, cfg.weights, ocfg, margin=margin, Q0=Q0)
    timings["optimize"] = time.perf_counter() - t0
    log.info("plan: %d primitives, %d iterations, f_c=%.3g", len(path) - 1, res.iterations, res.collision)
    return PlanResult(path, res.spline, res.tube, res.collision, res.unsafe_samples, res.stalled, timings)
