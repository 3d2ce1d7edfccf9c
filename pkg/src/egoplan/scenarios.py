"""Deterministic synthetic indoor scenes."""
from __future__ import annotations

import numpy as np

from .voxel_map import VoxelMap


def _grid(lo, hi, resolution):
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    dims = np.maximum(np.round((hi - lo) / resolution).astype(int), 1)
    vmap = VoxelMap.empty(dims, resolution, lo)
    return vmap


def _centers(vmap: VoxelMap):
    axes = [vmap.origin[k] + (np.arange(vmap.dims[k]) + 0.5) * vmap.resolution for k in range(3)]
    return np.meshgrid(*axes, indexing="ij")


def _fill_box(vmap: VoxelMap, lo, hi):
    """Occupy every voxel whose center lies inside the axis-aligned box."""
    x, y, z = _centers(vmap)
    m = ((x > lo[0]) & (x < hi[0]) & (y > lo[1]) & (y < hi[1]) & (z > lo[2]) & (z < hi[2]))
    vmap.occupancy |= m


def parallel_walls(d: float, length: float = 4.0, height: float = 2.5,
                   resolution: float = 0.1, thickness: float | None = None) -> VoxelMap:
    """Floor at z = 0 and two walls whose inner faces sit at y = -d/2 and y = +d/2."""
    if d <= 0:
        raise ValueError("wall interval d must be positive")
    t = resolution if thickness is None else thickness
    half = d / 2.0
    vmap = _grid((-length / 2, -half - t, -resolution), (length / 2, half + t, height), resolution)
    inf = 1e9
    _fill_box(vmap, (-inf, -inf, -inf), (inf, inf, 0.0))
    _fill_box(vmap, (-inf, -inf, -inf), (inf, -half, inf))
    _fill_box(vmap, (-inf, half, -inf), (inf, inf, inf))
    return vmap


def narrow_gap(gap: float = 1.0, length: float = 6.0, width: float = 3.0, height: float = 2.5,
               resolution: float = 0.05, wall_thickness: float = 0.2,
               gap_offset: float = 0.0) -> VoxelMap:
    """Corridor (walls at y = +-width/2) crossed at x = 0 by a wall with a doorway.

    The doorway is ``gap`` wide, spans the full height and is centered at
    ``y = gap_offset``.
    """
    if gap <= 0 or gap >= width:
        raise ValueError("gap must lie in (0, width)")
    r = resolution
    vmap = _grid((-length / 2, -width / 2 - r, -r), (length / 2, width / 2 + r, height), r)
    inf = 1e9
    _fill_box(vmap, (-inf, -inf, -inf), (inf, inf, 0.0))
    _fill_box(vmap, (-inf, -inf, -inf), (inf, -width / 2, inf))
    _fill_box(vmap, (-inf, width / 2, -inf), (inf, inf, inf))
    t = wall_thickness / 2
    _fill_box(vmap, (-t, -inf, -inf), (t, gap_offset - gap / 2, inf))
    _fill_box(vmap, (-t, gap_offset + gap / 2, -inf), (t, inf, inf))
    return vmap


def cluttered_room(seed: int = 0, size=(6.0, 4.0, 2.5), n_obstacles: int = 6,
                   resolution: float = 0.05, keep_clear=((-2.4, 0.0), (2.4, 0.0)),
                   clear_radius: float = 0.7) -> VoxelMap:
    """Walled room with random pillars and low boxes drawn from ``seed``.

    Obstacles never intrude within ``clear_radius`` (horizontally) of the
    ``keep_clear`` points so start/goal locations stay usable.
    """
    rng = np.random.default_rng(seed)
    sx, sy, sz = size
    r = resolution
    vmap = _grid((-sx / 2 - r, -sy / 2 - r, -r), (sx / 2 + r, sy / 2 + r, sz), r)
    inf = 1e9
    _fill_box(vmap, (-inf, -inf, -inf), (inf, inf, 0.0))
    _fill_box(vmap, (-inf, -inf, -inf), (-sx / 2, inf, inf))
    _fill_box(vmap, (sx / 2, -inf, -inf), (inf, inf, inf))
    _fill_box(vmap, (-inf, -inf, -inf), (inf, -sy / 2, inf))
    _fill_box(vmap, (-inf, sy / 2, -inf), (inf, inf, inf))
    placed = 0
    attempts = 0
    while placed < n_obstacles and attempts < 200 * max(n_obstacles, 1):
        attempts += 1
        w = rng.uniform(0.3, 0.7, size=2)
        c = rng.uniform([-sx / 2 + 0.5, -sy / 2 + 0.5], [sx / 2 - 0.5, sy / 2 - 0.5])
        h = sz if rng.random() < 0.6 else rng.uniform(0.4, 1.0)
        lo = c - w / 2
        hi = c + w / 2
        clear = True
        for p in keep_clear:
            nearest = np.clip(p, lo, hi)
            if np.linalg.norm(nearest - np.asarray(p)) < clear_radius:
                clear = False
        if not clear:
            continue
        _fill_box(vmap, (lo[0], lo[1], -inf), (hi[0], hi[1], h))
        placed += 1
    return vmap


def make_scenario(kind: str, **params) -> VoxelMap:
    builders = {"walls": parallel_walls, "narrow": narrow_gap, "room": cluttered_room}
    if kind not in builders:
        raise ValueError(f"unknown scenario kind {kind!r}; expected one of {sorted(builders)}")
    return builders[kind](**params)
