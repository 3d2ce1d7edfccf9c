"""Named benchmark suites for margin comparisons.

Each entry fixes a scene, its start/goal and a variance scale applied to the
shipped-default field (``> 1`` makes a high-disturbance variant of the same
geometry).  Building a field takes tens of seconds, so ``cache_dir`` keeps
the map and field files between runs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .disturbance import DisturbanceParams, QueryGrid, build_field, load_field, save_field
from .scenarios import make_scenario
from .simulation import Scenario
from .voxel_map import classify_surfaces, load_map, save_map

log = logging.getLogger(__name__)

FIELD_RESOLUTION = 0.1


@dataclass(frozen=True)
class SceneSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    start: tuple = (-2.4, 0.0, 1.0)
    goal: tuple = (2.4, 0.0, 1.0)
    variance_scale: float = 1.0


_NARROW = dict(resolution=0.1)
_ROOM = dict(resolution=0.1, n_obstacles=4)

SUITES: dict[str, list[SceneSpec]] = {
    "narrow": [
        SceneSpec("narrow-1.4", "narrow", {**_NARROW, "gap": 1.4}, (-2.4, -0.8, 1.0), (2.4, 0.8, 1.0)),
        SceneSpec("narrow-door", "narrow", {**_NARROW, "gap": 1.6, "gap_offset": 0.5},
                  (-2.4, -0.5, 1.0), (2.4, -0.5, 1.0)),
    ],
    "narrow-high": [
        SceneSpec("narrow-door-high", "narrow", {**_NARROW, "gap": 1.6, "gap_offset": 0.5},
                  (-2.4, -0.5, 1.0), (2.4, -0.5, 1.0), variance_scale=16.0),
    ],
    "room": [SceneSpec(f"room-{s}", "room", {**_ROOM, "seed": s}) for s in (2, 3, 6, 7)],
}
SUITES["all"] = SUITES["narrow"] + SUITES["narrow-high"] + SUITES["room"]


def build_scene(spec: SceneSpec, cache_dir=None, params: DisturbanceParams | None = None) -> Scenario:
    """Map plus field for one suite entry, read from ``cache_dir`` when present.

    The cache holds default-parameter fields only; custom ``params`` bypass it.
    """
    if params is not None:
        cache_dir = None
    params = params or DisturbanceParams()
    base = spec.name.removesuffix("-high")
    vmap = fld = None
    if cache_dir is not None:
        cache = Path(cache_dir)
        cache.mkdir(parents=True, exist_ok=True)
        map_path, field_path = cache / f"{base}.map", cache / f"{base}.field"
        if map_path.exists() and field_path.exists():
            vmap, fld = load_map(map_path), load_field(field_path)
    if vmap is None:
        vmap = make_scenario(spec.kind, **spec.params)
        fld = build_field(vmap, classify_surfaces(vmap), params, QueryGrid.covering(vmap, FIELD_RESOLUTION))
        if cache_dir is not None:
            save_map(vmap, map_path)
            save_field(fld, field_path)
    if spec.variance_scale != 1.0:
        fld.variance = fld.variance * spec.variance_scale
    return Scenario(spec.name, vmap, fld, np.asarray(spec.start, float), np.asarray(spec.goal, float))


def load_suite(name: str, cache_dir=None, params: DisturbanceParams | None = None) -> list[Scenario]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {sorted(SUITES)}")
    return [build_scene(s, cache_dir, params) for s in SUITES[name]]
