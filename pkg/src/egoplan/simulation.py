"""Monte-Carlo closed-loop tracking under bounded disturbances.

The plant is the same linear error model the reachability analysis uses:
the vehicle state obeys ``x' = A x + B (a_k + K (x - r_k)) + D w`` with the
command ``(r_k, a_k)`` and the disturbance ``w`` held over each command
period.  Every step is advanced with the exact matrix exponential.

Per-trial generators come from ``numpy.random.SeedSequence(seed).spawn``:
trial ``i`` always uses child ``i``, so results do not depend on how trials
are batched.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .disturbance import DisturbanceField, variance_to_bound
from .reachability import POS, ErrorSystem, FRSTube, UnsafeCommandError, default_initial_shape, \
    mahalanobis, nominal_response
from .voxel_map import VoxelMap

log = logging.getLogger(__name__)

LAWS = ("uniform", "gaussian", "telegraph")


@dataclass
class SimConfig:
    """Simulation settings.

    ``law`` picks how each channel's disturbance is drawn inside its bound:
    ``uniform`` resamples ``U[-w, w]`` every step, ``gaussian`` draws
    ``N(0, (w/3)^2)`` clipped to the bound, and ``telegraph`` holds ``+-w``
    and flips sign with probability ``switch_prob`` per step (the persistent
    worst case for a low-pass tracking loop).
    """

    rate: float = 50.0
    substeps: int = 10
    law: str = "uniform"
    trials: int = 100
    seed: int = 0
    switch_prob: float = 0.02
    initial: str = "sampled"  # "sampled" (inside the initial tube set) or "zero"

    def __post_init__(self):
        if self.rate <= 0 or self.substeps < 1:
            raise ValueError("rate and substeps must be positive")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.law not in LAWS:
            raise ValueError(f"law must be one of {LAWS}")
        if not 0 <= self.switch_prob <= 1:
            raise ValueError("switch_prob must lie in [0, 1]")
        if self.initial not in ("sampled", "zero"):
            raise ValueError("initial must be 'sampled' or 'zero'")

    @property
    def dt(self) -> float:
        return 1.0 / self.rate


@dataclass
class ErrorTrace:
    """One trial at the command instants.

    ``disturbance[k]`` is the value held over ``[t_k, t_{k+1})``; the last
    row is zero.  ``error = state - nominal`` where ``nominal`` is the
    disturbance-free closed-loop response (the tube center).
    """

    times: np.ndarray
    commanded: np.ndarray
    state: np.ndarray
    error: np.ndarray
    disturbance: np.ndarray
    bounds: np.ndarray


def sample_disturbances(bounds: np.ndarray, law: str, rng: np.random.Generator,
                        switch_prob: float = 0.02) -> np.ndarray:
    """Draw one trial's held disturbances, shape like ``bounds`` (n, 3)."""
    n, m = bounds.shape
    if law == "uniform":
        w = rng.uniform(-1.0, 1.0, size=(n, m)) * bounds
    elif law == "gaussian":
        w = np.clip(rng.normal(0.0, 1.0 / 3.0, size=(n, m)), -1.0, 1.0) * bounds
    elif law == "telegraph":
        flips = rng.random((n, m)) < switch_prob
        flips[0] = False
        sign = np.where(rng.random(m) < 0.5, -1.0, 1.0)
        w = sign * np.where(np.cumsum(flips, axis=0) % 2 == 1, -1.0, 1.0) * bounds
    else:
        raise ValueError(f"unknown disturbance law {law!r}")
    assert np.all(np.abs(w) <= bounds), "sampled disturbance exceeds its bound"
    return w


def _sample_in_ellipsoid(shape: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(shape)
    u = rng.normal(size=n)
    u *= rng.random() ** (1.0 / n) / np.linalg.norm(u)
    w, v = np.linalg.eigh(shape)
    return v @ (np.sqrt(np.clip(w, 0, None)) * u)


def command_bounds(commands, fld: DisturbanceField, k_sigma: float = 3.0) -> np.ndarray:
    var = fld.lookup(np.asarray(commands)[:, :3])
    bad = np.flatnonzero(~np.all(np.isfinite(var), axis=1))
    if bad.size:
        raise UnsafeCommandError(int(bad[0]), np.asarray(commands)[bad[0], :3])
    return variance_to_bound(var, k_sigma)


def simulate(commands, fld: DisturbanceField | None, sys: ErrorSystem, cfg: SimConfig | None = None,
             bounds: np.ndarray | None = None, Q0=None, k_sigma: float = 3.0) -> list[ErrorTrace]:
    """Run ``cfg.trials`` closed-loop trials along a command sequence (rows ``p, v, a``)."""
    cfg = cfg or SimConfig()
    commands = np.asarray(commands, dtype=float)
    n = len(commands)
    if bounds is None:
        bounds = command_bounds(commands, fld, k_sigma)
    bounds = np.asarray(bounds, dtype=float).reshape(n, sys.n_w)
    dt = cfg.dt
    F = sys.transition(dt)
    GD = sys.input_gain(dt) @ sys.D
    nominal = nominal_response(sys, commands, dt)
    Q0 = default_initial_shape() if Q0 is None else np.asarray(Q0, dtype=float)
    times = np.arange(n) * dt
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.trials)
    E0 = np.zeros((cfg.trials, 6))
    W = np.zeros((cfg.trials, n, sys.n_w))
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        if cfg.initial == "sampled":
            E0[i] = _sample_in_ellipsoid(Q0, rng)
        W[i, :-1] = sample_disturbances(bounds[:-1], cfg.law, rng, cfg.switch_prob)
    E = np.empty((cfg.trials, n, 6))
    E[:, 0] = E0
    drive = W @ GD.T
    for k in range(n - 1):
        E[:, k + 1] = E[:, k] @ F.T + drive[:, k]
    traces = [ErrorTrace(times, commands, nominal + E[i], E[i], W[i], bounds) for i in range(cfg.trials)]
    return traces


# -- checks ----------------------------------------------------------------------

@dataclass
class ContainmentReport:
    trials: int = 0
    steps: int = 0
    violations: list = field(default_factory=list)  # (trial, step) pairs
    max_mahalanobis: float = 0.0
    axis_ratio: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    @property
    def n_violations(self) -> int:
        return len(self.violations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["violations"] = [list(map(int, v)) for v in self.violations]
        d["n_violations"] = self.n_violations
        return d


def check_containment(traces: list[ErrorTrace], tube: FRSTube, tol: float = 1e-10,
                      slack: float = 1e-9) -> ContainmentReport:
    """Check ``e^T Q^+ e <= 1`` at every step and the per-axis position extents.

    ``slack`` absorbs floating-point round-off on boundary points.
    """
    if not traces:
        return ContainmentReport()
    n = len(tube)
    for tr in traces:
        if len(tr.times) != n or not np.allclose(tr.times, tube.times, rtol=0, atol=1e-9):
            raise ValueError("trace and tube time grids differ")
    E = np.stack([tr.error for tr in traces])  # (trials, n, 6)
    m = np.empty(E.shape[:2])
    for k in range(n):
        m[:, k] = mahalanobis(tube.shapes[k], E[:, k], tol)
    extents = tube.position_extents()
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(extents > 0, np.abs(E[:, :, POS]) / extents, np.where(E[:, :, POS] == 0, 0.0, np.inf))
    bad = np.argwhere(m > 1.0 + slack)
    return ContainmentReport(len(traces), n, [tuple(b) for b in bad.tolist()], float(m.max()),
                             ratio.max(axis=(0, 1)).tolist())


def fine_positions(traces: list[ErrorTrace], sys: ErrorSystem, substeps: int) -> np.ndarray:
    """Positions at ``substeps`` points per command period, reconstructed exactly.

    Returns shape ``(trials, (n - 1) * substeps + 1, 3)``; all traces must
    share one command sequence.
    """
    tr0 = traces[0]
    n = len(tr0.times)
    dt = tr0.times[1] - tr0.times[0] if n > 1 else 1.0
    h = dt / substeps
    Fh = sys.transition(h)
    Gh = sys.input_gain(h)
    ref = tr0.commanded[:, :6]
    base = tr0.commanded[:, 6:9] @ sys.B.T - ref @ (sys.B @ sys.K).T
    W = np.stack([tr.disturbance for tr in traces])
    forcing = (base[None] + W @ sys.D.T) @ Gh.T  # (trials, n, 6)
    x = np.stack([tr.state[0] for tr in traces])
    out = np.empty((len(traces), (n - 1) * substeps + 1, 3))
    out[:, 0] = x[:, :3]
    for k in range(n - 1):
        for j in range(substeps):
            x = x @ Fh.T + forcing[:, k]
            out[:, k * substeps + j + 1] = x[:, :3]
    return out


def collisions(traces: list[ErrorTrace], vmap: VoxelMap, sys: ErrorSystem, radius: float,
               substeps: int = 10) -> np.ndarray:
    """Per-trial flag: the body sphere came within ``radius`` of an obstacle voxel center."""
    if not traces:
        return np.zeros(0, dtype=bool)
    P = fine_positions(traces, sys, substeps)
    flat = P.reshape(-1, 3)
    d = vmap.nearest_obstacle_distances(flat).reshape(P.shape[:2])
    inside = np.asarray(vmap.contains(flat)).reshape(P.shape[:2])
    return np.any((d < radius) | ~inside, axis=1)


def min_clearance(traces: list[ErrorTrace], vmap: VoxelMap, sys: ErrorSystem, substeps: int = 10) -> np.ndarray:
    """Per-trial minimum distance from the vehicle center to an obstacle voxel center."""
    P = fine_positions(traces, sys, substeps)
    return vmap.nearest_obstacle_distances(P.reshape(-1, 3)).reshape(P.shape[:2]).min(axis=1)


TRACE_COLUMNS = ("trial", "t",
                 "px_cmd", "py_cmd", "pz_cmd", "vx_cmd", "vy_cmd", "vz_cmd", "ax_cmd", "ay_cmd", "az_cmd",
                 "px", "py", "pz", "vx", "vy", "vz", "ex", "ey", "ez", "evx", "evy", "evz",
                 "wx", "wy", "wz", "wx_bound", "wy_bound", "wz_bound")


def save_traces_csv(traces: list[ErrorTrace], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for i, tr in enumerate(traces):
            block = np.hstack([tr.times[:, None], tr.commanded[:, :9], tr.state, tr.error, tr.disturbance,
                               tr.bounds])
            for row in block:
                w.writerow([i] + [repr(float(v)) for v in row])


def load_traces_csv(path) -> list[ErrorTrace]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRACE_COLUMNS:
            raise ValueError(f"trace CSV columns differ from {TRACE_COLUMNS}")
        rows = [(int(r[0]), [float(v) for v in r[1:]]) for r in reader]
    out = []
    for i in sorted({t for t, _ in rows}):
        a = np.array([v for t, v in rows if t == i])
        out.append(ErrorTrace(a[:, 0], a[:, 1:10], a[:, 10:16], a[:, 16:22], a[:, 22:25], a[:, 25:28]))
    return out


# -- benchmark -------------------------------------------------------------------

@dataclass
class Scenario:
    name: str
    vmap: VoxelMap
    field: DisturbanceField
    start: np.ndarray
    goal: np.ndarray


@dataclass
class MethodRow:
    method: str
    length: float = 0.0
    time: float = 0.0
    jerk2: float = 0.0
    failures: int = 0
    planned: int = 0


COMPARE_COLUMNS = ("method", "scenario", "status", "length", "time", "jerk2", "collision_cost", "collisions")


def compare_margins(suite: list[Scenario], methods: dict[str, float | None], sys: ErrorSystem,
                    planner_cfg=None, sim_cfg: SimConfig | None = None, Q0=None):
    """Plan every scenario with every method, then simulate and count collisions.

    ``methods`` maps a label to a fixed margin in metres or ``None`` for the
    adaptive tube.  Returns ``(totals, rows)``: per-method totals and one
    record per (method, scenario).  Failures (no path, unsafe residual,
    simulated collision) are counted, not raised.
    """
    from .kinodynamic import NoPathError, UnsafeEndpointError
    from .planner import HoverTable, PlannerConfig, plan

    planner_cfg = planner_cfg or PlannerConfig()
    sim_cfg = sim_cfg or SimConfig(trials=100)
    totals = {name: MethodRow(name) for name in methods}
    rows = []
    for sc in suite:
        hover = HoverTable(sc.field, sys, planner_cfg.eps, planner_cfg.command_dt, planner_cfg.k_sigma)
        for name, margin in methods.items():
            row = {"method": name, "scenario": sc.name}
            t0 = time.perf_counter()
            try:
                res = plan(sc.vmap, sc.field, sys, sc.start, sc.goal, planner_cfg, margin, hover, Q0)
            except (NoPathError, UnsafeEndpointError, UnsafeCommandError) as exc:
                row.update(status=f"planner: {exc}", length=np.nan, time=np.nan, jerk2=np.nan,
                           collision_cost=np.nan, collisions=0)
                totals[name].failures += 1
                rows.append(row)
                continue
            met = res.metrics()
            cmds = res.spline.commands(planner_cfg.command_dt)
            try:
                traces = simulate(cmds, sc.field, sys, sim_cfg, Q0=Q0, k_sigma=planner_cfg.k_sigma)
                hits = int(collisions(traces, sc.vmap, sys, planner_cfg.vehicle_radius, sim_cfg.substeps).sum())
            except UnsafeCommandError:
                # The commands cross an unsafe cell: bound the disturbance by the worst finite cell.
                finite = sc.field.variance[np.isfinite(sc.field.variance)]
                cap = variance_to_bound(finite.max(), planner_cfg.k_sigma)
                b = np.nan_to_num(variance_to_bound(sc.field.lookup(cmds[:, :3]), planner_cfg.k_sigma),
                                  posinf=cap)
                traces = simulate(cmds, None, sys, sim_cfg, bounds=np.minimum(b, cap), Q0=Q0)
                hits = int(collisions(traces, sc.vmap, sys, planner_cfg.vehicle_radius, sim_cfg.substeps).sum())
            status = "ok"
            if not res.safe:
                status = "unsafe residual"
            if hits:
                status = "collision"
            row.update(status=status, length=met["length"], time=met["time"], jerk2=met["jerk2"],
                       collision_cost=met["collision_cost"], collisions=hits)
            tot = totals[name]
            tot.length += met["length"]
            tot.time += met["time"]
            tot.jerk2 += met["jerk2"]
            tot.planned += 1
            tot.failures += int(status != "ok")
            rows.append(row)
            log.info("compare %s/%s: %s in %.1fs", sc.name, name, status, time.perf_counter() - t0)
    return totals, rows


def save_comparison(totals: dict, rows: list, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else repr(float(r[c])) if c != "collisions"
                        else int(r[c]) for c in COMPARE_COLUMNS])
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"totals": {k: asdict(v) for k, v in totals.items()}}, fh, indent=2, sort_keys=True)


def load_comparison_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COMPARE_COLUMNS:
            raise ValueError(f"comparison CSV columns differ from {COMPARE_COLUMNS}")
        rows = []
        for r in reader:
            rows.append({c: r[c] if c in ("method", "scenario", "status") else
                         int(r[c]) if c == "collisions" else float(r[c]) for c in COMPARE_COLUMNS})
    return rows


def format_table(totals: dict) -> str:
    head = f"{'method':<14}{'length [m]':>12}{'time [s]':>10}{'jerk^2':>12}{'failures':>10}"
    lines = [head, "-" * len(head)]
    for t in totals.values():
        lines.append(f"{t.method:<14}{t.length:>12.2f}{t.time:>10.2f}{t.jerk2:>12.1f}{t.failures:>10d}")
    return "\n".join(lines)

