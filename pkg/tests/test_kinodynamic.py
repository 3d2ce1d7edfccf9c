import numpy as np
import pytest
from scipy.linalg import expm

from egoplan.kinodynamic import (HoverSafety, NoPathError, SearchConfig, SearchState, UnsafeEndpointError,
                                 expand, heuristic, load_path_csv, path_cost, save_path_csv, search)
from egoplan.voxel_map import VoxelMap

from oracles import enumerate_optimum, sweep_min

RHO = 10.0


def test_expand_coasting():
    s = SearchState(np.array([1.0, 2, 3]), np.array([0.5, 0, -1]))
    c = expand(s, np.zeros(3), 0.4, RHO)
    assert np.allclose(c.position, s.position + s.velocity * 0.4)
    assert np.array_equal(c.velocity, s.velocity)
    assert c.g == pytest.approx(RHO * 0.4)


def test_expand_arithmetic():
    c = expand(SearchState(np.zeros(3), np.zeros(3)), [1.0, 0, 0], 1.0, RHO)
    assert np.array_equal(c.position, [0.5, 0, 0])
    assert np.array_equal(c.velocity, [1.0, 0, 0])
    assert c.g == 1 + RHO


def test_expand_matches_state_transition(rng):
    A = np.zeros((9, 9))
    A[0:3, 3:6] = np.eye(3)
    A[3:6, 6:9] = np.eye(3)
    for _ in range(100):
        p, v, u = rng.normal(size=(3, 3))
        tau = rng.uniform(0.01, 2.0)
        x = expm(A * tau) @ np.concatenate([p, v, u])
        c = expand(SearchState(p, v), u, tau)
        assert np.allclose(c.position, x[:3], atol=1e-10, rtol=0)
        assert np.allclose(c.velocity, x[3:6], atol=1e-10, rtol=0)


def test_heuristic_coincident_is_zero():
    p, v = np.array([1.0, 2, 3]), np.array([0.3, 0, 0])
    assert heuristic(p, v, p, v) == 0.0


def test_heuristic_rest_to_rest_sweep():
    for d in (0.5, 2.0, 7.0):
        gp = np.array([d, 0, 0])
        h = heuristic(np.zeros(3), np.zeros(3), gp, np.zeros(3))
        ref = sweep_min(np.zeros(3), np.zeros(3), gp, np.zeros(3), RHO)
        assert h <= ref * (1 + 1e-12)
        assert h == pytest.approx(ref, rel=1e-6)


def test_heuristic_admissible_small():
    cfg = SearchConfig()
    rng = np.random.default_rng(5)
    for _ in range(10):
        p0, v0 = rng.uniform(-1, 1, 3), rng.uniform(-0.5, 0.5, 3)
        s = SearchState(p0, v0)
        for _ in range(rng.integers(1, 5)):
            s = expand(s, cfg.inputs()[rng.integers(len(cfg.inputs()))], rng.choice(cfg.durations))
        best = enumerate_optimum(p0, v0, s.position, s.velocity, cfg)
        assert np.isfinite(best)
        assert best <= s.g + 1e-9
        assert heuristic(p0, v0, s.position, s.velocity, cfg.rho) <= best + 1e-9


@pytest.fixture(scope="module")
def free_space():
    vm = VoxelMap.empty((40, 30, 30), 0.1, (-1.0, -1.5, -0.5))
    return vm, HoverSafety(vm, lambda p: np.zeros(len(p)))


def check_path(path, safety, rho):
    for (parent, _, _), (child, u, tau) in zip(path[:-1], path[1:]):
        again = expand(parent, u, tau, rho)
        assert np.array_equal(again.position, child.position)
        assert np.array_equal(again.velocity, child.velocity)
    pts = np.array([s.position for s, _, _ in path])
    assert safety.safe(pts).all()


def test_free_space_cost_near_heuristic(free_space):
    vm, saf = free_space
    start, goal = np.array([0.0, 0, 1]), np.array([2.0, 0, 1])
    cfg = SearchConfig()
    path = search(vm, saf, (start, np.zeros(3)), (goal, np.zeros(3)), cfg)
    cost = path_cost(path, cfg.rho)
    h = heuristic(start, np.zeros(3), goal, np.zeros(3), cfg.rho)
    assert h <= cost <= 1.05 * h
    check_path(path, saf, cfg.rho)
    end = path[-1][0]
    assert np.linalg.norm(end.position - goal) <= cfg.goal_tol_pos
    assert np.linalg.norm(end.velocity) <= cfg.goal_tol_vel
    assert np.all(np.abs(np.array([s.velocity for s, _, _ in path])) <= cfg.v_max + 1e-9)


def test_unsafe_goal_rejected(free_space):
    vm, _ = free_space
    saf = HoverSafety(vm, lambda p: np.where(p[:, 0] > 1.5, 1e3, 0.0))
    with pytest.raises(UnsafeEndpointError):
        search(vm, saf, (np.array([0.0, 0, 1]), np.zeros(3)), (np.array([2.0, 0, 1]), np.zeros(3)))


def gap_map():
    vm = VoxelMap.empty((30, 20, 20), 0.1, (-1.5, -1.0, 0.0))
    vm.occupancy[14:16] = True
    vm.occupancy[14:16, 7:13, 7:13] = False  # 0.6 m square doorway around (y, z) = (0, 1)
    return vm


@pytest.mark.parametrize("radius, passes", [(0.25, True), (0.45, False)])
def test_gap_passable_only_if_wide_enough(radius, passes):
    # Gap center sits 0.35 m from the nearest wall voxel center.
    vm = gap_map()
    saf = HoverSafety(vm, lambda p: np.full(len(p), radius))
    cfg = SearchConfig(max_expansions=1000)
    ends = ((np.array([-1.0, 0, 1]), np.zeros(3)), (np.array([1.0, 0, 1]), np.zeros(3)))
    if passes:
        path = search(vm, saf, *ends, cfg)
        check_path(path, saf, cfg.rho)
        dense = np.array([expand(p, u, t * s).position for (p, _, _), (_, u, t) in zip(path[:-1], path[1:])
                          for s in np.linspace(0, 1, 11)])
        assert np.all(saf.clearance(dense) >= radius - 1e-9)
    else:
        with pytest.raises(NoPathError):
            search(vm, saf, *ends, cfg)


def test_inputs_must_be_symmetric():
    with pytest.raises(ValueError):
        SearchConfig(levels=(0.0, 1.0)).inputs()
    assert len(SearchConfig().inputs()) == 125


def test_path_csv_roundtrip(tmp_path, free_space):
    vm, saf = free_space
    path = search(vm, saf, (np.array([0.0, 0, 1]), np.zeros(3)), (np.array([1.0, 0.5, 1]), np.zeros(3)))
    save_path_csv(path, tmp_path / "p.csv")
    cols = load_path_csv(tmp_path / "p.csv")
    assert np.array_equal(cols["px"], [s.position[0] for s, _, _ in path])
    assert np.array_equal(cols["uy"][:-1], [u[1] for _, u, _ in path[1:]])
    assert cols["t"][-1] == pytest.approx(sum(t for _, _, t in path))
