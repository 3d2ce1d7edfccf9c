import numpy as np
import pytest
from scipy.linalg import expm

from egoplan.disturbance import QueryGrid, constant_field
from egoplan.reachability import (Ellipsoid, NotHurwitzError, channel_shape, combine_channels,
                                  default_initial_shape, hover_frs, hover_radii, load_tube_csv,
                                  lyapunov_residual, make_error_system, minkowski_channels, one_step_shape,
                                  project_position, propagate_tube)


def random_hurwitz(rng, n=6):
    M = rng.normal(size=(n, n))
    return M - (np.max(np.linalg.eigvals(M).real) + rng.uniform(0.1, 2.0)) * np.eye(n)


def random_spd(rng, n=6):
    M = rng.normal(size=(n, n))
    return M @ M.T + 1e-3 * np.eye(n)


def test_error_system_eigenvalues(error_sys):
    assert np.allclose(np.linalg.eigvals(error_sys.Phi), -2.0, atol=1e-6)
    assert np.array_equal(error_sys.Phi, error_sys.A + error_sys.B @ error_sys.K)


def test_zero_gain_rejected():
    with pytest.raises(NotHurwitzError):
        make_error_system(0.0, 0.0)


def test_zero_bound_channel_is_eps_floor(error_sys):
    t, eps = 0.02, 1e-4
    Q = channel_shape(error_sys.Phi, error_sys.D[:, 0], 0.0, t, eps)
    assert np.allclose(Q, eps * t**2 * np.eye(6), rtol=0, atol=1e-18)


def test_lyapunov_residual_random_systems(rng):
    for _ in range(200):
        Phi = random_hurwitz(rng)
        d = rng.normal(size=6)
        w, t, eps = rng.uniform(0.1, 3), rng.uniform(0.005, 0.1), rng.uniform(0, 1e-3)
        Q = channel_shape(Phi, d, w, t, eps)
        assert lyapunov_residual(Phi, Q, d, w, t, eps) <= 1e-9


def scalar_closed_form(phi, d, w, t, eps):
    N = t * w**2 * d**2
    return N * (np.exp(-2 * phi * t) - 1) / (-2 * phi) + eps * t**2


def test_scalar_closed_form():
    Q = channel_shape(np.array([[-2.0]]), np.array([1.0]), 1.0, 0.02, 1e-4)
    assert Q[0, 0] == pytest.approx(scalar_closed_form(-2.0, 1.0, 1.0, 0.02, 1e-4), rel=1e-12, abs=0)


def test_single_channel_minkowski_is_identity(rng):
    Q1 = random_spd(rng)
    assert np.allclose(minkowski_channels([Q1]), Q1, rtol=1e-13)


def test_disturbance_free_combination_is_pure_contraction(error_sys, rng):
    Q0 = random_spd(rng)
    zero = [np.zeros((6, 6))] * 3
    F = expm(error_sys.Phi * 0.3)
    assert np.allclose(combine_channels(Q0, zero, error_sys.Phi, 0.3), F @ Q0 @ F.T, rtol=1e-12)


def test_one_step_containment_oracle(error_sys):
    """Errors driven by 1 kHz piecewise-constant disturbances stay inside the chained 50 Hz shapes."""
    rng = np.random.default_rng(7)
    dt, sub, steps, trials = 0.02, 20, 50, 1000
    w_bar = np.array([0.8, 0.5, 1.2])
    Q0 = default_initial_shape()
    h = dt / sub
    Fh = expm(error_sys.Phi * h)
    aug = np.zeros((12, 12))
    aug[:6, :6] = error_sys.Phi
    aug[:6, 6:] = np.eye(6)
    Gh = expm(aug * h)[:6, 6:] @ error_sys.D
    L = np.linalg.cholesky(Q0)
    u = rng.normal(size=(trials, 6))
    u *= (rng.random(trials) ** (1 / 6) / np.linalg.norm(u, axis=1))[:, None]
    e = u @ L.T
    Q = Q0
    worst = 0.0
    for _ in range(steps):
        for _ in range(sub):
            w = rng.uniform(-1, 1, (trials, 3)) * w_bar
            w = np.where(rng.random((trials, 3)) < 0.5, np.sign(w) * w_bar, w)  # push to the extremes
            e = e @ Fh.T + w @ Gh.T
        Q = one_step_shape(error_sys, Q, w_bar, dt, 1e-4)
        m = np.einsum("ij,jk,ik->i", e, np.linalg.inv(Q), e)
        worst = max(worst, m.max())
    assert worst <= 1.0


def test_projection_diagonal():
    q = np.arange(1.0, 7.0)
    E = project_position(Ellipsoid(np.arange(6.0), np.diag(q)))
    assert np.array_equal(E.shape, np.diag(q[:3]))
    assert np.array_equal(E.center, np.arange(3.0))


def test_projection_zero_matrix():
    E = project_position(Ellipsoid(np.zeros(6), np.zeros((6, 6))))
    assert not E.shape.any()


def test_propagate_zero_field_collapses_to_points(error_sys):
    grid = QueryGrid(0.5, np.array([-5.0, -5, -5]), (20, 20, 20))
    fld = constant_field(grid, 0.0)
    t = np.arange(0, 1.0, 0.02)
    cmds = np.column_stack([np.sin(t), np.cos(t) - 1, 0 * t, np.cos(t), -np.sin(t), 0 * t,
                            -np.sin(t), -np.cos(t), 0 * t])
    tube = propagate_tube(cmds, fld, error_sys, Q0=np.zeros((6, 6)), eps=0.0)
    assert np.all(tube.shapes == 0.0)
    assert np.all(tube.radii == 0.0)
    # Discrete commands make the center lag the reference but stay close.
    assert 0 < np.max(np.linalg.norm(tube.centers[:, :3] - cmds[:, :3], axis=1)) < 0.05


def test_constant_field_radius_saturates(error_sys):
    grid = QueryGrid(0.5, np.array([-5.0, -5, -5]), (20, 20, 20))
    fld = constant_field(grid, 0.01)
    cmds = np.zeros((400, 9))
    tube = propagate_tube(cmds, fld, error_sys, Q0=np.zeros((6, 6)))
    r = tube.radii
    assert np.all(np.diff(r) >= -1e-12)
    steady = hover_frs(np.full(3, 0.3), error_sys)
    assert r[-1] == pytest.approx(steady, rel=1e-3)


def test_hover_frs_zero_bound_is_eps_floor(error_sys):
    r_eps = hover_frs(np.zeros(3), error_sys, eps=1e-4)
    r_small = hover_frs(np.zeros(3), error_sys, eps=1e-8)
    assert 0 < r_small < r_eps
    assert r_small < 1e-3


def test_hover_frs_linear_scaling(error_sys):
    w = np.array([0.4, 0.7, 1.1])
    r1 = hover_frs(w, error_sys, eps=1e-6)
    r2 = hover_frs(2 * w, error_sys, eps=1e-6)
    assert r2 / r1 == pytest.approx(2.0, rel=0.02)


def test_hover_frs_monotone(error_sys, rng):
    base = rng.uniform(0, 1.5, (30, 3))
    bigger = base + rng.uniform(0, 0.5, (30, 3)) * (rng.random((30, 3)) < 0.5)
    r0 = hover_radii(base, error_sys)
    r1 = hover_radii(bigger, error_sys)
    assert np.all(r1 >= r0 - 1e-12)
    assert r0[3] == hover_frs(base[3], error_sys)  # batching does not change a row
    assert np.isinf(hover_radii(np.array([[np.inf, 0, 0]]), error_sys)[0])


def test_tube_csv_roundtrip(tmp_path, error_sys):
    grid = QueryGrid(0.5, np.array([-5.0, -5, -5]), (20, 20, 20))
    tube = propagate_tube(np.zeros((20, 9)), constant_field(grid, 0.02), error_sys)
    tube.save_csv(tmp_path / "tube.csv")
    back = load_tube_csv(tmp_path / "tube.csv")
    assert np.array_equal(back["r"], tube.radii)
    assert np.array_equal(back["qxy"], tube.shapes[:, 0, 1])
    assert np.array_equal(back["t"], tube.times)
