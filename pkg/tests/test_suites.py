import numpy as np
import pytest

from egoplan.disturbance import DisturbanceParams
from egoplan.suites import SUITES, SceneSpec, build_scene, load_suite


def small_spec(scale=1.0):
    params = dict(resolution=0.1, gap=0.8, length=1.0, width=1.6, height=1.0)
    return SceneSpec("tiny" + ("-high" if scale != 1 else ""), "narrow", params, (-0.3, 0, 0.5), (0.3, 0, 0.5),
                     variance_scale=scale)


def test_suite_names():
    assert set(SUITES) == {"narrow", "narrow-high", "room", "all"}
    assert len(SUITES["all"]) == len(SUITES["narrow"]) + len(SUITES["narrow-high"]) + len(SUITES["room"])
    with pytest.raises(ValueError):
        load_suite("nope")


def test_cache_and_variance_scale(tmp_path):
    a = build_scene(small_spec(), tmp_path)
    assert (tmp_path / "tiny.map").exists() and (tmp_path / "tiny.field").exists()
    b = build_scene(small_spec(16.0), tmp_path)  # the high variant reuses the base files
    assert sorted(p.name for p in tmp_path.iterdir()) == ["tiny.field", "tiny.map"]
    finite = np.isfinite(a.field.variance)
    assert np.array_equal(b.field.variance[finite], 16.0 * a.field.variance[finite])
    again = build_scene(small_spec(), tmp_path)
    assert np.array_equal(again.field.variance, a.field.variance)
    assert np.array_equal(again.vmap.occupancy, a.vmap.occupancy)


def test_custom_params_bypass_cache(tmp_path):
    build_scene(small_spec(), tmp_path)
    p = DisturbanceParams(lambda_g=0.02)
    sc = build_scene(small_spec(), tmp_path, params=p)
    base = build_scene(small_spec(), tmp_path)
    assert not np.array_equal(sc.field.variance, base.field.variance)
