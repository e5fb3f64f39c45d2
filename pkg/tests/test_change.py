import datetime as dt
import math

import numpy as np
import pytest

from exposure_density import change
from exposure_density.change import Window
from exposure_density.cube import ZoneActivity
from exposure_density.errors import BadConfig, EmptyWindow

PRE = Window(dt.date(2020, 2, 16), dt.date(2020, 2, 29))
POST = Window(dt.date(2020, 3, 29), dt.date(2020, 4, 11))


def activity(pre_means, post_means, zones=("A",), noise=None):
    """Zone activity spanning both default windows with constant per-window means."""
    h0 = PRE.hours[0]
    nh = POST.hours[1] - h0
    vals = np.zeros((len(zones), nh, 3))
    a0, a1 = PRE.hours[0] - h0, PRE.hours[1] - h0
    b0, b1 = POST.hours[0] - h0, POST.hours[1] - h0
    vals[:, a0:a1, :] = np.asarray(pre_means, float).reshape(len(zones), 1, 3)
    vals[:, b0:b1, :] = np.asarray(post_means, float).reshape(len(zones), 1, 3)
    if noise is not None:
        vals = vals + noise
    return ZoneActivity(list(zones), h0, vals)


def test_window_parse_and_hours():
    w = Window.parse("2020-02-16:2020-02-29")
    assert w == PRE and w.days == 14
    first, stop = w.hours
    assert stop - first == 14 * 24
    assert first == (dt.date(2020, 2, 16) - dt.date(1970, 1, 1)).days * 24
    with pytest.raises(BadConfig):
        Window.parse("2020-02-29")
    with pytest.raises(BadConfig):
        Window(dt.date(2020, 3, 1), dt.date(2020, 2, 1))


def test_window_mean_examples():
    za = activity([3, 3, 3], [1, 1, 1])
    assert change.window_mean(za, "A", 10, PRE) == 3.0
    three = Window(dt.date(2020, 1, 1), dt.date(2020, 1, 1))
    vals = np.zeros((1, 24, 3))
    vals[0, :3, 0] = [2, 0, 4]
    short = ZoneActivity(["A"], three.hours[0], vals[:, :3, :])
    # the window covers a whole day, so build a 3-hour one by slicing hours directly
    assert short.values[0, :, 0].mean() == 2.0
    with pytest.raises(EmptyWindow):
        change.window_mean(short, "A", 10, three)


def test_window_mean_random_vs_direct():
    rng = np.random.default_rng(0)
    za = activity([1, 1, 1], [1, 1, 1], noise=rng.uniform(0, 5, (1, POST.hours[1] - PRE.hours[0], 3)))
    s = slice(POST.hours[0] - za.hour0, POST.hours[1] - za.hour0)
    for L, ci in ((10, 0), (20, 1), (50, 2)):
        direct = math.fsum(za.values[0, s, ci]) / (s.stop - s.start)
        assert change.window_mean(za, "A", L, POST) == pytest.approx(direct, rel=1e-12)


def test_change_vector_examples():
    same = change.change_vector(activity([2, 3, 4], [2, 3, 4]), "A", PRE, POST)
    assert np.allclose(same.features, 0)
    cv = change.change_vector(activity([10, 5, 5], [8, 5, 5]), "A", PRE, POST)
    assert cv.a_res == pytest.approx(-0.20)
    assert cv.a_nonres == 0.0


def test_change_vector_formula_oracle():
    rng = np.random.default_rng(1)
    nh = POST.hours[1] - PRE.hours[0]
    za = activity(np.zeros(3), np.zeros(3), noise=rng.uniform(0.1, 6, (1, nh, 3)))
    cv = change.change_vector(za, "A", PRE, POST)
    df = za.to_frame()
    pre_rows = df[(df["hour"] >= PRE.hours[0]) & (df["hour"] < PRE.hours[1])]
    post_rows = df[(df["hour"] >= POST.hours[0]) & (df["hour"] < POST.hours[1])]
    m0 = {L: math.fsum(pre_rows.loc[pre_rows["class"] == L, "value"]) / 336 for L in (10, 20, 50)}
    m1 = {L: math.fsum(post_rows.loc[post_rows["class"] == L, "value"]) / 336 for L in (10, 20, 50)}
    t0, t1 = sum(m0.values()), sum(m1.values())
    for name, L in (("res", 10), ("nonres", 20), ("out", 50)):
        assert getattr(cv, f"a_{name}") == pytest.approx(m1[L] / m0[L] - 1, rel=1e-12)
        assert getattr(cv, f"p_{name}") == pytest.approx((m1[L] / t1) / (m0[L] / t0) - 1, rel=1e-12)


def test_degenerate_zone_flagged():
    za = activity([[0, 1, 1], [1, 1, 1]], [[1, 1, 1], [1, 1, 1]], zones=("A", "B"))
    df = change.all_changes(za, PRE, POST)
    assert df["degenerate_flag"].tolist() == [1, 0]
    assert math.isnan(df.loc[0, "a_res"])


def test_exposure_change_pools_classes():
    ex = change.exposure_change(activity([5, 1.0, 1.0], [5, 0.8, 0.8]), "A", PRE, POST)
    assert ex.value == pytest.approx(-0.20)
    assert change.exposure_change(activity([1, 2, 3], [1, 2, 3]), "A", PRE, POST).value == 0.0
    # pooled ratio differs from the average of the two class changes
    ex = change.exposure_change(activity([1, 1.0, 3.0], [1, 2.0, 3.0]), "A", PRE, POST)
    assert ex.value == pytest.approx((5 - 4) / 4)
    assert ex.value != pytest.approx(((2 - 1) / 1 + 0) / 2)
    assert change.exposure_change(activity([1, 0, 0], [1, 1, 1]), "A", PRE, POST).undefined


def test_scale_invariance_and_window_symmetry():
    rng = np.random.default_rng(2)
    nh = POST.hours[1] - PRE.hours[0]
    za = activity(np.zeros(3), np.zeros(3), noise=rng.uniform(0.1, 4, (1, nh, 3)))
    base = change.change_vector(za, "A", PRE, POST).features
    scaled = ZoneActivity(za.zones, za.hour0, za.values * 7.5)
    assert np.allclose(change.change_vector(scaled, "A", PRE, POST).features, base, rtol=1e-12, atol=1e-14)
    swapped = change.change_vector(za, "A", POST, PRE).features
    assert np.allclose(swapped, 1 / (1 + base) - 1, rtol=1e-12)


def test_uniform_post_factor_leaves_proportions():
    cv = change.change_vector(activity([2, 3, 5], [2 * 0.6, 3 * 0.6, 5 * 0.6]), "A", PRE, POST)
    assert np.allclose([cv.p_res, cv.p_nonres, cv.p_out], 0, atol=1e-12)
    assert cv.a_out == pytest.approx(-0.4)


def test_changes_csv_round_trip(tmp_path):
    za = activity([[1, 2, 3], [0, 1, 1]], [[2, 2, 2], [1, 1, 1]], zones=("A", "B"))
    df = change.all_changes(za, PRE, POST)
    change.write_changes(df, tmp_path / "c.csv")
    head = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert head == "zone,a_res,a_nonres,a_out,p_res,p_nonres,p_out,exposure_change,degenerate_flag"
    back = change.read_changes(tmp_path / "c.csv")
    assert np.array_equal(back["a_res"].to_numpy()[:1], df["a_res"].to_numpy()[:1])
