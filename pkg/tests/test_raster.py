import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exposure_density import raster
from exposure_density.errors import GridTooLarge, InvalidGeometry
from exposure_density.raster import GridSpec, LayerSource

import oracles
import scenarios


def square(x0, y0, x1, y1):
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]


SMALL = GridSpec(0.0, 0.0, 1.0, 10.0, 2, 2)  # 20 x 20 fine cells


def test_gridspec_defaults_and_validation():
    g = GridSpec()
    assert (g.coarse_cols, g.coarse_rows) == (187, 186)
    assert g.fine_width == 187 * 250 and g.fine_height == 186 * 250
    with pytest.raises(Exception):
        GridSpec(coarse_cell=250.5)
    with pytest.raises(Exception):
        GridSpec(coarse_cols=0)


def test_residential_square_fills_two_by_two():
    r = raster.rasterize([LayerSource([square(3, 4, 5, 6)], 10)], SMALL)
    arr = r.to_array()
    assert arr[4:6, 3:5].tolist() == [[10, 10], [10, 10]]
    assert int((arr != 0).sum()) == 4


def test_empty_layer_list_is_background():
    r = raster.rasterize([], SMALL)
    assert not r.to_array().any()
    assert r.class_counts() == {0: 400, 10: 0, 20: 0, 50: 0, 60: 0}


def test_building_overrides_parcel_exhaustively():
    parcel = LayerSource([square(1, 1, 15, 12)], 10, raster.PRIORITY_PARCEL)
    building = LayerSource([[[4, 3], [13.3, 5.2], [9.1, 16.7], [4, 3]]], 20, raster.PRIORITY_BUILDING)
    layers = [building, parcel]  # listed out of priority order on purpose
    r = raster.rasterize(layers, SMALL)
    arr = r.to_array()
    for row in range(20):
        for col in range(20):
            assert arr[row, col] == oracles.priority_code(layers, SMALL, col + 0.5, row + 0.5)
    assert (arr == 20).sum() > 0 and (arr == 10).sum() > 0


def test_equal_priority_later_layer_wins():
    a = LayerSource([square(0, 0, 10, 10)], 10, 1)
    b = LayerSource([square(5, 5, 15, 15)], 20, 1)
    assert raster.rasterize([a, b], SMALL).classify_point(7.5, 7.5) == 20
    assert raster.rasterize([b, a], SMALL).classify_point(7.5, 7.5) == 10


def test_hole_is_not_filled():
    shell = square(2, 2, 18, 18)
    hole = square(6, 6, 12, 12)
    r = raster.rasterize([LayerSource([shell, hole], 50)], SMALL)
    assert r.classify_point(3.5, 3.5) == 50
    assert r.classify_point(8.5, 8.5) == 0


def test_classify_point_edges():
    r = raster.rasterize([LayerSource([square(0, 0, 20, 20)], 10)], SMALL)
    assert r.classify_point(0.5, 0.5) == 10
    assert r.classify_point(-0.1, 5) == 0
    assert r.classify_point(20.0, 5) == 0  # right edge is exclusive
    assert r.classify_point(math.nan, 5) == 0


@pytest.mark.parametrize(
    "ring",
    [
        [[0, 0], [1, 0], [1, 1], [0, 1]],  # not closed
        [[0, 0], [1, 0], [0, 0]],  # too few vertices
        [[0, 0], [1, 1], [2, 2], [0, 0]],  # zero area
    ],
)
def test_invalid_geometry(ring):
    with pytest.raises(InvalidGeometry):
        LayerSource([ring], 10)


def test_unknown_class_rejected():
    with pytest.raises(InvalidGeometry):
        LayerSource([square(0, 0, 1, 1)], 30)


def test_grid_too_large():
    big = GridSpec(0.0, 0.0, 1.0, 250.0, 40, 40)
    layer = LayerSource([square(0, 0, 10000, 10000)], 10)
    with pytest.raises(GridTooLarge):
        raster.rasterize([layer], big, max_bytes=50 * 1024**2)


def test_lazy_tiles_only_where_touched():
    big = GridSpec()
    r = raster.rasterize([LayerSource([square(100, 100, 300, 200)], 10)], big)
    assert len(r.tiles) == 1
    assert r.classify_point(150.5, 150.5) == 10
    assert r.classify_point(40_000.0, 40_000.0) == 0


def test_coarse_index_examples():
    g = GridSpec(1000.0, 2000.0)
    assert raster.coarse_index(g, 1000.0, 2000.0) == (0, 0)
    assert raster.coarse_index(g, 1250.0, 2000.0) == (1, 0)
    assert raster.coarse_index(g, 999.999, 2000.0) is None
    assert raster.coarse_index(g, 1000.0 + 187 * 250, 2000.0) is None


def test_coarse_index_matches_rational_floor():
    rng = np.random.default_rng(7)
    g = GridSpec(123.456, -789.01)
    xs = g.origin_x + rng.uniform(-10, 187 * 250 + 10, 5000)
    ys = g.origin_y + rng.uniform(-10, 186 * 250 + 10, 5000)
    # include exact cell boundaries
    xs[:200] = g.origin_x + 250.0 * rng.integers(0, 187, 200)
    cols, rows = raster.coarse_indices(g, xs, ys)
    for x, y, c, r in zip(xs, ys, cols, rows):
        ec = oracles.exact_floor(x, g.origin_x, 250.0)
        er = oracles.exact_floor(y, g.origin_y, 250.0)
        inside = 0 <= ec < 187 and 0 <= er < 186
        assert (c, r) == ((ec, er) if inside else (-1, -1))
        assert raster.coarse_index(g, x, y) == ((ec, er) if inside else None)


def test_rasterize_deterministic_and_thread_independent():
    g = GridSpec(0.0, 0.0, 1.0, 64.0, 20, 20)
    rng = np.random.default_rng(3)
    layers = [
        LayerSource([square(*sorted(rng.uniform(0, 1280, 2)), *sorted(rng.uniform(0, 1280, 2)))],
                    int(rng.choice([10, 20, 50, 60])), int(rng.integers(1, 5)))
        for _ in range(12)
    ]
    a = raster.rasterize(layers, g, tile_size=128)
    b = raster.rasterize(layers, g, tile_size=128, threads=4)
    assert a.digest() == b.digest()
    assert np.array_equal(a.to_array(), b.to_array())


def test_round_trip_center_and_partition():
    g = GridSpec(0.0, 0.0, 1.0, 16.0, 3, 2)
    layers = [LayerSource([[[1, 1], [40, 3], [20, 30], [1, 1]]], 20),
              LayerSource([square(10, 5, 30, 25)], 50, 2)]
    r = raster.rasterize(layers, g)
    arr = r.to_array()
    rows, cols = np.indices(arr.shape)
    xs, ys = cols.ravel() + 0.5, rows.ravel() + 0.5
    assert np.array_equal(r.classify_points(xs, ys), arr.ravel())
    counts = r.class_counts()
    assert sum(counts.values()) == arr.size


def test_file_round_trip(tmp_path):
    g = GridSpec(10.0, 20.0, 1.0, 8.0, 3, 2)
    r = raster.rasterize([LayerSource([square(12, 22, 30, 33)], 10)], g)
    p = tmp_path / "lu.exr"
    raster.write_raster(r, p)
    assert p.read_bytes()[:4] == b"EXR1"
    back = raster.read_raster(p, coarse_cell=8.0)
    assert back.spec == g
    assert np.array_equal(back.to_array(), r.to_array())
    raster.write_pgm(r, tmp_path / "lu.pgm")
    assert (tmp_path / "lu.pgm").read_bytes().startswith(b"P5")


def test_geojson_round_trip():
    layers = [LayerSource([square(0, 0, 5, 5), square(1, 1, 2, 2)], 10, 1),
              LayerSource([square(3, 3, 9, 9)], 60, 4)]
    again = raster.layers_from_geojson(raster.layers_to_geojson(layers))
    assert [(lay.lu_class, lay.priority, len(lay.rings)) for lay in again] == [(10, 1, 2), (60, 4, 1)]


coord = st.floats(0.0, 20.0, allow_nan=False).map(lambda v: round(v, 3))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(coord, coord), min_size=3, max_size=7), st.sampled_from([10, 20, 50, 60]))
def test_random_polygon_matches_ray_cast(points, code):
    ring = [list(p) for p in points] + [list(points[0])]
    try:
        layer = LayerSource([ring], code)
    except InvalidGeometry:
        return
    r = raster.rasterize([layer], SMALL)
    arr = r.to_array()
    for row in range(20):
        for col in range(20):
            assert arr[row, col] == oracles.priority_code([layer], SMALL, col + 0.5, row + 0.5)


def test_lookup_accepts_grids():
    spec, layers, _ = scenarios.raster_scenario(3)
    lu = raster.rasterize(layers, spec)
    rr, cc = np.meshgrid(np.arange(-2, 30), np.arange(-2, 40), indexing="ij")
    grid = lu.lookup(rr, cc)
    assert grid.shape == rr.shape
    assert np.array_equal(grid.ravel(), lu.lookup(rr.ravel(), cc.ravel()))
