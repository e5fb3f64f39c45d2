"""Land-use rasterization on a fine (1 m) grid aligned with a coarse (250 m) grid.

Rows grow with ``y`` and columns with ``x``; row 0 is the southern edge of the
extent. A cell belongs to a polygon when its center does (even-odd rule, so
holes and multipolygons come for free).
"""
from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import BadConfig, GridTooLarge, InvalidGeometry, SpecMismatch

BACKGROUND = 0
RESIDENTIAL = 10
NON_RESIDENTIAL = 20
OUTDOOR = 50
VEHICULAR_ROAD = 60

VALID_CODES = frozenset({BACKGROUND, RESIDENTIAL, NON_RESIDENTIAL, OUTDOOR, VEHICULAR_ROAD})
ACTIVITY_CLASSES = (RESIDENTIAL, NON_RESIDENTIAL, OUTDOOR)
CLASS_NAMES = {
    BACKGROUND: "background",
    RESIDENTIAL: "residential",
    NON_RESIDENTIAL: "non_residential",
    OUTDOOR: "outdoor",
    VEHICULAR_ROAD: "vehicular_road",
}

# default layer precedence, low to high
PRIORITY_PARCEL = 1
PRIORITY_STREET = 2
PRIORITY_BUILDING = 3
PRIORITY_ROAD_MASK = 4

MAGIC = b"EXR1"
_HEADER = struct.Struct("<4sIIddd")

DEFAULT_TILE = 1024
DEFAULT_MAX_BYTES = 2 * 1024**3


@dataclass(frozen=True)
class GridSpec:
    origin_x: float = 0.0
    origin_y: float = 0.0
    fine_cell: float = 1.0
    coarse_cell: float = 250.0
    coarse_cols: int = 187
    coarse_rows: int = 186

    def __post_init__(self):
        if self.fine_cell <= 0 or self.coarse_cell <= 0:
            raise BadConfig("cell sizes must be positive")
        ratio = self.coarse_cell / self.fine_cell
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise BadConfig(
                f"coarse cell {self.coarse_cell} is not an integer multiple of fine cell {self.fine_cell}"
            )
        if self.coarse_cols < 1 or self.coarse_rows < 1:
            raise BadConfig("coarse grid needs at least one row and one column")

    @property
    def ratio(self) -> int:
        return int(round(self.coarse_cell / self.fine_cell))

    @property
    def fine_width(self) -> int:
        return self.coarse_cols * self.ratio

    @property
    def fine_height(self) -> int:
        return self.coarse_rows * self.ratio

    @property
    def bounds(self):
        return (
            self.origin_x,
            self.origin_y,
            self.origin_x + self.coarse_cols * self.coarse_cell,
            self.origin_y + self.coarse_rows * self.coarse_cell,
        )


@dataclass
class LayerSource:
    """One land-use layer: a polygon or multipolygon given as a flat list of rings.

    All rings of all parts are pooled under the even-odd rule, so a hole is
    simply another ring inside its shell.
    """

    rings: list
    lu_class: int
    priority: int = PRIORITY_PARCEL
    rings_arr: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.lu_class not in VALID_CODES:
            raise InvalidGeometry(f"unknown land-use class {self.lu_class}")
        self.rings_arr = [_check_ring(r) for r in self.rings]
        if not self.rings_arr:
            raise InvalidGeometry("layer has no rings")

    @property
    def bbox(self):
        xs = np.concatenate([r[:, 0] for r in self.rings_arr])
        ys = np.concatenate([r[:, 1] for r in self.rings_arr])
        return xs.min(), ys.min(), xs.max(), ys.max()

    def edges(self):
        """Edge arrays ``(x0, y0, x1, y1)`` running from vertex k to vertex k+1."""
        a = np.concatenate([r[:-1] for r in self.rings_arr])
        b = np.concatenate([r[1:] for r in self.rings_arr])
        return a[:, 0], a[:, 1], b[:, 0], b[:, 1]


def _check_ring(ring):
    arr = np.asarray(ring, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidGeometry("ring must be a sequence of (x, y) pairs")
    if arr.shape[0] < 4:
        raise InvalidGeometry(f"ring has {arr.shape[0]} vertices, need at least 4 (closed triangle)")
    if not np.all(np.isfinite(arr)):
        raise InvalidGeometry("ring has non-finite coordinates")
    if not np.array_equal(arr[0], arr[-1]):
        raise InvalidGeometry("ring is not closed (first vertex != last vertex)")
    x, y = arr[:, 0], arr[:, 1]
    area2 = np.sum(x[:-1] * y[1:] - x[1:] * y[:-1])
    if area2 == 0.0:
        raise InvalidGeometry("ring is degenerate (zero area)")
    return arr


def floor_index(values, origin, size):
    """Exact ``floor((v - origin) / size)`` for float arrays.

    The float quotient can land on the wrong side of an integer when a point
    sits within rounding distance of a cell edge; those rare cases are
    re-decided in rational arithmetic.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 0:
        return _exact_floor(float(v), origin, size)
    quot = (v - origin) / size
    q = np.floor(quot)
    frac = quot - q
    near = np.nonzero(np.isfinite(quot) & ((frac < 1e-9) | (frac > 1 - 1e-9)))[0]
    out = np.where(np.isfinite(q), q, -(2**62)).astype(np.int64)
    if origin == 0 and math.frexp(size)[0] == 0.5:
        # dividing by a power of two is exact
        return out
    fo, fs = Fraction(origin), Fraction(size)
    for i in near:
        out[i] = math.floor((Fraction(float(v[i])) - fo) / fs)
    return out


def _exact_floor(v, origin, size):
    return math.floor((Fraction(v) - Fraction(origin)) / Fraction(size))


def coarse_index(spec: GridSpec, x, y):
    """Coarse (col, row) for a point; ``None`` outside the grid."""
    if not (math.isfinite(x) and math.isfinite(y)):
        return None
    col = _exact_floor(x, spec.origin_x, spec.coarse_cell)
    row = _exact_floor(y, spec.origin_y, spec.coarse_cell)
    if 0 <= col < spec.coarse_cols and 0 <= row < spec.coarse_rows:
        return col, row
    return None


def coarse_indices(spec: GridSpec, xs, ys):
    """Vectorized :func:`coarse_index`; out-of-area points get ``-1`` in both outputs."""
    cols = floor_index(xs, spec.origin_x, spec.coarse_cell)
    rows = floor_index(ys, spec.origin_y, spec.coarse_cell)
    bad = (cols < 0) | (cols >= spec.coarse_cols) | (rows < 0) | (rows >= spec.coarse_rows)
    cols[bad] = -1
    rows[bad] = -1
    return cols, rows


class LandUseRaster:
    """Fine land-use grid stored as lazily allocated square tiles.

    Tiles never written stay virtual and read as code 0, which keeps the
    full-city extent (about 2.2e9 cells) addressable without allocating it.
    """

    def __init__(self, spec: GridSpec, tile_size: int = DEFAULT_TILE):
        self.spec = spec
        self.tile_size = int(tile_size)
        self.width = spec.fine_width
        self.height = spec.fine_height
        self.tiles_x = -(-self.width // self.tile_size)
        self.tiles_y = -(-self.height // self.tile_size)
        self.tiles: dict[tuple[int, int], np.ndarray] = {}

    # storage ---------------------------------------------------------------
    def _tile(self, tr, tc):
        t = self.tiles.get((tr, tc))
        if t is None:
            t = np.zeros((self.tile_size, self.tile_size), dtype=np.uint8)
            self.tiles[(tr, tc)] = t
        return t

    def fill_span(self, row, c0, c1, code):
        """Set cells ``[c0, c1)`` of ``row`` to ``code``."""
        ts = self.tile_size
        tr, r = divmod(row, ts)
        c = c0
        while c < c1:
            tc, off = divmod(c, ts)
            stop = min(c1, (tc + 1) * ts)
            self._tile(tr, tc)[r, off : off + (stop - c)] = code
            c = stop

    @property
    def allocated_bytes(self):
        return len(self.tiles) * self.tile_size**2

    # queries ---------------------------------------------------------------
    def lookup(self, rows, cols):
        """Codes at fine (row, col) indices; anything out of range reads 0."""
        rows, cols = np.broadcast_arrays(np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))
        shape = rows.shape
        rows, cols = rows.ravel(), cols.ravel()
        out = np.zeros(rows.shape, dtype=np.uint8)
        ok = (rows >= 0) & (rows < self.height) & (cols >= 0) & (cols < self.width)
        if not self.tiles or not ok.any():
            return out.reshape(shape)
        idx = np.nonzero(ok)[0]
        r, c = rows[idx], cols[idx]
        ts = self.tile_size
        tid = (r // ts) * self.tiles_x + (c // ts)
        if len(self.tiles) == 1:
            ((tr, tc), tile), = self.tiles.items()
            hit = tid == tr * self.tiles_x + tc
            out[idx[hit]] = tile[r[hit] - tr * ts, c[hit] - tc * ts]
            return out.reshape(shape)
        order = np.argsort(tid, kind="stable")
        tid_sorted = tid[order]
        for (tr, tc), tile in self.tiles.items():
            key = tr * self.tiles_x + tc
            lo = np.searchsorted(tid_sorted, key, "left")
            hi = np.searchsorted(tid_sorted, key, "right")
            if lo == hi:
                continue
            sel = order[lo:hi]
            out[idx[sel]] = tile[r[sel] - tr * ts, c[sel] - tc * ts]
        return out.reshape(shape)

    def classify_points(self, xs, ys):
        rows = floor_index(ys, self.spec.origin_y, self.spec.fine_cell)
        cols = floor_index(xs, self.spec.origin_x, self.spec.fine_cell)
        return self.lookup(rows, cols)

    def classify_point(self, x, y) -> int:
        if not (math.isfinite(x) and math.isfinite(y)):
            return BACKGROUND
        row = _exact_floor(y, self.spec.origin_y, self.spec.fine_cell)
        col = _exact_floor(x, self.spec.origin_x, self.spec.fine_cell)
        return int(self.lookup(np.array([row]), np.array([col]))[0])

    def cell_center(self, row, col):
        s = self.spec
        return s.origin_x + (col + 0.5) * s.fine_cell, s.origin_y + (row + 0.5) * s.fine_cell

    def row_band(self, r0, r1):
        """Dense copy of rows ``[r0, r1)``."""
        band = np.zeros((r1 - r0, self.width), dtype=np.uint8)
        ts = self.tile_size
        for (tr, tc), tile in self.tiles.items():
            lo, hi = max(r0, tr * ts), min(r1, (tr + 1) * ts)
            if lo >= hi:
                continue
            c0 = tc * ts
            c1 = min(self.width, c0 + ts)
            band[lo - r0 : hi - r0, c0:c1] = tile[lo - tr * ts : hi - tr * ts, : c1 - c0]
        return band

    def to_array(self, max_bytes=DEFAULT_MAX_BYTES):
        if self.width * self.height > max_bytes:
            raise GridTooLarge(f"dense raster of {self.width}x{self.height} exceeds {max_bytes} bytes")
        return self.row_band(0, self.height)

    def class_counts(self):
        """Cell count per code, virtual tiles counted as background."""
        counts = dict.fromkeys(sorted(VALID_CODES), 0)
        ts = self.tile_size
        stored = 0
        for (tr, tc), tile in self.tiles.items():
            h = min(ts, self.height - tr * ts)
            w = min(ts, self.width - tc * ts)
            vals, n = np.unique(tile[:h, :w], return_counts=True)
            for v, k in zip(vals.tolist(), n.tolist()):
                counts[v] += k
            stored += h * w
        counts[BACKGROUND] += self.width * self.height - stored
        return counts

    def iter_bands(self, band_rows=None):
        band_rows = band_rows or self.tile_size
        for r0 in range(0, self.height, band_rows):
            yield r0, self.row_band(r0, min(self.height, r0 + band_rows))

    def digest(self):
        import hashlib

        h = hashlib.sha256()
        for _, band in self.iter_bands():
            h.update(band.tobytes())
        return h.hexdigest()


def points_in_rings(rings, xs, ys):
    """Even-odd containment of many points in one ring set."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = np.zeros(xs.shape, dtype=bool)
    for ring in rings:
        r = np.asarray(ring, dtype=np.float64)
        for (xi, yi), (xj, yj) in zip(r[:-1], r[1:]):
            if yi == yj:
                continue
            crosses = (yi > ys) != (yj > ys)
            xc = xi + (ys - yi) * ((xj - xi) / (yj - yi))
            inside ^= crosses & (xs < xc)
    return inside


def classify_point(raster: LandUseRaster, x, y) -> int:
    return raster.classify_point(x, y)


# rasterization ---------------------------------------------------------------


def _ordered_layers(layers):
    # stable sort: equal priority keeps input order, so the later layer is painted last and wins
    return sorted(layers, key=lambda layer: layer.priority)


def _first_center_at_or_after(bound, origin, size):
    """Smallest column whose center ``origin + (c + 0.5) * size`` is >= bound."""
    c = np.ceil((bound - origin) / size - 0.5)
    c = np.where(origin + (c - 1 + 0.5) * size >= bound, c - 1, c)
    c = np.where(origin + (c + 0.5) * size < bound, c + 1, c)
    return c


def _paint_layer(raster, layer, r_lo, r_hi, row_chunk=512):
    spec = raster.spec
    f = spec.fine_cell
    x0, y0, x1, y1 = layer.edges()
    bx0, by0, bx1, by1 = layer.bbox
    first = max(r_lo, int(math.floor((by0 - spec.origin_y) / f - 0.5)))
    last = min(r_hi, int(math.ceil((by1 - spec.origin_y) / f - 0.5)) + 1)
    if first >= last:
        return
    # only edges that straddle some row center in this band matter
    horizontal = y0 == y1
    x0, y0, x1, y1 = x0[~horizontal], y0[~horizontal], x1[~horizontal], y1[~horizontal]
    slope = (x1 - x0) / (y1 - y0)
    code = layer.lu_class
    for a in range(first, last, row_chunk):
        b = min(last, a + row_chunk)
        rows = np.arange(a, b)
        yc = (spec.origin_y + (rows + 0.5) * f)[:, None]
        crosses = (y0 > yc) != (y1 > yc)
        if not crosses.any():
            continue
        xc = np.where(crosses, x0 + (yc - y0) * slope, np.inf)
        xc.sort(axis=1)
        nx = crosses.sum(axis=1)
        for j in range(0, int(nx.max()) // 2):
            has = nx >= 2 * j + 2
            if not has.any():
                break
            rr = rows[has]
            lo = _first_center_at_or_after(xc[has, 2 * j], spec.origin_x, f)
            hi = _first_center_at_or_after(xc[has, 2 * j + 1], spec.origin_x, f)
            lo = np.clip(lo, 0, raster.width).astype(np.int64)
            hi = np.clip(hi, 0, raster.width).astype(np.int64)
            for r, c0, c1 in zip(rr.tolist(), lo.tolist(), hi.tolist()):
                if c1 > c0:
                    raster.fill_span(r, c0, c1, code)


def _touched_tiles(layers, spec, tile_size):
    tiles = set()
    f = spec.fine_cell
    w, h = spec.fine_width, spec.fine_height
    for layer in layers:
        bx0, by0, bx1, by1 = layer.bbox
        c0 = max(0, int(math.floor((bx0 - spec.origin_x) / f)))
        c1 = min(w - 1, int(math.floor((bx1 - spec.origin_x) / f)))
        r0 = max(0, int(math.floor((by0 - spec.origin_y) / f)))
        r1 = min(h - 1, int(math.floor((by1 - spec.origin_y) / f)))
        if c0 > c1 or r0 > r1:
            continue
        for tr in range(r0 // tile_size, r1 // tile_size + 1):
            for tc in range(c0 // tile_size, c1 // tile_size + 1):
                tiles.add((tr, tc))
    return tiles


def rasterize(
    layers,
    spec: GridSpec,
    *,
    tile_size: int = DEFAULT_TILE,
    max_bytes: int = DEFAULT_MAX_BYTES,
    threads: int = 1,
) -> LandUseRaster:
    """Paint layers in ascending priority into a fresh raster.

    Work is split into bands of whole tile rows; each band is painted by a
    single worker, so writes never collide and the result does not depend
    on ``threads``.
    """
    raster = LandUseRaster(spec, tile_size)
    ordered = _ordered_layers(layers)
    worst = len(_touched_tiles(ordered, spec, raster.tile_size)) * raster.tile_size**2
    if worst > max_bytes:
        raise GridTooLarge(f"rasterization may allocate {worst} bytes, cap is {max_bytes}")

    def band(tr):
        r_lo = tr * raster.tile_size
        r_hi = min(raster.height, r_lo + raster.tile_size)
        for layer in ordered:
            _paint_layer(raster, layer, r_lo, r_hi)

    # pre-create tiles so workers never race on dict insertion
    for key in sorted(_touched_tiles(ordered, spec, raster.tile_size)):
        raster._tile(*key)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(band, range(raster.tiles_y)))
    else:
        for tr in range(raster.tiles_y):
            band(tr)
    # drop tiles that ended up all background
    for key in [k for k, t in raster.tiles.items() if not t.any()]:
        del raster.tiles[key]
    return raster


# file formats ----------------------------------------------------------------


def _polygon_rings(geom):
    kind = geom.get("type")
    coords = geom.get("coordinates")
    if kind == "Polygon":
        return [ring for ring in coords]
    if kind == "MultiPolygon":
        return [ring for poly in coords for ring in poly]
    raise InvalidGeometry(f"unsupported geometry type {kind!r}")


def layers_from_geojson(data) -> list[LayerSource]:
    """Layers from a GeoJSON FeatureCollection (dict, path or JSON text)."""
    if isinstance(data, (str, Path)) and not str(data).lstrip().startswith("{"):
        data = json.loads(Path(data).read_text())
    elif isinstance(data, str):
        data = json.loads(data)
    if data.get("type") != "FeatureCollection":
        raise InvalidGeometry("expected a GeoJSON FeatureCollection")
    layers = []
    for i, feat in enumerate(data.get("features", [])):
        props = feat.get("properties") or {}
        if "lu_class" not in props:
            raise InvalidGeometry(f"feature {i} lacks integer property 'lu_class'")
        layers.append(
            LayerSource(
                rings=_polygon_rings(feat.get("geometry") or {}),
                lu_class=int(props["lu_class"]),
                priority=int(props.get("priority", PRIORITY_PARCEL)),
            )
        )
    return layers


def layers_to_geojson(layers) -> dict:
    feats = []
    for layer in layers:
        feats.append(
            {
                "type": "Feature",
                "properties": {"lu_class": layer.lu_class, "priority": layer.priority},
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [r.tolist() for r in layer.rings_arr],
                },
            }
        )
    return {"type": "FeatureCollection", "features": feats}


def write_raster(raster: LandUseRaster, path):
    s = raster.spec
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, raster.width, raster.height, s.origin_x, s.origin_y, s.fine_cell))
        for _, band in raster.iter_bands():
            fh.write(band.tobytes())


def read_raster(path, coarse_cell: float = 250.0, tile_size: int = DEFAULT_TILE) -> LandUseRaster:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise SpecMismatch("raster file truncated")
        magic, width, height, ox, oy, cell = _HEADER.unpack(head)
        if magic != MAGIC:
            raise SpecMismatch(f"bad raster magic {magic!r}")
        ratio = coarse_cell / cell
        cols, rows = width / ratio, height / ratio
        if cols != int(cols) or rows != int(rows):
            raise SpecMismatch("raster extent is not a whole number of coarse cells")
        spec = GridSpec(ox, oy, cell, coarse_cell, int(cols), int(rows))
        raster = LandUseRaster(spec, tile_size)
        ts = raster.tile_size
        for tr in range(raster.tiles_y):
            nrows = min(ts, height - tr * ts)
            buf = fh.read(nrows * width)
            if len(buf) != nrows * width:
                raise SpecMismatch("raster file truncated")
            band = np.frombuffer(buf, dtype=np.uint8).reshape(nrows, width)
            for tc in range(raster.tiles_x):
                block = band[:, tc * ts : (tc + 1) * ts]
                if block.any():
                    raster._tile(tr, tc)[:nrows, : block.shape[1]] = block
    return raster


def write_pgm(raster: LandUseRaster, path):
    """Binary PGM with north up, for eyeballing."""
    with open(path, "wb") as fh:
        fh.write(f"P5\n{raster.width} {raster.height}\n255\n".encode())
        bands = list(raster.iter_bands())
        for _, band in reversed(bands):
            fh.write(band[::-1].tobytes())


def check_raster_matches(raster: LandUseRaster, spec: GridSpec):
    if raster.spec != spec:
        raise SpecMismatch(f"raster grid {raster.spec} does not match {spec}")
