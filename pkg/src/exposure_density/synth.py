"""Seeded synthetic city and ping streams with planted behavioral regimes.

Every zone is a block of coarse cells. Each cell is cut into four
horizontal stripes (residential, non-residential, outdoor, vehicular road)
whose order is shuffled per cell. Devices live in one zone; in every hour
of a window a device is present in class ``L`` with probability ``r_L``
and then emits ``1 + Poisson(extra_pings)`` pings inside one stripe of one
random cell of its zone.

Pre-window rates are ``presence * mix_L``; the post window multiplies them
by ``1 + volume_change_L`` of the zone's regime. Expected zone activity is
therefore ``devices * r_L / cells`` and every expected change is closed
form (see :func:`expected_vector`).
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .change import FEATURES, Window
from .cube import ZoneMap
from .errors import BadConfig
from .ingest import BoundingBox, Projection
from .raster import (
    NON_RESIDENTIAL,
    OUTDOOR,
    PRIORITY_PARCEL,
    PRIORITY_ROAD_MASK,
    PRIORITY_STREET,
    RESIDENTIAL,
    VEHICULAR_ROAD,
    GridSpec,
    LayerSource,
)
from .stats.outcomes import COVARIATE_COLUMNS

# residential, non-residential, outdoor volume changes (group means of the
# five neighborhood clusters)
REGIMES = {
    "outflow-mixed": (-0.52, -0.60, -0.61),
    "outflow-residential": (-0.37, -0.28, -0.42),
    "outflow-stable": (-0.20, -0.19, -0.18),
    "stable-stable": (-0.01, -0.13, -0.07),
    "shelter-in-place": (0.20, -0.00, 0.07),
}
REGIME_NAMES = tuple(REGIMES)

STRIPE_CLASSES = (RESIDENTIAL, NON_RESIDENTIAL, OUTDOOR, VEHICULAR_ROAD)
STRIPE_PRIORITY = {
    RESIDENTIAL: PRIORITY_PARCEL,
    NON_RESIDENTIAL: PRIORITY_PARCEL,
    OUTDOOR: PRIORITY_STREET,
    VEHICULAR_ROAD: PRIORITY_ROAD_MASK,
}


@dataclass
class ScenarioSpec:
    seed: int = 0
    zones: int = 20
    cells_per_zone: int = 4
    regimes: list | None = None
    devices_per_zone: int = 1000
    days: int = 14
    presence: float = 0.25
    extra_pings: float = 0.2
    class_mix: tuple = (0.5, 0.3, 0.2)
    tiling: tuple = (0.4, 0.3, 0.2, 0.1)
    pre_start: dt.date = dt.date(2020, 2, 16)
    post_start: dt.date = dt.date(2020, 3, 29)
    bbox: BoundingBox = field(default_factory=BoundingBox)

    def __post_init__(self):
        if min(self.zones, self.cells_per_zone, self.devices_per_zone, self.days) < 1:
            raise BadConfig("scenario counts must be >= 1")
        if self.regimes is None:
            self.regimes = [REGIME_NAMES[i % len(REGIME_NAMES)] for i in range(self.zones)]
        self.regimes = list(self.regimes)
        if len(self.regimes) != self.zones:
            raise BadConfig(f"{len(self.regimes)} regime labels for {self.zones} zones")
        unknown = set(self.regimes) - set(REGIMES)
        if unknown:
            raise BadConfig(f"unknown regimes {sorted(unknown)}; known: {', '.join(REGIME_NAMES)}")
        if abs(sum(self.class_mix) - 1) > 1e-9 or abs(sum(self.tiling) - 1) > 1e-9:
            raise BadConfig("class_mix and tiling must each sum to 1")
        peak = max(self.presence * sum(m * (1 + v) for m, v in zip(self.class_mix, REGIMES[r])) for r in set(self.regimes))
        if peak > 1 or self.presence <= 0:
            raise BadConfig("presence rates exceed 1 in some regime; lower `presence`")
        stripes = [round(250 * t) for t in self.tiling]
        if sum(stripes) != 250 or min(stripes) < 2:
            raise BadConfig("tiling must split a 250 m cell into whole-meter stripes of at least 2 m")

    @property
    def pre_window(self):
        return Window(self.pre_start, self.pre_start + dt.timedelta(days=self.days - 1))

    @property
    def post_window(self):
        return Window(self.post_start, self.post_start + dt.timedelta(days=self.days - 1))

    @property
    def zone_ids(self):
        width = max(3, len(str(self.zones - 1)))
        return [f"Z{i:0{width}d}" for i in range(self.zones)]

    @property
    def block_shape(self):
        w = math.ceil(math.sqrt(self.cells_per_zone))
        return w, math.ceil(self.cells_per_zone / w)

    @property
    def zone_grid_shape(self):
        zc = math.ceil(math.sqrt(self.zones))
        return zc, math.ceil(self.zones / zc)

    def rates(self, regime):
        """Per-class presence probabilities ``(pre, post)`` for one regime."""
        pre = np.array(self.class_mix) * self.presence
        post = pre * (1 + np.array(REGIMES[regime]))
        return pre, post


def regimes_from_text(text: str, zones: int):
    """Regime list from ``name,name,...`` (cycled over zones) or ``zone_index:name`` pairs."""
    items = [t.strip() for t in text.split(",") if t.strip()]
    if items and all(":" in t for t in items):
        out = [REGIME_NAMES[i % len(REGIME_NAMES)] for i in range(zones)]
        for t in items:
            idx, name = t.split(":", 1)
            out[int(idx)] = name.strip()
        return out
    if not items:
        raise BadConfig("empty regime map")
    return [items[i % len(items)] for i in range(zones)]


@dataclass
class City:
    layers: list
    zones: ZoneMap
    grid: GridSpec
    cells: dict  # zone id -> list of (col, row)
    stripes: dict  # (col, row) -> {class: (y_lo, y_hi)} offsets inside the cell


def gen_city(spec: ScenarioSpec) -> City:
    rng = np.random.default_rng([spec.seed, 0xC17])
    bw, bh = spec.block_shape
    zc, zr = spec.zone_grid_shape
    grid = GridSpec(0.0, 0.0, 1.0, 250.0, zc * bw, zr * bh)
    heights = [round(250 * t) for t in spec.tiling]
    layers, assignment, cells, stripes = [], {}, {}, {}
    for zi, zone in enumerate(spec.zone_ids):
        bx, by = (zi % zc) * bw, (zi // zc) * bh
        own = []
        for k in range(spec.cells_per_zone):
            col, row = bx + k % bw, by + k // bw
            own.append((col, row))
            assignment[(col, row)] = zone
            order = rng.permutation(len(STRIPE_CLASSES))
            x0, y0 = col * 250.0, row * 250.0
            offset, bounds = 0, {}
            for s in order:
                cls, h = STRIPE_CLASSES[s], heights[s]
                bounds[cls] = (offset, offset + h)
                ring = [
                    [x0, y0 + offset],
                    [x0 + 250.0, y0 + offset],
                    [x0 + 250.0, y0 + offset + h],
                    [x0, y0 + offset + h],
                    [x0, y0 + offset],
                ]
                layers.append(LayerSource([ring], cls, STRIPE_PRIORITY[cls]))
                offset += h
            stripes[(col, row)] = bounds
        cells[zone] = own
    return City(layers, ZoneMap(assignment, spec.zone_ids), grid, cells, stripes)


def expected_vector(spec: ScenarioSpec, regime):
    """Closed-form six-feature change vector and exposure change for a regime."""
    pre, post = spec.rates(regime)
    vol = post / pre - 1
    share = (post / post.sum()) / (pre / pre.sum()) - 1
    exposure = (post[1] + post[2]) / (pre[1] + pre[2]) - 1
    return np.concatenate([vol, share]), float(exposure)


@dataclass
class PlantedTruth:
    zones: list
    labels: list
    vectors: np.ndarray
    exposure: np.ndarray

    def to_frame(self):
        df = pd.DataFrame(self.vectors, columns=list(FEATURES))
        df.insert(0, "regime", self.labels)
        df.insert(0, "zone", self.zones)
        df["exposure_change"] = self.exposure
        return df


def planted_truth(spec: ScenarioSpec) -> PlantedTruth:
    vecs, exps = [], []
    for r in spec.regimes:
        v, e = expected_vector(spec, r)
        vecs.append(v)
        exps.append(e)
    return PlantedTruth(spec.zone_ids, list(spec.regimes), np.array(vecs), np.array(exps))


def _window_pings(rng, spec, city, zone, rates, first_hour, n_dev, dev_offset):
    hours = spec.days * 24
    u = rng.random((n_dev, hours))
    cum = np.cumsum(rates)
    cls_idx = np.searchsorted(cum, u, side="right")  # 3 means absent
    dev, hr = np.nonzero(cls_idx < 3)
    cls_idx = cls_idx[dev, hr]
    own = city.cells[zone]
    cell = rng.integers(0, len(own), size=len(dev))
    reps = 1 + rng.poisson(spec.extra_pings, size=len(dev))
    dev = np.repeat(dev, reps)
    hr = np.repeat(hr, reps)
    cls_idx = np.repeat(cls_idx, reps)
    cell = np.repeat(cell, reps)
    n = len(dev)
    cols = np.array([c for c, _ in own])[cell]
    rows = np.array([r for _, r in own])[cell]
    lo = np.empty(n)
    hi = np.empty(n)
    classes = (RESIDENTIAL, NON_RESIDENTIAL, OUTDOOR)
    for ci, cls in enumerate(classes):
        tbl_lo = np.array([city.stripes[c][cls][0] for c in own], dtype=float)
        tbl_hi = np.array([city.stripes[c][cls][1] for c in own], dtype=float)
        m = cls_idx == ci
        lo[m] = tbl_lo[cell[m]]
        hi[m] = tbl_hi[cell[m]]
    # half-meter margins keep points clear of stripe edges after float32 storage
    x = cols * 250.0 + 0.5 + rng.random(n) * 249.0
    y = rows * 250.0 + lo + 0.5 + rng.random(n) * (hi - lo - 1.0)
    local = (first_hour + hr) * 3600 + rng.integers(0, 3600, size=n)
    utc = local + 5 * 3600
    return dev + dev_offset, utc, x, y


def gen_pings(spec: ScenarioSpec, city: City | None = None) -> pd.DataFrame:
    """Raw ping table (``device_id`` categorical, UTC epoch seconds, lat/lon).

    Zones draw from independent substreams keyed by zone index, so the
    output does not depend on generation order.
    """
    city = city or gen_city(spec)
    proj = Projection.for_bbox(spec.bbox)
    names = [f"{z}-d{d:05d}" for z in spec.zone_ids for d in range(spec.devices_per_zone)]
    parts = []
    for zi, (zone, regime) in enumerate(zip(spec.zone_ids, spec.regimes)):
        rng = np.random.default_rng([spec.seed, 0x5EED, zi])
        pre, post = spec.rates(regime)
        for win, rates in ((spec.pre_window, pre), (spec.post_window, post)):
            first = win.hours[0]
            parts.append(
                _window_pings(rng, spec, city, zone, rates, first, spec.devices_per_zone, zi * spec.devices_per_zone)
            )
    dev = np.concatenate([p[0] for p in parts])
    utc = np.concatenate([p[1] for p in parts])
    x = np.concatenate([p[2] for p in parts])
    y = np.concatenate([p[3] for p in parts])
    lon, lat = proj.inverse(x, y)
    return pd.DataFrame(
        {
            "device_id": pd.Categorical.from_codes(dev.astype(np.int64), categories=names),
            "timestamp": utc.astype(np.float64),
            "latitude": lat,
            "longitude": lon,
        }
    )


def write_pings_csv(raw: pd.DataFrame, path, chunk_rows: int = 1_000_000):
    """Write a raw table in the ingest CSV layout (gzip when the name ends in .gz)."""
    import pyarrow as pa
    import pyarrow.csv as pacsv

    ts = raw["timestamp"].to_numpy()
    integral = bool(np.all(ts == np.floor(ts)))
    sink = pa.CompressedOutputStream(str(path), "gzip") if str(path).endswith(".gz") else pa.OSFile(str(path), "wb")
    with sink:
        sink.write(b"device_id,timestamp,latitude,longitude\n")
        opts = pacsv.WriteOptions(include_header=False, quoting_style="none")
        for a in range(0, len(raw), chunk_rows):
            part = raw.iloc[a : a + chunk_rows]
            dev = pa.array(part["device_id"].to_numpy() if not isinstance(part["device_id"].dtype, pd.CategoricalDtype)
                           else part["device_id"]).cast(pa.string())
            t = part["timestamp"].to_numpy()
            table = pa.table(
                {
                    "device_id": dev,
                    "timestamp": pa.array(t.astype(np.int64) if integral else t),
                    "latitude": pa.array(part["latitude"].to_numpy()),
                    "longitude": pa.array(part["longitude"].to_numpy()),
                }
            )
            pacsv.write_csv(table, sink, opts)


# outcomes --------------------------------------------------------------------


def gen_covariates(spec: ScenarioSpec) -> pd.DataFrame:
    """Zone covariates with plausible ranges; shares stay in [0, 1]."""
    rng = np.random.default_rng([spec.seed, 0xC0BA])
    n = spec.zones
    race = rng.dirichlet([4.7, 2.1, 2.6, 1.5], size=n)
    data = {
        "zone": spec.zone_ids,
        "white": race[:, 0],
        "black": race[:, 1],
        "hispanic": race[:, 2],
        "asian": race[:, 3],
        "age_25_34": rng.beta(18, 82, n),
        "age_over_65": rng.beta(14, 86, n),
        "household_size": rng.normal(2.64, 0.5, n).clip(1.0, 5.0),
        "household_with_children": rng.beta(25, 75, n),
        "educational_attainment": rng.beta(23, 77, n),
        "no_health_insurance": rng.beta(8, 92, n),
        "public_health_insurance": rng.beta(39, 61, n),
        "commute_time": rng.normal(40.76, 7.12, n).clip(10, 90),
        "median_income": rng.lognormal(np.log(74_000), 0.45, n).round(),
        "unemployment_rate": rng.beta(7, 93, n),
        "owner_occupied_units": rng.beta(3.4, 5.8, n),
        "one_or_two_family_home": rng.beta(0.9, 2.1, n),
        "public_housing": rng.beta(0.6, 11, n),
        "residential_area": rng.beta(6.5, 3.5, n),
        "office_area": rng.beta(0.5, 5, n),
        "commercial_area": rng.beta(2.8, 7.2, n),
        "hospital": (rng.random(n) < 0.21).astype(int),
        "nursing_home_beds": rng.gamma(0.4, 1270, n).round(),
    }
    df = pd.DataFrame(data)
    return df[["zone", *COVARIATE_COLUMNS]]


def gen_rates(spec: ScenarioSpec, exposure: np.ndarray, *, beta=(7.0, 1.33), sigma=0.3,
              lag_days: int = 5, span_days: int = 10) -> pd.DataFrame:
    """Daily zone rates whose logs are linear in exposure change.

    The case rate on the lag read date is ``exp(b0 + b1 * exposure + e)``;
    other outcomes and other dates are derived from it.
    """
    rng = np.random.default_rng([spec.seed, 0x4A7E])
    n = spec.zones
    exposure = np.asarray(exposure, dtype=float)
    log_case = beta[0] + beta[1] * exposure + rng.normal(0, sigma, n)
    log_death = beta[0] - 2.5 + 1.59 * exposure + rng.normal(0, sigma, n)
    positivity = np.clip(np.exp(-1.5 + 1.16 * exposure + rng.normal(0, sigma / 2, n)), 0.01, 0.95)
    read = spec.post_window.end + dt.timedelta(days=lag_days)
    rows = []
    for offset in range(-span_days // 2, span_days // 2 + 1):
        day = read + dt.timedelta(days=offset)
        growth = math.exp(0.02 * offset)
        for i, zone in enumerate(spec.zone_ids):
            case = math.exp(log_case[i]) * growth
            death = math.exp(log_death[i]) * growth
            rows.append(
                {
                    "zone": zone,
                    "date": day.isoformat(),
                    "case_rate": case,
                    "death_rate": death,
                    "positivity_rate": float(positivity[i]),
                    "deaths_per_case": death / case,
                }
            )
    return pd.DataFrame(rows)


def planted_regression_sample(seed: int, n: int = 177, beta=(7.0, 1.33), sigma: float = 0.3,
                              spread: float = 0.05):
    """Zone-level exposure changes around the regime expectations and log-linear case rates.

    Returns ``(x, y)`` where ``log(y) = beta0 + beta1 * x + N(0, sigma)``.
    """
    rng = np.random.default_rng([seed, 0xBE7A])
    base = ScenarioSpec(zones=n)
    centers = np.array([expected_vector(base, r)[1] for r in base.regimes])
    x = centers + rng.normal(0, spread, n)
    y = np.exp(beta[0] + beta[1] * x + rng.normal(0, sigma, n))
    return x, y
