"""Exact unique-device counts per (coarse cell, hour, land-use class).

Counting works on sorted arrays of distinct ``(key, device)`` pairs. A
partition produces its own pair set; merging is a set union followed by
counting, so any partitioning of the ping stream gives the same cube.
"""
from __future__ import annotations

import csv
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import EmptyZone, InputDataError, SpecMismatch
from .raster import (
    ACTIVITY_CLASSES,
    NON_RESIDENTIAL,
    OUTDOOR,
    GridSpec,
    LandUseRaster,
    coarse_indices,
    points_in_rings,
)

CLASS_INDEX = {c: i for i, c in enumerate(ACTIVITY_CLASSES)}
_CODE_TO_INDEX = np.full(256, -1, dtype=np.int64)
for _c, _i in CLASS_INDEX.items():
    _CODE_TO_INDEX[_c] = _i

PAIR_DTYPE = np.dtype([("key", "<i8"), ("device", "<u8")])


class KeyCodec:
    """Packs (col, row, hour, class index) into one int64, ordered hour-major."""

    def __init__(self, spec: GridSpec):
        self.cols = spec.coarse_cols
        self.rows = spec.coarse_rows

    def encode(self, col, row, hour, ci):
        return ((np.asarray(hour, np.int64) * self.rows + row) * self.cols + col) * 3 + ci

    def decode(self, key):
        key = np.asarray(key, np.int64)
        ci = key % 3
        rest = key // 3
        col = rest % self.cols
        rest //= self.cols
        row = rest % self.rows
        hour = rest // self.rows
        return col, row, hour, ci


def distinct_pairs(keys, devices) -> np.ndarray:
    """Sorted distinct (key, device) pairs."""
    keys = np.asarray(keys, np.int64)
    devices = np.asarray(devices, np.uint64)
    out = np.empty(0, dtype=PAIR_DTYPE)
    if len(keys) == 0:
        return out
    devs, dev_idx = np.unique(devices, return_inverse=True)
    kmin = keys.min()
    span = int(keys.max() - kmin) + 1
    if span * len(devs) < 2**62:
        packed = np.unique((keys - kmin) * len(devs) + dev_idx.reshape(-1))
        out = np.empty(len(packed), dtype=PAIR_DTYPE)
        out["key"] = packed // len(devs) + kmin
        out["device"] = devs[packed % len(devs)]
        return out
    order = np.lexsort((devices, keys))
    k, d = keys[order], devices[order]
    first = np.ones(len(k), dtype=bool)
    first[1:] = (k[1:] != k[:-1]) | (d[1:] != d[:-1])
    out = np.empty(int(first.sum()), dtype=PAIR_DTYPE)
    out["key"] = k[first]
    out["device"] = d[first]
    return out


def merge_pairs(parts) -> np.ndarray:
    parts = [p for p in parts if len(p)]
    if not parts:
        return np.empty(0, dtype=PAIR_DTYPE)
    if len(parts) == 1:
        return parts[0]
    both = np.concatenate(parts)
    return distinct_pairs(both["key"], both["device"])


@dataclass
class ActivityCube:
    spec: GridSpec
    col: np.ndarray
    row: np.ndarray
    hour: np.ndarray
    lu_class: np.ndarray
    count: np.ndarray

    @classmethod
    def from_keys(cls, spec, keys, counts):
        col, row, hour, ci = KeyCodec(spec).decode(keys)
        classes = np.asarray(ACTIVITY_CLASSES, dtype=np.int64)[ci]
        return cls(spec, col, row, hour, classes, np.asarray(counts, np.int64))

    @classmethod
    def empty(cls, spec):
        z = np.empty(0, np.int64)
        return cls(spec, z, z.copy(), z.copy(), z.copy(), z.copy())

    def __len__(self):
        return len(self.count)

    def keys(self):
        ci = _CODE_TO_INDEX[self.lu_class]
        return KeyCodec(self.spec).encode(self.col, self.row, self.hour, ci)

    def as_dict(self):
        return {
            (c, r, h, L): n
            for c, r, h, L, n in zip(
                self.col.tolist(), self.row.tolist(), self.hour.tolist(), self.lu_class.tolist(), self.count.tolist()
            )
        }

    def get(self, col, row, hour, lu_class):
        return self.as_dict().get((col, row, hour, lu_class), 0)

    def __eq__(self, other):
        if not isinstance(other, ActivityCube):
            return NotImplemented
        return self.spec == other.spec and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in ("col", "row", "hour", "lu_class", "count")
        )

    @property
    def hour_range(self):
        if len(self) == 0:
            return None
        return int(self.hour.min()), int(self.hour.max())

    def to_frame(self):
        return pd.DataFrame(
            {"col": self.col, "row": self.row, "hour": self.hour, "class": self.lu_class, "count": self.count}
        )

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def read_csv(cls, path, spec: GridSpec):
        df = pd.read_csv(path, dtype=np.int64)
        missing = {"col", "row", "hour", "class", "count"} - set(df.columns)
        if missing:
            raise InputDataError(f"cube file {path} lacks columns {sorted(missing)}")
        bad = ~df["class"].isin(ACTIVITY_CLASSES)
        if bad.any():
            raise InputDataError(f"cube file {path} has non-activity classes")
        ci = _CODE_TO_INDEX[df["class"].to_numpy()]
        keys = KeyCodec(spec).encode(df["col"].to_numpy(), df["row"].to_numpy(), df["hour"].to_numpy(), ci)
        order = np.argsort(keys, kind="stable")
        return cls.from_keys(spec, keys[order], df["count"].to_numpy()[order])


def ping_keys(pings, raster: LandUseRaster, spec: GridSpec):
    """Cube keys and devices for the pings that land on an activity class."""
    x = pings["x"].astype(np.float64)
    y = pings["y"].astype(np.float64)
    codes = raster.classify_points(x, y)
    ci = _CODE_TO_INDEX[codes]
    cols, rows = coarse_indices(spec, x, y)
    ok = (ci >= 0) & (cols >= 0)
    keys = KeyCodec(spec).encode(cols[ok], rows[ok], pings["hour"][ok], ci[ok])
    return keys, pings["device"][ok]


def _count(spec, pairs):
    if len(pairs) == 0:
        return ActivityCube.empty(spec)
    keys, counts = np.unique(pairs["key"], return_counts=True)
    return ActivityCube.from_keys(spec, keys, counts)


def _split(n, parts):
    bounds = np.linspace(0, n, parts + 1).astype(np.int64)
    return list(zip(bounds[:-1], bounds[1:]))


def build_cube(pings, raster: LandUseRaster, spec: GridSpec, *, partitions: int = 1, threads: int | None = None,
               memory_cap: int | None = None, spill_buckets: int = 16) -> ActivityCube:
    """Count distinct devices per (cell, hour, class).

    ``partitions`` splits the ping array into contiguous shards counted
    independently and merged. When ``memory_cap`` (bytes) is smaller than
    the pair buffer would be, pairs are spilled to per-bucket files on disk
    and each bucket is merge-counted on its own.
    """
    if raster.spec != spec:
        raise SpecMismatch(f"raster grid {raster.spec} does not match cube grid {spec}")
    partitions = max(1, int(partitions))
    threads = threads or partitions
    chunks = _split(len(pings), partitions)

    def shard_pairs(bounds):
        lo, hi = bounds
        keys, devs = ping_keys(pings[lo:hi], raster, spec)
        return distinct_pairs(keys, devs)

    # rough resident estimate: pairs plus sort temporaries
    if memory_cap is not None and len(pings) * PAIR_DTYPE.itemsize * 3 > memory_cap:
        return _build_spilled(pings, raster, spec, chunks, memory_cap, spill_buckets)

    if threads > 1 and partitions > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(shard_pairs, chunks))
    else:
        parts = [shard_pairs(c) for c in chunks]
    return _count(spec, merge_pairs(parts))


def _build_spilled(pings, raster, spec, chunks, memory_cap, buckets):
    # pings are streamed in sub-chunks small enough for the cap, and pairs are
    # routed to buckets by key so each bucket can be counted independently
    step = max(1, memory_cap // (PAIR_DTYPE.itemsize * 6))
    results = []
    with tempfile.TemporaryDirectory(prefix="cube-spill-") as tmp:
        paths = [Path(tmp) / f"bucket{b:04d}.bin" for b in range(buckets)]
        handles = [open(p, "wb") for p in paths]
        try:
            for lo, hi in chunks:
                for a in range(lo, hi, step):
                    b = min(hi, a + step)
                    keys, devs = ping_keys(pings[a:b], raster, spec)
                    pairs = distinct_pairs(keys, devs)
                    bucket = pairs["key"] % buckets
                    for i in range(buckets):
                        sel = pairs[bucket == i]
                        if len(sel):
                            handles[i].write(sel.tobytes())
        finally:
            for h in handles:
                h.close()
        for p in paths:
            if os.path.getsize(p) == 0:
                continue
            run = np.fromfile(p, dtype=PAIR_DTYPE)
            pairs = distinct_pairs(run["key"], run["device"])
            keys, counts = np.unique(pairs["key"], return_counts=True)
            results.append((keys, counts))
    if not results:
        return ActivityCube.empty(spec)
    keys = np.concatenate([k for k, _ in results])
    counts = np.concatenate([c for _, c in results])
    order = np.argsort(keys, kind="stable")
    return ActivityCube.from_keys(spec, keys[order], counts[order])


# zones -----------------------------------------------------------------------


@dataclass
class ZoneMap:
    """Assignment of coarse cells to zones.

    ``zones`` may list declared zones that own no cell; those raise
    :class:`EmptyZone` when averaged.
    """

    assignment: dict
    zones: list = field(default=None)

    def __post_init__(self):
        declared = set(self.zones or [])
        declared.update(self.assignment.values())
        self.zones = sorted(declared)

    @property
    def zone_sizes(self):
        sizes = dict.fromkeys(self.zones, 0)
        for z in self.assignment.values():
            sizes[z] += 1
        return sizes

    def cell_lookup(self, spec: GridSpec):
        """``[row, col]`` array of zone index (into ``zones``) or -1."""
        index = {z: i for i, z in enumerate(self.zones)}
        grid = np.full((spec.coarse_rows, spec.coarse_cols), -1, dtype=np.int64)
        for (c, r), z in self.assignment.items():
            if 0 <= c < spec.coarse_cols and 0 <= r < spec.coarse_rows:
                grid[r, c] = index[z]
        return grid

    @classmethod
    def read_csv(cls, path):
        df = pd.read_csv(path, dtype={"zone_id": str})
        missing = {"col", "row", "zone_id"} - set(df.columns)
        if missing:
            raise InputDataError(f"zone file {path} lacks columns {sorted(missing)}")
        assignment = {}
        for c, r, z in zip(df["col"].tolist(), df["row"].tolist(), df["zone_id"].tolist()):
            if (c, r) in assignment and assignment[(c, r)] != z:
                raise InputDataError(f"cell ({c}, {r}) assigned to both {assignment[(c, r)]} and {z}")
            assignment[(int(c), int(r))] = str(z)
        return cls(assignment)

    @classmethod
    def from_geojson(cls, data, spec: GridSpec, id_property: str = "zone_id"):
        """Cells are assigned by center containment; later features win overlaps."""
        import json

        if isinstance(data, (str, Path)):
            data = json.loads(Path(data).read_text())
        cc, rr = np.meshgrid(np.arange(spec.coarse_cols), np.arange(spec.coarse_rows))
        cx = spec.origin_x + (cc.ravel() + 0.5) * spec.coarse_cell
        cy = spec.origin_y + (rr.ravel() + 0.5) * spec.coarse_cell
        owner = np.full(cx.shape, None, dtype=object)
        zones = []
        for i, feat in enumerate(data.get("features", [])):
            props = feat.get("properties") or {}
            if id_property not in props:
                raise InputDataError(f"zone feature {i} lacks property {id_property!r}")
            zid = str(props[id_property])
            zones.append(zid)
            geom = feat["geometry"]
            rings = geom["coordinates"] if geom["type"] == "Polygon" else [r for p in geom["coordinates"] for r in p]
            owner[points_in_rings(rings, cx, cy)] = zid
        assignment = {
            (int(c), int(r)): z for c, r, z in zip(cc.ravel(), rr.ravel(), owner) if z is not None
        }
        return cls(assignment, zones)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["col", "row", "zone_id"])
            for (c, r), z in sorted(self.assignment.items(), key=lambda kv: (kv[0][1], kv[0][0])):
                w.writerow([c, r, z])


@dataclass
class ZoneActivity:
    """Mean devices per cell, indexed ``values[zone, hour - hour0, class index]``."""

    zones: list
    hour0: int
    values: np.ndarray

    @property
    def hours(self):
        return np.arange(self.hour0, self.hour0 + self.values.shape[1])

    def zone_index(self, zone):
        try:
            return self.zones.index(zone)
        except ValueError:
            raise KeyError(f"unknown zone {zone!r}") from None

    def value(self, zone, hour, lu_class):
        h = hour - self.hour0
        if not 0 <= h < self.values.shape[1]:
            return 0.0
        return float(self.values[self.zone_index(zone), h, CLASS_INDEX[lu_class]])

    def series(self, zone, lu_class):
        return self.values[self.zone_index(zone), :, CLASS_INDEX[lu_class]]

    def to_frame(self):
        nz, nh, nc = self.values.shape
        z, h, c = np.meshgrid(np.arange(nz), np.arange(nh), np.arange(nc), indexing="ij")
        return pd.DataFrame(
            {
                "zone": np.asarray(self.zones, dtype=object)[z.ravel()],
                "hour": self.hour0 + h.ravel(),
                "class": np.asarray(ACTIVITY_CLASSES)[c.ravel()],
                "value": self.values.ravel(),
            }
        )

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.17g")

    @classmethod
    def read_csv(cls, path):
        df = pd.read_csv(path, dtype={"zone": str}, float_precision="round_trip")
        zones = sorted(df["zone"].unique().tolist())
        h0, h1 = int(df["hour"].min()), int(df["hour"].max())
        values = np.zeros((len(zones), h1 - h0 + 1, len(ACTIVITY_CLASSES)))
        zi = pd.Index(zones).get_indexer(df["zone"])
        ci = _CODE_TO_INDEX[df["class"].to_numpy()]
        values[zi, df["hour"].to_numpy() - h0, ci] = df["value"].to_numpy()
        return cls(zones, h0, values)


def day_aligned_range(hour_range):
    lo, hi = hour_range
    return (lo // 24) * 24, (hi // 24) * 24 + 23


def zone_average(cube: ActivityCube, zones: ZoneMap, hour_range=None) -> ZoneActivity:
    """Average each zone's cell counts over all its cells, empty cells included."""
    sizes = zones.zone_sizes
    empty = [z for z, n in sizes.items() if n == 0]
    if empty:
        raise EmptyZone(f"zones with no grid cells: {', '.join(empty[:5])}")
    if hour_range is None:
        hour_range = day_aligned_range(cube.hour_range or (0, 0))
    h0, h1 = hour_range
    values = np.zeros((len(zones.zones), h1 - h0 + 1, len(ACTIVITY_CLASSES)))
    grid = zones.cell_lookup(cube.spec)
    zi = grid[cube.row, cube.col] if len(cube) else np.empty(0, np.int64)
    ok = (zi >= 0) & (cube.hour >= h0) & (cube.hour <= h1)
    np.add.at(values, (zi[ok], cube.hour[ok] - h0, _CODE_TO_INDEX[cube.lu_class[ok]]), cube.count[ok])
    n = np.array([sizes[z] for z in zones.zones], dtype=np.float64)
    values /= n[:, None, None]
    return ZoneActivity(list(zones.zones), h0, values)


def exposure_density(za: ZoneActivity, zone, hour) -> float:
    """Non-residential plus outdoor mean activity for one zone-hour."""
    return za.value(zone, hour, NON_RESIDENTIAL) + za.value(zone, hour, OUTDOOR)


def proportions(za: ZoneActivity, zone, hour):
    """Class shares ``(res, nonres, outdoor)``, or ``None`` when the hour is empty."""
    vals = [za.value(zone, hour, c) for c in ACTIVITY_CLASSES]
    total = sum(vals)
    if total == 0:
        return None
    return tuple(v / total for v in vals)
