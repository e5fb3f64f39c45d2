"""Raw ping parsing, projection and the device/spatial filters.

Timestamps are shifted to a fixed UTC-5 clock with no daylight-saving
change, so every local hour is exactly 3600 s long and the hour index is a
pure function of the UTC instant.
"""
from __future__ import annotations

import gzip
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv
from pandas.api.types import union_categoricals

from .errors import BadConfig, IoFailure, MissingHeader

HEADER = ("device_id", "timestamp", "latitude", "longitude")
EARTH_RADIUS_M = 6_371_000.0
UTC_OFFSET_HOURS = -5

PING_DTYPE = np.dtype([("device", "<u8"), ("hour", "<i8"), ("x", "<f4"), ("y", "<f4")])


@dataclass(frozen=True)
class BoundingBox:
    min_lat: float = 40.49611
    min_lon: float = -74.25558
    max_lat: float = 40.91553
    max_lon: float = -73.70000

    def __post_init__(self):
        if not (self.min_lat < self.max_lat and self.min_lon < self.max_lon):
            raise BadConfig(f"bounding box has min >= max: {self}")

    @classmethod
    def parse(cls, text: str) -> "BoundingBox":
        """From ``minlat,minlon,maxlat,maxlon``."""
        try:
            parts = [float(p) for p in text.split(",")]
        except ValueError as exc:
            raise BadConfig(f"bad --bbox {text!r}") from exc
        if len(parts) != 4:
            raise BadConfig(f"--bbox needs 4 numbers, got {text!r}")
        return cls(*parts)

    def contains(self, lat, lon):
        lat = np.asarray(lat)
        lon = np.asarray(lon)
        return (self.min_lat <= lat) & (lat < self.max_lat) & (self.min_lon <= lon) & (lon < self.max_lon)


@dataclass(frozen=True)
class Projection:
    """Equirectangular projection around a reference latitude."""

    ref_lat: float
    lon0: float
    lat0: float

    @classmethod
    def for_bbox(cls, bbox: BoundingBox) -> "Projection":
        return cls((bbox.min_lat + bbox.max_lat) / 2, bbox.min_lon, bbox.min_lat)

    def forward(self, lon, lat):
        return project(lon, lat, self.ref_lat, self.lon0, self.lat0)

    def inverse(self, x, y):
        return unproject(x, y, self.ref_lat, self.lon0, self.lat0)


def project(lon, lat, ref_lat, lon0, lat0):
    k = EARTH_RADIUS_M * math.pi / 180.0
    x = k * (np.asarray(lon, dtype=np.float64) - lon0) * math.cos(math.radians(ref_lat))
    y = k * (np.asarray(lat, dtype=np.float64) - lat0)
    return x, y


def unproject(x, y, ref_lat, lon0, lat0):
    k = EARTH_RADIUS_M * math.pi / 180.0
    lon = np.asarray(x, dtype=np.float64) / (k * math.cos(math.radians(ref_lat))) + lon0
    lat = np.asarray(y, dtype=np.float64) / k + lat0
    return lon, lat


def local_hour(utc_seconds):
    """Hours since the epoch on the fixed UTC-5 clock."""
    s = np.asarray(utc_seconds, dtype=np.float64)
    return np.floor((s + UTC_OFFSET_HOURS * 3600) / 3600).astype(np.int64)


def local_day(hours):
    return np.floor_divide(np.asarray(hours, dtype=np.int64), 24)


def hash_device(device_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(device_id.encode("utf-8"), digest_size=8).digest(), "little")


def hash_devices(ids) -> np.ndarray:
    """Vectorized :func:`hash_device`; each distinct id is hashed once."""
    codes, uniques = pd.factorize(pd.Series(ids, dtype=object), sort=False)
    hashed = np.fromiter((hash_device(u) for u in uniques), dtype=np.uint64, count=len(uniques))
    return hashed[codes]


# parsing ---------------------------------------------------------------------


def _open(source):
    if hasattr(source, "read"):
        return source, False
    path = Path(source)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoFailure(f"cannot open {path}: {exc}") from exc
    magic = fh.read(2)
    fh.seek(0)
    if magic == b"\x1f\x8b":
        return gzip.GzipFile(fileobj=fh), True
    return fh, True


def _check_header(line: bytes):
    text = line.decode("utf-8", errors="replace").lstrip("﻿").strip()
    names = tuple(p.strip() for p in text.split(","))
    if names != HEADER:
        raise MissingHeader(f"expected header {','.join(HEADER)!r}, got {text[:80]!r}")


def _parse_timestamps(raw: pd.Series) -> np.ndarray:
    secs = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=np.float64)
    todo = np.isnan(secs) & raw.notna().to_numpy()
    if todo.any():
        ts = pd.to_datetime(raw[todo], format="ISO8601", utc=True, errors="coerce")
        ns = ts.to_numpy(dtype="datetime64[ns]").astype(np.int64).astype(np.float64)
        ns[ts.isna().to_numpy()] = np.nan
        secs[todo] = ns / 1e9
    return secs


def _to_float(col: pa.Array) -> np.ndarray:
    try:
        return pc.cast(col, pa.float64()).to_numpy(zero_copy_only=False)
    except (pa.ArrowInvalid, pa.ArrowNotImplementedError):
        return pd.to_numeric(pd.Series(col.to_numpy(zero_copy_only=False)), errors="coerce").to_numpy(np.float64)


def _to_seconds(col: pa.Array) -> np.ndarray:
    try:
        return pc.cast(col, pa.float64()).to_numpy(zero_copy_only=False)
    except (pa.ArrowInvalid, pa.ArrowNotImplementedError):
        raw = pd.Series(col.to_numpy(zero_copy_only=False)).str.strip()
        return _parse_timestamps(raw.where(raw != ""))


def _validate_batch(batch: pa.RecordBatch) -> pd.DataFrame:
    dev = pc.utf8_trim_whitespace(batch.column("device_id"))
    ts = _to_seconds(batch.column("timestamp"))
    lat = _to_float(batch.column("latitude"))
    lon = _to_float(batch.column("longitude"))
    ok = (
        pc.not_equal(dev, "").to_numpy(zero_copy_only=False)
        & np.isfinite(ts)
        & np.isfinite(lat)
        & np.isfinite(lon)
        & (np.abs(lat) <= 90)
        & (np.abs(lon) <= 180)
    )
    idx = np.nonzero(ok)[0]
    dev = pc.dictionary_encode(dev.take(pa.array(idx)))
    return pd.DataFrame(
        {
            "device_id": dev.to_pandas(),
            "timestamp": ts[idx],
            "latitude": lat[idx],
            "longitude": lon[idx],
        }
    )


def _empty_raw() -> pd.DataFrame:
    return pd.DataFrame(
        {
            "device_id": pd.Categorical([]),
            "timestamp": np.empty(0),
            "latitude": np.empty(0),
            "longitude": np.empty(0),
        }
    )


def iter_raw_chunks(source, block_size: int = 32 * 1024**2):
    """Yield ``(raw DataFrame, rejected count)`` per parsed block, in file order.

    ``device_id`` comes back categorical. Rows with the wrong field count,
    unparseable values or out-of-range coordinates are counted as rejected.
    """
    fh, owned = _open(source)
    bad_rows = [0]

    def on_invalid(row):
        bad_rows[0] += 1
        return "skip"

    try:
        header = fh.readline()
        if not header.strip():
            raise MissingHeader("empty input, no header")
        _check_header(header)
        reader = pacsv.open_csv(
            fh,
            read_options=pacsv.ReadOptions(column_names=list(HEADER), block_size=block_size),
            parse_options=pacsv.ParseOptions(invalid_row_handler=on_invalid),
            convert_options=pacsv.ConvertOptions(
                column_types={c: pa.string() for c in HEADER},
                strings_can_be_null=False,
                quoted_strings_can_be_null=False,
            ),
        )
        seen_bad = 0
        for batch in reader:
            good = _validate_batch(batch)
            yield good, batch.num_rows - len(good) + bad_rows[0] - seen_bad
            seen_bad = bad_rows[0]
        if bad_rows[0] > seen_bad:
            yield _empty_raw(), bad_rows[0] - seen_bad
    except (OSError, pa.ArrowInvalid) as exc:
        raise IoFailure(str(exc)) from exc
    finally:
        if owned:
            fh.close()


def parse_pings(source):
    """Parse a ping CSV (plain or gzip) into a raw table plus a rejected-row count.

    Malformed rows are skipped and counted; row order is preserved.
    """
    frames, rejected = [], 0
    for frame, bad in iter_raw_chunks(source):
        frames.append(frame)
        rejected += bad
    if not frames:
        return _empty_raw(), rejected
    devices = union_categoricals([f["device_id"] for f in frames])
    raw = pd.concat([f.drop(columns="device_id") for f in frames], ignore_index=True)
    raw.insert(0, "device_id", devices)
    return raw, rejected


# filters ---------------------------------------------------------------------


def filter_bbox(raw: pd.DataFrame, bbox: BoundingBox) -> pd.DataFrame:
    keep = bbox.contains(raw["latitude"].to_numpy(), raw["longitude"].to_numpy())
    return raw.loc[keep].reset_index(drop=True)


def to_pings(raw: pd.DataFrame, projection: Projection, hasher=hash_devices) -> np.ndarray:
    """Hash ids, convert to the local hour clock and project to meters."""
    out = np.empty(len(raw), dtype=PING_DTYPE)
    ids = raw["device_id"]
    if isinstance(ids.dtype, pd.CategoricalDtype):
        out["device"] = hasher(ids.cat.categories.to_numpy())[ids.cat.codes.to_numpy()]
    else:
        out["device"] = hasher(ids.to_numpy())
    out["hour"] = local_hour(raw["timestamp"].to_numpy())
    x, y = projection.forward(raw["longitude"].to_numpy(), raw["latitude"].to_numpy())
    out["x"] = x
    out["y"] = y
    return out


def _factorize_u64(values):
    uniq, inverse = np.unique(values, return_inverse=True)
    return uniq, inverse.reshape(-1)


def device_day_pairs(pings: np.ndarray) -> np.ndarray:
    """Distinct (device, local day) pairs, sorted."""
    if len(pings) == 0:
        return np.empty(0, dtype=[("device", "<u8"), ("day", "<i8")])
    devs, inv = _factorize_u64(pings["device"])
    days = local_day(pings["hour"])
    d0 = days.min()
    span = int(days.max() - d0) + 1
    packed = np.unique(inv.astype(np.int64) * span + (days - d0))
    out = np.empty(len(packed), dtype=[("device", "<u8"), ("day", "<i8")])
    out["device"] = devs[packed // span]
    out["day"] = packed % span + d0
    return out


def merge_device_days(*pair_sets) -> np.ndarray:
    """Union of per-shard pair sets; merge order does not matter."""
    both = np.concatenate(pair_sets) if pair_sets else np.empty(0, dtype=[("device", "<u8"), ("day", "<i8")])
    return np.unique(both)


def active_day_counts(pairs: np.ndarray):
    """Devices and their number of distinct active days."""
    return np.unique(pairs["device"], return_counts=True)


def filter_active_devices(pings: np.ndarray, min_days: int = 14, pairs=None) -> np.ndarray:
    """Keep every ping of devices active on at least ``min_days`` distinct local dates."""
    if len(pings) == 0:
        return pings
    if pairs is None:
        pairs = device_day_pairs(pings)
    devices, counts = active_day_counts(pairs)
    keep_devices = devices[counts >= min_days]
    pos = np.searchsorted(keep_devices, pings["device"])
    pos = np.minimum(pos, max(len(keep_devices) - 1, 0))
    keep = keep_devices[pos] == pings["device"] if len(keep_devices) else np.zeros(len(pings), bool)
    return pings[keep]


# shards ----------------------------------------------------------------------


def write_shard(pings: np.ndarray, path):
    np.ascontiguousarray(pings, dtype=PING_DTYPE).tofile(path)


def read_shard(path) -> np.ndarray:
    return np.fromfile(path, dtype=PING_DTYPE)


@dataclass
class IngestStats:
    rows_read: int = 0
    rejected: int = 0
    outside_bbox: int = 0
    pings_in_bbox: int = 0
    devices_in_bbox: int = 0
    devices_retained: int = 0
    pings_retained: int = 0
    per_file: dict = field(default_factory=dict)


class _CachedHasher:
    """Device hasher that remembers ids across chunks."""

    def __init__(self):
        self.cache: dict[str, int] = {}

    def __call__(self, ids):
        codes, uniques = pd.factorize(pd.Series(ids, dtype=object), sort=False)
        cache = self.cache
        vals = np.empty(len(uniques), dtype=np.uint64)
        for i, u in enumerate(uniques):
            h = cache.get(u)
            if h is None:
                h = cache[u] = hash_device(u)
            vals[i] = h
        return vals[codes]


def _ingest_file(path, bbox, projection):
    hasher = _CachedHasher()
    parts, read, rejected, outside = [], 0, 0, 0
    for raw, bad in iter_raw_chunks(path):
        read += len(raw) + bad
        rejected += bad
        inside = filter_bbox(raw, bbox)
        outside += len(raw) - len(inside)
        parts.append(to_pings(inside, projection, hasher))
    pings = np.concatenate(parts) if parts else np.empty(0, dtype=PING_DTYPE)
    return pings, read, rejected, outside


def ingest(paths, bbox: BoundingBox | None = None, projection: Projection | None = None,
           min_days: int = 14, threads: int = 1):
    """Parse, project and filter a set of ping files.

    Files are processed in parallel; the device-day maps are merged by set
    union before the activity filter, and shards are concatenated in the
    order given, so output is independent of ``threads``.
    """
    bbox = bbox or BoundingBox()
    projection = projection or Projection.for_bbox(bbox)
    paths = list(paths)
    stats = IngestStats()
    work = lambda p: _ingest_file(p, bbox, projection)  # noqa: E731
    if threads > 1 and len(paths) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, paths))
    else:
        results = [work(p) for p in paths]
    shards = []
    for p, (pings, read, rejected, outside) in zip(paths, results):
        stats.rows_read += read
        stats.rejected += rejected
        stats.outside_bbox += outside
        stats.per_file[str(p)] = {"rows": read, "rejected": rejected, "outside_bbox": outside}
        shards.append(pings)
    pings = np.concatenate(shards) if shards else np.empty(0, dtype=PING_DTYPE)
    stats.pings_in_bbox = len(pings)
    pairs = merge_device_days(*(device_day_pairs(s) for s in shards))
    stats.devices_in_bbox = len(np.unique(pairs["device"]))
    kept = filter_active_devices(pings, min_days, pairs=pairs)
    stats.pings_retained = len(kept)
    stats.devices_retained = len(np.unique(kept["device"])) if len(kept) else 0
    return kept, stats


def ingest_frame(raw: pd.DataFrame, bbox: BoundingBox | None = None, projection: Projection | None = None,
                 min_days: int = 14):
    """In-memory counterpart of :func:`ingest` for an already parsed raw table."""
    bbox = bbox or BoundingBox()
    projection = projection or Projection.for_bbox(bbox)
    stats = IngestStats(rows_read=len(raw))
    inside = filter_bbox(raw, bbox)
    stats.outside_bbox = len(raw) - len(inside)
    pings = to_pings(inside, projection)
    stats.pings_in_bbox = len(pings)
    pairs = device_day_pairs(pings)
    stats.devices_in_bbox = len(np.unique(pairs["device"]))
    kept = filter_active_devices(pings, min_days, pairs=pairs)
    stats.pings_retained = len(kept)
    stats.devices_retained = len(np.unique(kept["device"])) if len(kept) else 0
    return kept, stats
