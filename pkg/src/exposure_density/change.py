"""Pre/post window reduction into per-zone change vectors.

All changes are change-of-means: each class is averaged over the window's
hours first, then compared. Zones with any zero pre-window denominator are
flagged degenerate instead of imputed.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .cube import CLASS_INDEX, ZoneActivity
from .errors import BadConfig, EmptyWindow, InputDataError
from .raster import ACTIVITY_CLASSES, NON_RESIDENTIAL, OUTDOOR

EPOCH = dt.date(1970, 1, 1)
FEATURES = ("a_res", "a_nonres", "a_out", "p_res", "p_nonres", "p_out")


@dataclass(frozen=True)
class Window:
    """Inclusive range of local calendar dates."""

    start: dt.date
    end: dt.date

    def __post_init__(self):
        if self.start > self.end:
            raise BadConfig(f"window starts after it ends: {self.start} > {self.end}")

    @classmethod
    def parse(cls, text: str) -> "Window":
        """From ``YYYY-MM-DD:YYYY-MM-DD``."""
        try:
            a, b = text.split(":")
            return cls(dt.date.fromisoformat(a.strip()), dt.date.fromisoformat(b.strip()))
        except ValueError as exc:
            raise BadConfig(f"bad window {text!r}, expected START:END dates") from exc

    @property
    def hours(self):
        """Half-open local hour range ``[first, stop)``."""
        first = (self.start - EPOCH).days * 24
        stop = ((self.end - EPOCH).days + 1) * 24
        return first, stop

    @property
    def days(self):
        return (self.end - self.start).days + 1

    def __str__(self):
        return f"{self.start.isoformat()}:{self.end.isoformat()}"


PRE_WINDOW = Window(dt.date(2020, 2, 16), dt.date(2020, 2, 29))
POST_WINDOW = Window(dt.date(2020, 3, 29), dt.date(2020, 4, 11))


def _window_slice(za: ZoneActivity, window: Window):
    first, stop = window.hours
    lo, hi = za.hour0, za.hour0 + za.values.shape[1]
    if first < lo or stop > hi:
        raise EmptyWindow(
            f"window {window} (hours {first}..{stop - 1}) is outside the data range (hours {lo}..{hi - 1})"
        )
    return slice(first - lo, stop - lo)


def window_means(za: ZoneActivity, window: Window) -> np.ndarray:
    """``[zone, class]`` means over every hour of the window."""
    return za.values[:, _window_slice(za, window), :].mean(axis=1)


def window_mean(za: ZoneActivity, zone, lu_class, window: Window) -> float:
    sl = _window_slice(za, window)
    return float(za.values[za.zone_index(zone), sl, CLASS_INDEX[lu_class]].mean())


def _rel(post, pre):
    return (post - pre) / pre if pre != 0 else math.nan


@dataclass
class ChangeVector:
    zone: str
    a_res: float
    a_nonres: float
    a_out: float
    p_res: float
    p_nonres: float
    p_out: float

    @property
    def features(self):
        return np.array([getattr(self, f) for f in FEATURES])

    @property
    def degenerate(self):
        return not np.all(np.isfinite(self.features))


@dataclass
class ExposureChange:
    zone: str
    value: float

    @property
    def undefined(self):
        return not math.isfinite(self.value)


def _change_from_means(zone, pre, post):
    vol = [_rel(b, a) for a, b in zip(pre, post)]
    pre_total, post_total = float(np.sum(pre)), float(np.sum(post))
    if pre_total == 0 or post_total == 0:
        share = [math.nan] * 3
    else:
        share = [_rel(b / post_total, a / pre_total) for a, b in zip(pre, post)]
    return ChangeVector(zone, *vol, *share)


def change_vector(za: ZoneActivity, zone, pre: Window = PRE_WINDOW, post: Window = POST_WINDOW) -> ChangeVector:
    zi = za.zone_index(zone)
    m_pre = window_means(za, pre)[zi]
    m_post = window_means(za, post)[zi]
    return _change_from_means(zone, m_pre.tolist(), m_post.tolist())


def _exposure(means):
    return means[CLASS_INDEX[NON_RESIDENTIAL]] + means[CLASS_INDEX[OUTDOOR]]


def exposure_change(za: ZoneActivity, zone, pre: Window = PRE_WINDOW, post: Window = POST_WINDOW) -> ExposureChange:
    """Relative change in pooled non-residential + outdoor mean activity."""
    zi = za.zone_index(zone)
    a = float(_exposure(window_means(za, pre)[zi]))
    b = float(_exposure(window_means(za, post)[zi]))
    return ExposureChange(zone, _rel(b, a))


def all_changes(za: ZoneActivity, pre: Window = PRE_WINDOW, post: Window = POST_WINDOW) -> pd.DataFrame:
    """One row per zone with the six features, exposure change and degeneracy flag."""
    m_pre = window_means(za, pre)
    m_post = window_means(za, post)
    rows = []
    for zi, zone in enumerate(za.zones):
        cv = _change_from_means(zone, m_pre[zi].tolist(), m_post[zi].tolist())
        ex = _rel(float(_exposure(m_post[zi])), float(_exposure(m_pre[zi])))
        rows.append(
            {
                "zone": zone,
                **{f: getattr(cv, f) for f in FEATURES},
                "exposure_change": ex,
                "degenerate_flag": int(cv.degenerate or not math.isfinite(ex)),
            }
        )
    return pd.DataFrame(rows, columns=["zone", *FEATURES, "exposure_change", "degenerate_flag"])


def write_changes(df: pd.DataFrame, path):
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.17g", na_rep="nan")


def read_changes(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"zone": str}, float_precision="round_trip")
    missing = [c for c in ("zone", *FEATURES, "exposure_change", "degenerate_flag") if c not in df.columns]
    if missing:
        raise InputDataError(f"changes file {path} lacks columns {missing}")
    return df


def window_class_means(za: ZoneActivity, window: Window) -> pd.DataFrame:
    m = window_means(za, window)
    return pd.DataFrame(m, index=za.zones, columns=[f"class_{c}" for c in ACTIVITY_CLASSES])
