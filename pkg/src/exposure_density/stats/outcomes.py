"""Correlation, incubation-lag join and counterfactual arithmetic."""
from __future__ import annotations

import datetime as dt

import numpy as np
import pandas as pd

from ..errors import InputDataError, NoOverlap, ZeroVariance

RATE_COLUMNS = ("case_rate", "death_rate", "positivity_rate", "deaths_per_case")

COVARIATE_COLUMNS = (
    "white",
    "black",
    "hispanic",
    "asian",
    "age_25_34",
    "age_over_65",
    "household_size",
    "household_with_children",
    "educational_attainment",
    "no_health_insurance",
    "public_health_insurance",
    "commute_time",
    "median_income",
    "unemployment_rate",
    "owner_occupied_units",
    "one_or_two_family_home",
    "public_housing",
    "residential_area",
    "office_area",
    "commercial_area",
    "hospital",
    "nursing_home_beds",
)
SHARE_COLUMNS = frozenset(COVARIATE_COLUMNS) - {
    "household_size",
    "commute_time",
    "median_income",
    "nursing_home_beds",
}


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputDataError("pearson needs two equal-length vectors")
    if len(x) < 3:
        raise InputDataError("pearson needs at least 3 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise ZeroVariance("pearson correlation undefined for a constant vector")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def read_rates(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"zone": str}, float_precision="round_trip")
    missing = {"zone", "date", *RATE_COLUMNS} - set(df.columns)
    if missing:
        raise InputDataError(f"rates file {path} lacks columns {sorted(missing)}")
    df["date"] = pd.to_datetime(df["date"]).dt.date
    vals = df[list(RATE_COLUMNS)]
    if (vals < 0).any().any() or (df["positivity_rate"] > 1).any():
        raise InputDataError(f"rates file {path} has negative rates or positivity above 1")
    return df


def read_covariates(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"zone": str}, float_precision="round_trip")
    if "zone" not in df.columns:
        raise InputDataError(f"covariates file {path} lacks a zone column")
    for c in SHARE_COLUMNS & set(df.columns):
        v = df[c].dropna()
        if ((v < 0) | (v > 1)).any():
            raise InputDataError(f"covariate {c} has shares outside [0, 1]")
    return df


def lag_join(changes: pd.DataFrame, rates: pd.DataFrame, impact_end: dt.date, lag_days: int = 5):
    """Pair each zone's change row with its rates ``lag_days`` after the impact window.

    Returns the joined table and the list of zones dropped for lack of a
    partner on either side.
    """
    read_date = impact_end + dt.timedelta(days=int(lag_days))
    on_day = rates[rates["date"] == read_date].drop(columns=["date"])
    if on_day.empty:
        raise NoOverlap(f"no rates on read date {read_date.isoformat()}")
    on_day = on_day.drop_duplicates("zone", keep="last")
    joined = changes.merge(on_day, on="zone", how="inner")
    if joined.empty:
        raise NoOverlap(f"no zone has both a change vector and rates on {read_date.isoformat()}")
    dropped = sorted(set(changes["zone"]) ^ set(on_day["zone"]))
    joined.attrs["read_date"] = read_date
    return joined.sort_values("zone", kind="stable").reset_index(drop=True), dropped


def counterfactual_cases(total_cases, pct_per_point, delta_points):
    """Outcomes avoided when a per-point percent effect is applied over ``delta_points``."""
    return total_cases * (pct_per_point / 100.0) * delta_points
