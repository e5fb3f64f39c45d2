"""Command-line driver.

Each subcommand reads documented files, writes documented files plus a run
report, and never leaves partial output behind: results are staged in a
hidden directory and moved into place only after the stage succeeds.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import change, cluster, cube, ingest, raster, synth
from .errors import BadConfig, ConfigError, DegenerateGroup, ExposureError, IoFailure, MissingInput
from .report import RunReport
from .stats import anova, outcomes, regression

log = logging.getLogger("exposure_density")

COMMANDS = ("rasterize", "ingest", "cube", "changes", "cluster", "regress", "synth", "pipeline")

# dest -> (flags, argparse kwargs, built-in default, kind)
# kind: "path" and "paths" are resolved relative to the config file when read from it
OPTIONS = {
    "threads": (("--threads",), {"type": int}, 1, "int"),
    "memory_cap": (("--memory-cap",), {}, None, "bytes"),
    # grid and raster
    "landuse": (("--landuse",), {}, None, "path"),
    "raster": (("--raster",), {}, None, "path"),
    "origin_x": (("--origin-x",), {"type": float}, 0.0, "float"),
    "origin_y": (("--origin-y",), {"type": float}, 0.0, "float"),
    "fine_cell": (("--fine-cell",), {"type": float}, 1.0, "float"),
    "coarse_cell": (("--coarse-cell",), {"type": float}, 250.0, "float"),
    "grid_cols": (("--grid-cols",), {"type": int}, 187, "int"),
    "grid_rows": (("--grid-rows",), {"type": int}, 186, "int"),
    "max_raster_bytes": (("--max-raster-bytes",), {}, raster.DEFAULT_MAX_BYTES, "bytes"),
    "pgm": (("--pgm",), {"action": "store_const", "const": True}, False, "bool"),
    # ingest
    "pings": (("--pings",), {"nargs": "+"}, None, "paths"),
    "bbox": (("--bbox",), {}, None, "str"),
    "min_days": (("--min-days",), {"type": int}, 14, "int"),
    # cube
    "shard": (("--shard",), {}, None, "path"),
    "zones": (("--zones",), {}, None, "path"),
    "zone_property": (("--zone-property",), {}, "zone_id", "str"),
    # changes
    "zone_activity": (("--zone-activity",), {}, None, "path"),
    "pre": (("--pre",), {}, str(change.PRE_WINDOW), "str"),
    "post": (("--post",), {}, str(change.POST_WINDOW), "str"),
    # cluster
    "changes": (("--changes",), {}, None, "path"),
    "k": (("--k",), {"type": int}, 5, "int"),
    "auto_k": (("--auto-k",), {"action": "store_const", "const": True}, False, "bool"),
    "k_max": (("--k-max",), {"type": int}, 10, "int"),
    "standardize": (("--standardize",), {"action": "store_const", "const": True}, False, "bool"),
    "alpha": (("--alpha",), {"type": float}, 0.05, "float"),
    # regress
    "clusters": (("--clusters",), {}, None, "path"),
    "rates": (("--rates",), {}, None, "path"),
    "covariates": (("--covariates",), {}, None, "path"),
    "model": (("--model",), {"nargs": "+"}, None, "paths"),
    "lag": (("--lag",), {"type": int}, 5, "int"),
    # synth
    "seed": (("--seed",), {"type": int}, 0, "int"),
    "synth_zones": (("--zones",), {"type": int}, 20, "int"),
    "regime_map": (("--regime-map",), {}, None, "str"),
    "devices_per_zone": (("--devices-per-zone",), {"type": int}, 1000, "int"),
    "cells_per_zone": (("--cells-per-zone",), {"type": int}, 4, "int"),
    "days": (("--days",), {"type": int}, 14, "int"),
    "gzip": (("--gzip",), {"action": "store_const", "const": True}, False, "bool"),
}

GRID = ("origin_x", "origin_y", "fine_cell", "coarse_cell", "grid_cols", "grid_rows")

STAGE_OPTIONS = {
    "rasterize": ("landuse", *GRID, "max_raster_bytes", "pgm", "threads"),
    "ingest": ("pings", "bbox", "min_days", "threads"),
    "cube": ("shard", "raster", "coarse_cell", "zones", "zone_property", "memory_cap", "threads"),
    "changes": ("zone_activity", "pre", "post"),
    "cluster": ("changes", "k", "auto_k", "k_max", "standardize", "alpha"),
    "regress": ("changes", "clusters", "rates", "covariates", "model", "pre", "post", "lag"),
    "synth": ("seed", "synth_zones", "regime_map", "devices_per_zone", "cells_per_zone", "days", "gzip"),
}
STAGE_OPTIONS["pipeline"] = (
    "landuse", *GRID, "max_raster_bytes", "pgm", "pings", "bbox", "min_days", "zones", "zone_property",
    "memory_cap", "pre", "post", "k", "auto_k", "k_max", "standardize", "alpha", "rates", "covariates",
    "model", "lag", "threads",
)  # fmt: skip

# never echoed so that reports do not depend on the worker count
RUNTIME_ONLY = {"threads"}


# configuration ------------------------------------------------------------------


def _parse_bytes(text):
    if text is None or isinstance(text, int):
        return text
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([kKmMgG]?)[bB]?\s*", str(text))
    if not m:
        raise BadConfig(f"cannot parse byte size {text!r}")
    scale = {"": 1, "k": 1024, "m": 1024**2, "g": 1024**3}[m.group(2).lower()]
    return int(float(m.group(1)) * scale)


def _parse_bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise BadConfig(f"cannot parse boolean {text!r}")


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; relative paths are
    resolved against the file's directory."""
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"config file {path} not found")
    base = path.parent
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise BadConfig(f"{path}:{lineno}: unknown key {key!r}")
        kind = OPTIONS[key][3]
        if kind == "path":
            value = str(base / value) if value else None
        elif kind == "paths":
            value = [str(base / v.strip()) for v in value.split(",") if v.strip()]
        out[key] = value
    return out


def _coerce(key, value):
    kind = OPTIONS[key][3]
    if value is None:
        return None
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            return _parse_bool(value)
        if kind == "bytes":
            return _parse_bytes(value)
        if kind == "paths":
            return [value] if isinstance(value, str) else list(value)
    except ValueError as exc:
        raise BadConfig(f"bad value for {key}: {value!r}") from exc
    return value


def resolve(command, args) -> dict:
    """Merge built-in defaults, the config file and command-line flags (highest)."""
    from_file = read_config(args.config) if getattr(args, "config", None) else {}
    cfg = {}
    for key in STAGE_OPTIONS[command]:
        value = getattr(args, key, None)
        if value is None:
            value = from_file.get(key, OPTIONS[key][2])
        cfg[key] = _coerce(key, value)
    if cfg.get("threads") is not None and cfg["threads"] < 1:
        raise BadConfig("--threads must be at least 1")
    return cfg


def _require(cfg, *keys):
    for key in keys:
        value = cfg.get(key)
        if value is None:
            raise MissingInput(f"no {key.replace('_', '-')} given (flag --{key.replace('_', '-')} or config key {key})")
        for p in value if isinstance(value, list) else [value]:
            if not Path(p).exists():
                raise MissingInput(f"{key.replace('_', '-')} file {p} not found")


def _windows(cfg):
    pre, post = change.Window.parse(cfg["pre"]), change.Window.parse(cfg["post"])
    if not pre.end < post.start:
        raise BadConfig(f"pre window {pre} must end before post window {post} starts")
    return pre, post


def _grid(cfg):
    return raster.GridSpec(*(cfg[k] for k in GRID))


# staging ------------------------------------------------------------------------


class Staging:
    """Collect outputs in a scratch directory next to ``out`` and publish them on success."""

    def __init__(self, out):
        self.out = Path(out)
        self.created = not self.out.exists()
        self.out.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out))

    def path(self, name) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def publish(self):
        for item in sorted(self.dir.iterdir()):
            target = self.out / item.name
            if target.is_dir() and not target.is_symlink():
                shutil.rmtree(target)
            os.replace(item, target)
        self.dir.rmdir()

    def discard(self):
        shutil.rmtree(self.dir, ignore_errors=True)
        if self.created:
            try:
                self.out.rmdir()
            except OSError:
                pass


# stages -------------------------------------------------------------------------


def stage_rasterize(cfg, st: Staging, rep: RunReport):
    _require(cfg, "landuse")
    spec = _grid(cfg)
    layers = raster.layers_from_geojson(Path(cfg["landuse"]))
    t = time.perf_counter()
    lu = raster.rasterize(layers, spec, max_bytes=cfg["max_raster_bytes"], threads=cfg["threads"])
    rep.time("rasterize", time.perf_counter() - t)
    path = st.path("landuse.exr")
    raster.write_raster(lu, path)
    if cfg["pgm"]:
        raster.write_pgm(lu, st.path("landuse.pgm"))
    rep.add("rasterize.layers", len(layers))
    rep.add("rasterize.width", spec.fine_width)
    rep.add("rasterize.height", spec.fine_height)
    for code, n in sorted(lu.class_counts().items()):
        rep.add(f"rasterize.cells_class_{code}", int(n))
    rep.add("rasterize.sha256", lu.digest())
    return path


def stage_ingest(cfg, st: Staging, rep: RunReport):
    _require(cfg, "pings")
    bbox = ingest.BoundingBox.parse(cfg["bbox"]) if cfg["bbox"] else ingest.BoundingBox()
    t = time.perf_counter()
    pings, stats = ingest.ingest(cfg["pings"], bbox=bbox, min_days=cfg["min_days"], threads=cfg["threads"])
    rep.time("ingest", time.perf_counter() - t)
    assert stats.pings_retained <= stats.pings_in_bbox <= stats.rows_read - stats.rejected
    path = st.path("pings.bin")
    ingest.write_shard(pings, path)
    for key in ("rows_read", "rejected", "outside_bbox", "pings_in_bbox", "devices_in_bbox",
                "devices_retained", "pings_retained"):
        rep.add(f"ingest.{key}", getattr(stats, key))
    if stats.rejected:
        rep.note(f"{stats.rejected} malformed ping rows skipped")
    return path


def _load_zones(cfg, spec):
    path = Path(cfg["zones"])
    if path.suffix.lower() in (".geojson", ".json"):
        return cube.ZoneMap.from_geojson(path, spec, id_property=cfg["zone_property"])
    return cube.ZoneMap.read_csv(path)


def stage_cube(cfg, st: Staging, rep: RunReport):
    _require(cfg, "shard", "raster", "zones")
    lu = raster.read_raster(cfg["raster"], coarse_cell=cfg["coarse_cell"])
    spec = lu.spec
    pings = ingest.read_shard(cfg["shard"])
    zones = _load_zones(cfg, spec)
    t = time.perf_counter()
    threads = cfg["threads"]
    ac = cube.build_cube(pings, lu, spec, partitions=threads, threads=threads, memory_cap=cfg["memory_cap"])
    za = cube.zone_average(ac, zones)
    rep.time("cube", time.perf_counter() - t)
    ac.write_csv(st.path("cube.csv"))
    zones.write_csv(st.path("zones.csv"))
    za_path = st.path("zone_activity.csv")
    za.write_csv(za_path)
    rep.add("cube.pings", len(pings))
    rep.add("cube.entries", len(ac))
    rep.add("cube.device_hours", int(ac.count.sum()))
    rep.add("cube.zones", len(zones.zones))
    rep.add("cube.assigned_cells", len(zones.assignment))
    rep.add("cube.first_hour", za.hour0)
    rep.add("cube.hours", za.values.shape[1])
    return za_path


def stage_changes(cfg, st: Staging, rep: RunReport):
    _require(cfg, "zone_activity")
    pre, post = _windows(cfg)
    za = cube.ZoneActivity.read_csv(cfg["zone_activity"])
    df = change.all_changes(za, pre, post)
    path = st.path("changes.csv")
    change.write_changes(df, path)
    degenerate = df.loc[df["degenerate_flag"] == 1, "zone"].tolist()
    rep.add("changes.zones", len(df))
    rep.add("changes.degenerate", len(degenerate))
    for z in degenerate:
        rep.note(f"zone {z} is degenerate (zero pre-window activity) and is excluded downstream")
    return path


def _usable_changes(path, rep, stage):
    df = change.read_changes(path)
    bad = df["degenerate_flag"].astype(int) == 1
    if bad.any():
        rep.note(f"{stage}: {int(bad.sum())} degenerate zone(s) excluded")
    return df[~bad].reset_index(drop=True)


def _group_tests(df, labels, alpha, rep):
    anova_rows, tukey_rows, mean_rows = [], [], []
    ks = sorted(set(labels))
    for k in ks:
        m = labels == k
        mean_rows.append({"cluster": k, "zones": int(m.sum()),
                          **{f: float(df.loc[m, f].mean()) for f in (*change.FEATURES, "exposure_change")}})
    for feat in (*change.FEATURES, "exposure_change"):
        groups = [df.loc[labels == k, feat].to_numpy() for k in ks]
        try:
            res = anova.tukey_hsd(groups, alpha=alpha)
        except DegenerateGroup as exc:
            rep.note(f"ANOVA on {feat} skipped: {exc}")
            continue
        a = res.anova
        anova_rows.append({"feature": feat, "f": a.f, "df_between": a.df_between, "df_within": a.df_within, "p": a.p})
        for row in res.to_rows({i: k for i, k in enumerate(ks)}):
            tukey_rows.append({"feature": feat, **row})
    return pd.DataFrame(mean_rows), pd.DataFrame(anova_rows), pd.DataFrame(tukey_rows)


def _csv(df, path):
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.10g", na_rep="nan")


def stage_cluster(cfg, st: Staging, rep: RunReport):
    _require(cfg, "changes")
    df = _usable_changes(cfg["changes"], rep, "cluster")
    x = df[list(change.FEATURES)].to_numpy(dtype=float)
    if cfg["standardize"]:
        x = cluster.standardize(x)
    dend = cluster.ward_linkage(x)
    k = cluster.suggest_k(dend, 2, cfg["k_max"]) if cfg["auto_k"] else cfg["k"]
    labels = cluster.cut(dend, k) + 1
    zones = df["zone"].astype(str).tolist()
    st.path("dendrogram.json").write_text(dend.to_json(zones) + "\n")
    st.path("dendrogram.nwk").write_text(dend.to_newick(zones) + "\n")
    assign = pd.DataFrame({"zone": zones, "cluster": labels})
    path = st.path("clusters.csv")
    _csv(assign, path)
    means, anova_df, tukey_df = _group_tests(df, labels, cfg["alpha"], rep)
    _csv(means, st.path("cluster_means.csv"))
    _csv(anova_df, st.path("anova.csv"))
    _csv(tukey_df, st.path("tukey.csv"))
    rep.add("cluster.zones", len(zones))
    rep.add("cluster.k", k)
    rep.add("cluster.auto_k", cfg["auto_k"])
    for c, n in zip(*np.unique(labels, return_counts=True)):
        rep.add(f"cluster.size_{c}", int(n))
    return path, dend, zones, labels


DEFAULT_MODEL = "name = bivariate\nresponse = case_rate\nlog = true\nterms = exposure_change\n"


def stage_regress(cfg, st: Staging, rep: RunReport):
    _require(cfg, "changes", "rates", "covariates")
    if cfg["clusters"] is not None:
        _require(cfg, "clusters")
    for p in cfg["model"] or []:
        if not Path(p).exists():
            raise MissingInput(f"model file {p} not found")
    _, post = _windows(cfg)
    changes = _usable_changes(cfg["changes"], rep, "regress")
    rates = outcomes.read_rates(cfg["rates"])
    covs = outcomes.read_covariates(cfg["covariates"])
    joined, dropped = outcomes.lag_join(changes, rates, post.end, cfg["lag"])
    for z in dropped:
        rep.note(f"zone {z} lacks a change vector or rates on the read date and is dropped")
    rows = joined.merge(covs, on="zone", how="inner")
    for z in sorted(set(joined["zone"]) - set(rows["zone"])):
        rep.note(f"zone {z} has no covariate row and is dropped")
    if cfg["clusters"] is not None:
        cl = pd.read_csv(cfg["clusters"], dtype={"zone": str, "cluster": str})
        rows = rows.merge(cl[["zone", "cluster"]], on="zone", how="left")
        missing = rows["cluster"].isna()
        for z in rows.loc[missing, "zone"]:
            rep.note(f"zone {z} has no cluster assignment and is dropped")
        rows = rows[~missing].reset_index(drop=True)
    read_date = joined.attrs["read_date"]
    rep.add("regress.read_date", read_date.isoformat())
    rep.add("regress.zones", len(rows))
    _csv(rows, st.path("joined.csv"))

    corr = []
    for feat in ("exposure_change", *change.FEATURES):
        for rate in outcomes.RATE_COLUMNS:
            try:
                r = outcomes.pearson(rows[feat].to_numpy(float), rows[rate].to_numpy(float))
            except ExposureError as exc:
                rep.note(f"correlation {feat} vs {rate} skipped: {exc}")
                continue
            corr.append({"feature": feat, "outcome": rate, "pearson": r, "n": len(rows)})
    _csv(pd.DataFrame(corr), st.path("correlations.csv"))

    specs = []
    for p in cfg["model"] or []:
        specs.append(regression.parse_model_spec(Path(p).read_text(), name=Path(p).stem))
    if not specs:
        specs.append(regression.parse_model_spec(DEFAULT_MODEL))
        rep.note("no model file given; fitted log(case_rate) on exposure_change")
    results, terms, diag = {}, [], []
    for spec in specs:
        if spec.name in results:
            raise BadConfig(f"two models are named {spec.name!r}")
        res = regression.ols_fit(spec, rows)
        results[spec.name] = res
        tab = res.table()
        tab.insert(0, "model", spec.name)
        if spec.log:
            tab["pct_per_point"] = regression.percent_effect(res.coef, 0.01)
            tab["pct_per_point_approx"] = res.coef
        terms.append(tab)
        diag.append({"model": spec.name, "response": spec.response, "log": spec.log, "robust": spec.robust,
                     "n": res.n, "r2": res.r2, "adj_r2": res.adj_r2, "f": res.f_stat, "f_p": res.f_p,
                     "dropped": res.dropped,
                     "max_vif": max((v for t, v in res.vif.items() if t != regression.INTERCEPT), default=math.nan)})
        rep.add(f"regress.{spec.name}.n", res.n)
        rep.add(f"regress.{spec.name}.r2", res.r2)
        rep.add(f"regress.{spec.name}.dropped", res.dropped)
        if res.dropped:
            rep.note(f"model {spec.name}: {res.dropped} zone(s) dropped (non-positive or missing response)")
    _csv(regression.coefficient_table(results), st.path("coefficients.csv"))
    _csv(pd.concat(terms, ignore_index=True), st.path("regression_terms.csv"))
    _csv(pd.DataFrame(diag), st.path("diagnostics.csv"))
    return rows


def stage_synth(cfg, st: Staging, rep: RunReport):
    regimes = synth.regimes_from_text(cfg["regime_map"], cfg["synth_zones"]) if cfg["regime_map"] else None
    spec = synth.ScenarioSpec(seed=cfg["seed"], zones=cfg["synth_zones"], regimes=regimes,
                              devices_per_zone=cfg["devices_per_zone"], cells_per_zone=cfg["cells_per_zone"],
                              days=cfg["days"])
    city = synth.gen_city(spec)
    truth = synth.planted_truth(spec)
    raw = synth.gen_pings(spec, city)
    pings_name = "pings.csv.gz" if cfg["gzip"] else "pings.csv"
    synth.write_pings_csv(raw, st.path(pings_name))
    st.path("landuse.geojson").write_text(json.dumps(raster.layers_to_geojson(city.layers)) + "\n")
    city.zones.write_csv(st.path("zones.csv"))
    _csv(truth.to_frame(), st.path("truth.csv"))
    rates = synth.gen_rates(spec, truth.exposure)
    rates.to_csv(st.path("rates.csv"), index=False, lineterminator="\n", float_format="%.10g")
    _csv(synth.gen_covariates(spec), st.path("covariates.csv"))
    st.path("model.txt").write_text(DEFAULT_MODEL)
    g = city.grid
    lines = [
        "# generated scenario; run with: exposure-density pipeline --config pipeline.cfg --out <dir>",
        f"pings = {pings_name}",
        "landuse = landuse.geojson",
        "zones = zones.csv",
        "rates = rates.csv",
        "covariates = covariates.csv",
        "model = model.txt",
        f"origin_x = {g.origin_x!r}",
        f"origin_y = {g.origin_y!r}",
        f"fine_cell = {g.fine_cell!r}",
        f"coarse_cell = {g.coarse_cell!r}",
        f"grid_cols = {g.coarse_cols}",
        f"grid_rows = {g.coarse_rows}",
        f"pre = {spec.pre_window}",
        f"post = {spec.post_window}",
        f"min_days = {min(14, spec.days)}",
        f"k = {len(set(spec.regimes))}",
    ]
    st.path("pipeline.cfg").write_text("\n".join(lines) + "\n")
    rep.add("synth.zones", spec.zones)
    rep.add("synth.devices", spec.zones * spec.devices_per_zone)
    rep.add("synth.pings", len(raw))
    rep.add("synth.regimes", sorted(set(spec.regimes)))
    rep.add("synth.grid_cols", g.coarse_cols)
    rep.add("synth.grid_rows", g.coarse_rows)


def _plot_outputs(st: Staging, za_path, changes_path, clusters, regress_rows, dend, dend_zones):
    from . import plotting

    za = cube.ZoneActivity.read_csv(za_path)
    nz, nh, _ = za.values.shape
    hours = za.hours
    stamp = pd.to_datetime(hours * 3600, unit="s").strftime("%Y-%m-%dT%H:00")
    v = za.values
    wide = pd.DataFrame({
        "zone": np.repeat(np.asarray(za.zones, dtype=object), nh),
        "hour": np.tile(hours, nz),
        "local_time": np.tile(np.asarray(stamp), nz),
        "residential": v[:, :, 0].ravel(),
        "non_residential": v[:, :, 1].ravel(),
        "outdoor": v[:, :, 2].ravel(),
        "exposure_density": (v[:, :, 1] + v[:, :, 2]).ravel(),
    })
    _csv(wide, st.path("plots/hourly_series.csv"))
    mean = v.mean(axis=0)
    plotting.hourly_series(hours, {"residential": mean[:, 0], "non_residential": mean[:, 1],
                                   "outdoor": mean[:, 2]}, st.path("plots/hourly_series.png"))

    ch = change.read_changes(changes_path)
    ch = ch.merge(clusters, on="zone", how="left")
    exp = ch[["zone", "exposure_change", "cluster"]]
    _csv(exp, st.path("plots/exposure_change.csv"))
    ok = exp["exposure_change"].notna() & exp["cluster"].notna()
    plotting.exposure_bars(exp.loc[ok, "zone"], exp.loc[ok, "exposure_change"].to_numpy(),
                           st.path("plots/exposure_change.png"), exp.loc[ok, "cluster"].astype(int).to_numpy())
    plotting.dendrogram(dend.to_linkage_matrix(), dend_zones, st.path("plots/dendrogram.png"))
    if regress_rows is not None:
        cols = ["zone", "cluster", "exposure_change", *outcomes.RATE_COLUMNS]
        sc = regress_rows[[c for c in cols if c in regress_rows.columns]]
        _csv(sc, st.path("plots/scatter.csv"))
        plotting.scatter(sc["exposure_change"], sc["case_rate"], st.path("plots/scatter_case_rate.png"),
                         "exposure density change", "case rate per 100,000", logy=True)


def stage_pipeline(cfg, st: Staging, rep: RunReport):
    _require(cfg, "landuse", "pings", "zones")
    for key in ("rates", "covariates"):
        if cfg[key] is not None:
            _require(cfg, key)
    do_regress = cfg["rates"] is not None and cfg["covariates"] is not None
    if not do_regress:
        rep.note("rates or covariates not configured; regression stage skipped")
    _windows(cfg)
    local = dict(cfg)
    local["raster"] = str(stage_rasterize(local, st, rep))
    local["shard"] = str(stage_ingest(local, st, rep))
    local["zone_activity"] = str(stage_cube(local, st, rep))
    local["changes"] = str(stage_changes(local, st, rep))
    clusters_path, dend, dend_zones, _ = stage_cluster(local, st, rep)
    local["clusters"] = str(clusters_path)
    rows = stage_regress(local, st, rep) if do_regress else None
    clusters = pd.read_csv(clusters_path, dtype={"zone": str})
    _plot_outputs(st, local["zone_activity"], local["changes"], clusters, rows, dend, dend_zones)


STAGES = {
    "rasterize": stage_rasterize,
    "ingest": stage_ingest,
    "cube": stage_cube,
    "changes": stage_changes,
    "cluster": stage_cluster,
    "regress": stage_regress,
    "synth": stage_synth,
    "pipeline": stage_pipeline,
}


# entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exposure-density",
        description="Exposure density from mobility pings and land use, with change clustering and outcome models.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "rasterize": "paint land-use GeoJSON into a 1 m class raster",
        "ingest": "parse, project and filter ping CSV files into a binary shard",
        "cube": "count distinct devices per cell, hour and class; average per zone",
        "changes": "pre/post change vectors per zone",
        "cluster": "Ward clustering of change vectors, ANOVA and Tukey tests",
        "regress": "lagged outcome join, correlations and log-OLS models",
        "synth": "generate a synthetic city, ping stream and outcome tables",
        "pipeline": "run every stage and emit plot-ready files",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="flat key=value file; flags override it")
        for key in STAGE_OPTIONS[name]:
            flags, kwargs, default, _ = OPTIONS[key]
            extra = {} if default is None else {"help": f"default {default}"}
            p.add_argument(*flags, dest=key, default=None, **kwargs, **extra)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    staging = None
    try:
        cfg = resolve(args.command, args)
        rep = RunReport(args.command)
        rep.config = {k: v for k, v in cfg.items() if k not in RUNTIME_ONLY}
        staging = Staging(args.out)
        t0 = time.perf_counter()
        log.info("running %s into %s", args.command, args.out)
        STAGES[args.command](cfg, staging, rep)
        rep.time("total", time.perf_counter() - t0)
        rep.time("threads", cfg.get("threads") or 1)
        rep.write(staging.dir)
        staging.publish()
        return 0
    except ExposureError as exc:
        return _fail(staging, type(exc).__name__, exc, exc.exit_code)
    except FileNotFoundError as exc:
        return _fail(staging, MissingInput.__name__, exc, ConfigError.exit_code)
    except (OSError, UnicodeDecodeError) as exc:
        return _fail(staging, IoFailure.__name__, exc, IoFailure.exit_code)


def _fail(staging, name, exc, code):
    if staging is not None:
        staging.discard()
    message = " ".join(str(exc).split())
    print(f"error: {name}: {message}", file=sys.stderr)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
