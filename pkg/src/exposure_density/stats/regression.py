"""OLS with classical standard errors, design building and VIF screening."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from ..errors import BadConfig, InputDataError, InsufficientRows, RankDeficient
from .anova import f_sf

INTERCEPT = "const"


@dataclass
class RegressionResult:
    terms: list
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r2: float
    adj_r2: float
    f_stat: float
    f_p: float
    n: int
    df_resid: int
    fitted: np.ndarray
    residuals: np.ndarray
    vif: dict = field(default_factory=dict)
    dropped: int = 0
    robust: bool = False

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "term": self.terms,
                "coef": self.coef,
                "se": self.se,
                "t": self.t,
                "p": self.p,
                "vif": [self.vif.get(t, np.nan) for t in self.terms],
            }
        )

    def __getitem__(self, term):
        return float(self.coef[self.terms.index(term)])

    def se_of(self, term):
        return float(self.se[self.terms.index(term)])


def _qr_checked(X, names):
    q, r = np.linalg.qr(X)
    d = np.abs(np.diag(r))
    tol = max(X.shape) * np.finfo(float).eps * (d.max() if d.size else 0.0)
    scale = np.linalg.norm(X, axis=0)
    for j in range(X.shape[1]):
        if d[j] <= tol or d[j] <= 1e-10 * max(scale[j], 1e-300):
            raise RankDeficient(f"design matrix is rank deficient at column {names[j]!r}", column=names[j])
    return q, r


def ols(X, y, names=None, robust: bool = False) -> RegressionResult:
    """Least squares through a Householder QR of ``X``.

    ``X`` must already carry its intercept column (the first column is
    treated as the intercept when computing R-squared and the F test).
    ``robust`` switches to HC1 sandwich errors.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if n <= p:
        raise InsufficientRows(f"{n} rows for {p} coefficients")
    q, r = _qr_checked(X, names)
    beta = np.linalg.solve(r, q.T @ y)
    fitted = X @ beta
    resid = y - fitted
    df = n - p
    rss = float(resid @ resid)
    sigma2 = rss / df
    r_inv = np.linalg.solve(r, np.eye(p))
    xtx_inv = r_inv @ r_inv.T
    if robust:
        meat = (X * resid[:, None] ** 2).T @ X
        cov = xtx_inv @ meat @ xtx_inv * n / df
    else:
        cov = xtx_inv * sigma2
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.copysign(np.inf, beta))
    pvals = 2 * special.stdtr(df, -np.abs(t))
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - rss / tss if tss > 0 else np.nan
    adj = 1.0 - (1 - r2) * (n - 1) / df if tss > 0 else np.nan
    if p > 1 and tss > 0:
        f = (r2 / (p - 1)) / ((1 - r2) / df) if r2 < 1 else np.inf
        fp = f_sf(f, p - 1, df)
    else:
        f, fp = np.nan, np.nan
    return RegressionResult(
        names, beta, se, t, pvals, r2, adj, float(f), float(fp), n, df, fitted, resid, robust=robust
    )


def vif(X, names=None) -> dict:
    """Variance inflation factor of every non-intercept column.

    Uses the diagonal of the inverse correlation matrix of the regressors,
    which equals ``1 / (1 - R2_j)`` of the auxiliary regressions when the
    design has an intercept.
    """
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    _qr_checked(X, names)
    const = [j for j in range(p) if np.all(X[:, j] == X[0, j])]
    if len(const) != 1:
        raise BadConfig("VIF needs exactly one intercept column")
    cols = [j for j in range(p) if j not in const]
    if len(cols) < 2:
        return {names[j]: 1.0 for j in cols}
    Z = X[:, cols] - X[:, cols].mean(axis=0)
    Z /= np.linalg.norm(Z, axis=0)
    _, r = np.linalg.qr(Z)
    r_inv = np.linalg.solve(r, np.eye(len(cols)))
    diag = (r_inv**2).sum(axis=1)
    return {names[j]: float(v) for j, v in zip(cols, diag)}


# model specification -----------------------------------------------------------


@dataclass
class DesignSpec:
    """Response, regressors and cluster coding for one model.

    ``terms`` may contain covariate names, ``cluster`` (all cluster dummies
    except the reference), ``clusterK`` (one dummy) or a group name from
    ``groups``. ``interactions`` are pairs whose product becomes a column.
    """

    response: str
    log: bool = True
    terms: list = field(default_factory=list)
    interactions: list = field(default_factory=list)
    reference: str | None = None
    groups: dict = field(default_factory=dict)
    robust: bool = False
    name: str = "model"

    def __post_init__(self):
        seen = set()
        for t in [*self.terms, *(f"{a}*{b}" for a, b in self.interactions)]:
            if t in seen:
                raise BadConfig(f"duplicate term {t!r}")
            seen.add(t)


_LINE = re.compile(r"^\s*([A-Za-z_][\w ]*?)\s*[=:]\s*(.*?)\s*$")


def parse_model_spec(text: str, name: str = "model") -> DesignSpec:
    """Parse the ``key = value`` model file format.

    Keys: ``response``, ``log``, ``terms``, ``interactions``, ``reference``,
    ``robust`` and ``group <name>`` (comma-separated cluster ids).
    """
    kw = {"name": name, "terms": [], "interactions": [], "groups": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if not m:
            raise BadConfig(f"model spec line {lineno}: cannot parse {raw!r}")
        key, value = m.group(1).strip(), m.group(2)
        items = [v.strip() for v in value.split(",") if v.strip()]
        if key == "response":
            kw["response"] = value.strip()
        elif key == "log":
            kw["log"] = value.strip().lower() in ("1", "true", "yes", "on")
        elif key == "robust":
            kw["robust"] = value.strip().lower() in ("1", "true", "yes", "on")
        elif key == "terms":
            kw["terms"] += items
        elif key == "interactions":
            for it in items:
                parts = [p.strip() for p in it.split("*")]
                if len(parts) != 2 or not all(parts):
                    raise BadConfig(f"model spec line {lineno}: interaction {it!r} must be a*b")
                kw["interactions"].append(tuple(parts))
        elif key == "reference":
            kw["reference"] = value.strip()
        elif key.startswith("group "):
            kw["groups"][key.split(None, 1)[1].strip()] = [str(v) for v in items]
        elif key == "name":
            kw["name"] = value.strip()
        else:
            raise BadConfig(f"model spec line {lineno}: unknown key {key!r}")
    if "response" not in kw:
        raise BadConfig("model spec has no response")
    return DesignSpec(**kw)


def _cluster_columns(spec: DesignSpec, clusters: pd.Series):
    """Dummy columns implied by the cluster coding, reference excluded."""
    labels = clusters.astype(str)
    present = sorted(labels.unique(), key=lambda s: (len(s), s))
    grouped = {c for members in spec.groups.values() for c in members}
    ref = spec.reference
    if ref is not None and ref not in present and ref not in spec.groups:
        raise BadConfig(f"reference {ref!r} is neither a cluster nor a group")
    cols = {}
    for g, members in spec.groups.items():
        if g != ref:
            cols[g] = labels.isin(members).astype(float).to_numpy()
    for c in present:
        if c in grouped or c == ref:
            continue
        cols[f"cluster{c}"] = (labels == c).astype(float).to_numpy()
    if ref is None and cols:
        # drop the first level so the intercept stays identified
        cols.pop(next(iter(cols)))
    return cols


def _resolve(term, rows, dummies):
    if term in dummies:
        return dummies[term]
    if term in rows.columns:
        return pd.to_numeric(rows[term], errors="coerce").to_numpy(dtype=np.float64)
    raise InputDataError(f"unknown term {term!r}: not a column, cluster dummy or group")


def build_design(spec: DesignSpec, rows: pd.DataFrame):
    """Design matrix, response vector, column names and dropped-row count."""
    if spec.response not in rows.columns:
        raise InputDataError(f"response {spec.response!r} not in data")
    dummies = _cluster_columns(spec, rows["cluster"]) if "cluster" in rows.columns else {}
    names, cols = [INTERCEPT], [np.ones(len(rows))]
    for term in spec.terms:
        if term == "cluster":
            if not dummies:
                raise InputDataError("term 'cluster' used but data has no cluster column")
            for name, col in dummies.items():
                names.append(name)
                cols.append(col)
        else:
            names.append(term)
            cols.append(_resolve(term, rows, dummies))
    for a, b in spec.interactions:
        names.append(f"{a}*{b}")
        cols.append(_resolve(a, rows, dummies) * _resolve(b, rows, dummies))
    if len(set(names)) != len(names):
        raise BadConfig(f"duplicate design columns in {names}")
    X = np.column_stack(cols)
    y = pd.to_numeric(rows[spec.response], errors="coerce").to_numpy(dtype=np.float64)
    ok = np.isfinite(y) & np.all(np.isfinite(X), axis=1)
    if spec.log:
        ok &= y > 0
    dropped = int((~ok).sum())
    y = np.log(y[ok]) if spec.log else y[ok]
    return X[ok], y, names, dropped, ok


def ols_fit(spec: DesignSpec, rows: pd.DataFrame) -> RegressionResult:
    """Fit a model spec on a zone table, with per-term VIF attached."""
    X, y, names, dropped, _ = build_design(spec, rows)
    res = ols(X, y, names, robust=spec.robust)
    res.dropped = dropped
    if X.shape[1] >= 3:
        res.vif = vif(X, names)
    elif X.shape[1] == 2:
        res.vif = {names[1]: 1.0}
    return res


def percent_effect(beta, delta=1.0):
    """Percent change in the response for a ``delta`` change in a log-model regressor."""
    return 100.0 * (np.exp(np.asarray(beta) * delta) - 1.0)


def stars(p):
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


def coefficient_table(results: dict) -> pd.DataFrame:
    """Side-by-side ``coef(se)stars`` table, one column per model."""
    terms = []
    for res in results.values():
        for t in res.terms:
            if t not in terms:
                terms.append(t)
    out = {"term": terms}
    for name, res in results.items():
        col = []
        for t in terms:
            if t in res.terms:
                i = res.terms.index(t)
                col.append(f"{res.coef[i]:.3f}({res.se[i]:.3f}){stars(res.p[i])}")
            else:
                col.append("")
        out[name] = col
    return pd.DataFrame(out)
