"""One-way ANOVA and Tukey-Kramer post-hoc comparisons.

The studentized range distribution is integrated directly rather than read
from tables:

    P(Q <= q; k, df) = int_0^inf f_df(s) W(q s; k) ds
    W(w; k) = k int phi(z) [Phi(z) - Phi(z - w)]^(k-1) dz

where ``f_df`` is the density of ``sqrt(chi2_df / df)``. Both integrals use
composite Gauss-Legendre rules.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np
from scipy import special
from scipy.optimize import brentq

from ..errors import DegenerateGroup

_Z_LO, _Z_HI = -8.5, 8.5
_Z_PANELS, _S_PANELS, _NODES = 16, 24, 20


@lru_cache(maxsize=None)
def _gauss_legendre(a, b, panels, nodes):
    x, w = np.polynomial.legendre.leggauss(nodes)
    edges = np.linspace(a, b, panels + 1)
    half = (edges[1:] - edges[:-1]) / 2
    mid = (edges[1:] + edges[:-1]) / 2
    pts = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wts = (half[:, None] * w[None, :]).ravel()
    return pts, wts


def _range_cdf_normal(w, k):
    """``W(w; k)``: CDF of the range of ``k`` standard normals, vectorized over ``w``."""
    w = np.asarray(w, dtype=np.float64)
    z, wz = _gauss_legendre(_Z_LO, _Z_HI, _Z_PANELS, _NODES)
    inner = special.ndtr(z) - special.ndtr(z - w[..., None])
    inner = np.clip(inner, 0.0, 1.0)
    vals = k * np.sum(wz * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi) * inner ** (k - 1), axis=-1)
    return np.clip(vals, 0.0, 1.0)


@lru_cache(maxsize=256)
def _scale_rule(df):
    """Nodes and weights of ``f_df(s) ds`` on the bulk of the chi/sqrt(df) density."""
    lo = np.sqrt(special.chdtri(df, 1 - 1e-15) / df)
    hi = np.sqrt(special.chdtri(df, 1e-15) / df)
    s, ws = _gauss_legendre(float(lo), float(hi), _S_PANELS, _NODES)
    log_f = (
        (df / 2) * np.log(df)
        - special.gammaln(df / 2)
        - (df / 2 - 1) * np.log(2)
        + (df - 1) * np.log(s)
        - df * s * s / 2
    )
    return s, ws * np.exp(log_f)


def ptukey(q, k, df):
    """CDF of the studentized range for ``k`` means and ``df`` error degrees of freedom."""
    q = np.asarray(q, dtype=np.float64)
    if k < 2:
        raise ValueError("studentized range needs k >= 2")
    out = np.zeros(q.shape)
    pos = q > 0
    if np.isinf(df) or df > 1e5:
        out[pos] = _range_cdf_normal(q[pos], k)
    else:
        s, ws = _scale_rule(float(df))
        out[pos] = np.sum(ws * _range_cdf_normal(q[pos][..., None] * s, k), axis=-1)
    out[np.isposinf(q)] = 1.0
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


def qtukey(p, k, df):
    """Quantile of the studentized range (inverse of :func:`ptukey`)."""
    return brentq(lambda q: ptukey(q, k, df) - p, 1e-8, 200.0, xtol=1e-12)


def tukey_pvalue(q, k, df):
    return float(np.clip(1.0 - ptukey(q, k, df), 0.0, 1.0))


@dataclass
class AnovaResult:
    f: float
    df_between: int
    df_within: int
    p: float
    ss_between: float
    ss_within: float

    @property
    def ms_within(self):
        return self.ss_within / self.df_within


def _check_groups(groups):
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise DegenerateGroup("need at least two groups")
    for i, g in enumerate(groups):
        if len(g) < 2:
            raise DegenerateGroup(f"group {i} has {len(g)} observation(s), need at least 2")
        if not np.all(np.isfinite(g)):
            raise DegenerateGroup(f"group {i} has non-finite values")
    return groups


def f_sf(f, d1, d2):
    """Upper tail of the F distribution via the regularized incomplete beta."""
    if np.isposinf(f):
        return 0.0
    if f <= 0:
        return 1.0
    return float(special.betainc(d2 / 2, d1 / 2, d2 / (d2 + d1 * f)))


def anova_oneway(groups) -> AnovaResult:
    groups = _check_groups(groups)
    allv = np.concatenate(groups)
    grand = allv.mean()
    ssb = float(sum(len(g) * (g.mean() - grand) ** 2 for g in groups))
    ssw = float(sum(((g - g.mean()) ** 2).sum() for g in groups))
    dfb = len(groups) - 1
    dfw = len(allv) - len(groups)
    if ssw == 0:
        f = np.inf if ssb > 0 else 0.0
    else:
        f = (ssb / dfb) / (ssw / dfw)
    return AnovaResult(float(f), dfb, dfw, f_sf(f, dfb, dfw), ssb, ssw)


@dataclass
class PairComparison:
    i: int
    j: int
    mean_diff: float
    q: float
    p_adj: float
    significant: bool


@dataclass
class TukeyResult:
    anova: AnovaResult
    alpha: float
    pairs: list = field(default_factory=list)

    def to_rows(self, names=None):
        names = names or {}
        return [
            {
                "group_i": names.get(p.i, p.i),
                "group_j": names.get(p.j, p.j),
                "mean_diff": p.mean_diff,
                "q": p.q,
                "p_adj": p.p_adj,
                "significant": int(p.significant),
            }
            for p in self.pairs
        ]


def tukey_hsd(groups, alpha: float = 0.05) -> TukeyResult:
    """All-pairs Tukey-Kramer comparisons after a one-way ANOVA."""
    groups = _check_groups(groups)
    res = anova_oneway(groups)
    k = len(groups)
    msw = res.ms_within
    out = TukeyResult(res, alpha)
    for i, j in combinations(range(k), 2):
        gi, gj = groups[i], groups[j]
        diff = float(gj.mean() - gi.mean())
        scale = np.sqrt(msw * (1 / len(gi) + 1 / len(gj)) / 2)
        if scale == 0:
            q = 0.0 if diff == 0 else np.inf
        else:
            q = abs(diff) / scale
        p = tukey_pvalue(q, k, res.df_within)
        out.pairs.append(PairComparison(i, j, diff, float(q), p, p < alpha))
    return out
