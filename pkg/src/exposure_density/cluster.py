"""Ward agglomerative clustering of zone change vectors.

Merge costs are the increase in within-cluster sum of squares,
``|A||B| / (|A| + |B|) * ||m_A - m_B||^2``. The linkage keeps a dense
cost matrix and updates it with the Lance-Williams recurrence; ties go
to the lexicographically smallest ``(left, right)`` node pair.

Node ids follow the usual convention: leaves are ``0..n-1`` and the
cluster created by merge ``s`` is ``n + s``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import BadK, DegenerateInput, EmptyCluster


def merge_cost(a, b) -> float:
    """Ward merge cost of two disjoint point sets (rows are points)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0 or a.size == 0 or b.size == 0:
        raise EmptyCluster("merge_cost needs two nonempty clusters")
    na, nb = a.shape[0], b.shape[0]
    d = a.mean(axis=0) - b.mean(axis=0)
    return float(na * nb / (na + nb) * (d @ d))


def sse(points) -> float:
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return float(((p - p.mean(axis=0)) ** 2).sum())


@dataclass
class Merge:
    left: int
    right: int
    cost: float
    size: int


@dataclass
class Dendrogram:
    n: int
    merges: list

    @property
    def costs(self):
        return np.array([m.cost for m in self.merges])

    def to_linkage_matrix(self):
        """scipy-style ``(n-1, 4)`` matrix with heights ``sqrt(2 * cost)``."""
        return np.array([[m.left, m.right, np.sqrt(2 * m.cost), m.size] for m in self.merges], dtype=float)

    def to_json(self, labels=None):
        payload = {
            "n": self.n,
            "labels": list(labels) if labels is not None else None,
            "merges": [
                {"left": m.left, "right": m.right, "cost": m.cost, "size": m.size} for m in self.merges
            ],
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["n"], [Merge(m["left"], m["right"], m["cost"], m["size"]) for m in d["merges"]])

    def to_newick(self, labels=None):
        labels = [str(i) for i in range(self.n)] if labels is None else [str(x) for x in labels]
        text = {i: _newick_label(labels[i]) for i in range(self.n)}
        height = {i: 0.0 for i in range(self.n)}
        for s, m in enumerate(self.merges):
            node = self.n + s
            h = float(np.sqrt(2 * m.cost))
            text[node] = f"({text[m.left]}:{h - height[m.left]:.10g},{text[m.right]}:{h - height[m.right]:.10g})"
            height[node] = h
            del text[m.left], text[m.right]
        return text[2 * self.n - 2] + ";" if self.merges else text[0] + ";"


def _newick_label(s):
    if any(ch in s for ch in " ():,;[]'"):
        return "'" + s.replace("'", "''") + "'"
    return s


def ward_linkage(x) -> Dendrogram:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateInput("ward linkage needs at least 2 observations")
    if not np.all(np.isfinite(x)):
        raise DegenerateInput("feature matrix has non-finite entries")
    n = x.shape[0]
    # slot i holds the node currently occupying original position i
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    cost = 0.5 * sq
    np.fill_diagonal(cost, np.inf)
    node = np.arange(n)
    size = np.ones(n)
    alive = np.ones(n, dtype=bool)
    merges = []
    for step in range(n - 1):
        live = np.nonzero(alive)[0]
        sub = cost[np.ix_(live, live)]
        best = sub.min()
        ii, jj = np.nonzero(sub == best)
        # tie-break on node ids, not slots
        pairs = sorted(
            (min(node[live[i]], node[live[j]]), max(node[live[i]], node[live[j]]), live[i], live[j])
            for i, j in zip(ii.tolist(), jj.tolist())
        )
        left, right, si, sj = pairs[0]
        a, b = (si, sj) if node[si] == left else (sj, si)
        na, nb = size[a], size[b]
        merges.append(Merge(int(left), int(right), float(best), int(na + nb)))
        # Lance-Williams update into slot a
        nk = size[live]
        new = ((nk + na) * cost[a, live] + (nk + nb) * cost[b, live] - nk * best) / (nk + na + nb)
        cost[a, live] = new
        cost[live, a] = new
        cost[a, a] = np.inf
        alive[b] = False
        cost[b, :] = np.inf
        cost[:, b] = np.inf
        size[a] = na + nb
        node[a] = n + step
    return Dendrogram(n, merges)


def cut(d: Dendrogram, k: int) -> np.ndarray:
    """Labels for ``k`` clusters, numbered by each cluster's smallest member row."""
    if not 1 <= k <= d.n:
        raise BadK(f"k={k} outside 1..{d.n}")
    parent = list(range(2 * d.n - 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for s, m in enumerate(d.merges[: d.n - k]):
        node = d.n + s
        parent[find(m.left)] = node
        parent[find(m.right)] = node
    roots = [find(i) for i in range(d.n)]
    relabel = {}
    labels = np.empty(d.n, dtype=np.int64)
    for i, r in enumerate(roots):
        if r not in relabel:
            relabel[r] = len(relabel)
        labels[i] = relabel[r]
    return labels


def suggest_k(d: Dendrogram, k_min: int = 2, k_max: int = 10) -> int:
    """k with the widest jump between the merge that would reduce k clusters to
    k-1 and the merge that produced them; ties go to the smaller k."""
    k_max = min(k_max, d.n - 1)
    k_min = max(1, k_min)
    if k_max < k_min:
        return k_min
    h = d.costs
    best_k, best_gap = k_min, -np.inf
    for k in range(k_min, k_max + 1):
        upper = h[d.n - k]
        lower = h[d.n - k - 1] if d.n - k - 1 >= 0 else 0.0
        gap = upper - lower
        if gap > best_gap:
            best_k, best_gap = k, gap
    return best_k


def standardize(x):
    x = np.asarray(x, dtype=np.float64)
    sd = x.std(axis=0, ddof=1)
    sd[sd == 0] = 1.0
    return (x - x.mean(axis=0)) / sd

