import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import linkage

from exposure_density import cluster
from exposure_density.errors import BadK, DegenerateInput, EmptyCluster

import oracles


def test_merge_cost_examples():
    assert cluster.merge_cost([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
    assert cluster.merge_cost([[0.0]], [[2.0]]) == 2.0
    with pytest.raises(EmptyCluster):
        cluster.merge_cost(np.empty((0, 2)), [[1.0, 2.0]])


def test_merge_cost_dual_formula():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.normal(size=(rng.integers(1, 6), 4))
        b = rng.normal(2, size=(rng.integers(1, 6), 4))
        direct = cluster.sse(np.vstack([a, b])) - cluster.sse(a) - cluster.sse(b)
        assert cluster.merge_cost(a, b) == pytest.approx(direct, rel=1e-10)


def test_two_points_and_two_pairs():
    d = cluster.ward_linkage([[0.0, 0.0], [3.0, 4.0]])
    assert len(d.merges) == 1 and d.merges[0].cost == pytest.approx(12.5)
    pairs = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]])
    d = cluster.ward_linkage(pairs)
    assert {(m.left, m.right) for m in d.merges[:2]} == {(0, 1), (2, 3)}
    assert d.merges[2].cost == max(m.cost for m in d.merges)
    assert cluster.suggest_k(d, 2, 10) == 2


def test_degenerate_input():
    with pytest.raises(DegenerateInput):
        cluster.ward_linkage([[1.0, 2.0]])
    with pytest.raises(DegenerateInput):
        cluster.ward_linkage([[1.0, np.nan], [0.0, 0.0]])


@pytest.mark.parametrize("seed", range(10))
def test_matches_rescan_oracle(seed):
    x = np.random.default_rng(seed).normal(size=(12, 6))
    d = cluster.ward_linkage(x)
    want = oracles.ward_rescan(x)
    assert [(m.left, m.right, m.size) for m in d.merges] == [(a, b, s) for a, b, _, s in want]
    assert np.allclose(d.costs, [c for _, _, c, _ in want], rtol=1e-9, atol=0)


def test_heights_match_scipy():
    x = np.random.default_rng(4).normal(size=(30, 6))
    ours = cluster.ward_linkage(x).to_linkage_matrix()
    ref = linkage(x, method="ward")
    assert np.allclose(ours[:, 2], ref[:, 2], rtol=1e-9)


def test_tie_break_on_node_ids():
    x = np.array([[0.0], [1.0], [5.0], [6.0]])  # two equal-cost pairs
    d = cluster.ward_linkage(x)
    assert (d.merges[0].left, d.merges[0].right) == (0, 1)
    assert (d.merges[1].left, d.merges[1].right) == (2, 3)


def test_monotone_costs_and_telescoping():
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = rng.normal(size=(15, 6))
        d = cluster.ward_linkage(x)
        assert np.all(np.diff(d.costs) >= -1e-12)
        assert d.costs.sum() == pytest.approx(cluster.sse(x), rel=1e-9)


def test_cut_extremes_labels_and_nesting():
    x = np.random.default_rng(3).normal(size=(14, 3))
    d = cluster.ward_linkage(x)
    assert cluster.cut(d, 14).tolist() == list(range(14))
    assert set(cluster.cut(d, 1).tolist()) == {0}
    with pytest.raises(BadK):
        cluster.cut(d, 0)
    with pytest.raises(BadK):
        cluster.cut(d, 15)
    for k in range(2, 14):
        fine, coarse = cluster.cut(d, k), cluster.cut(d, k - 1)
        assert len(set(fine)) == k
        for lab in set(fine):
            assert len(set(coarse[fine == lab])) == 1
        # labels numbered by smallest member row
        firsts = [np.nonzero(fine == lab)[0][0] for lab in range(k)]
        assert firsts == sorted(firsts)


def test_suggest_k_blobs_and_identical():
    rng = np.random.default_rng(5)
    centers = np.array([[0, 0], [20, 0], [0, 20]])
    x = np.vstack([c + rng.normal(0, 0.5, (8, 2)) for c in centers])
    assert cluster.suggest_k(cluster.ward_linkage(x)) == 3
    same = cluster.ward_linkage(np.ones((12, 3)))
    assert cluster.suggest_k(same, 2, 10) == 2


def test_invariances():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(16, 6))
    d = cluster.ward_linkage(x)
    seq = [(m.left, m.right) for m in d.merges]
    t = cluster.ward_linkage(x + rng.normal(size=6))
    assert [(m.left, m.right) for m in t.merges] == seq
    assert np.allclose(t.costs, d.costs, rtol=1e-9)
    s = cluster.ward_linkage(3.0 * x)
    assert [(m.left, m.right) for m in s.merges] == seq
    assert np.allclose(s.costs, 9 * d.costs, rtol=1e-9)
    perm = rng.permutation(16)
    labels = cluster.cut(d, 4)
    plabels = cluster.cut(cluster.ward_linkage(x[perm]), 4)
    # same partition after undoing the permutation
    for a in range(16):
        for b in range(16):
            assert (labels[perm[a]] == labels[perm[b]]) == (plabels[a] == plabels[b])


def test_serialization():
    x = np.random.default_rng(1).normal(size=(5, 2))
    d = cluster.ward_linkage(x)
    again = cluster.Dendrogram.from_json(d.to_json(["a", "b", "c", "d", "e"]))
    assert again == d
    nwk = d.to_newick(["a", "b", "c", "d", "e"])
    assert nwk.endswith(";") and all(s in nwk for s in "abcde")


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(1, 5), st.integers(0, 10_000))
def test_every_node_referenced_once(n, dim, seed):
    x = np.random.default_rng(seed).normal(size=(n, dim))
    d = cluster.ward_linkage(x)
    kids = [m.left for m in d.merges] + [m.right for m in d.merges]
    assert sorted(kids) == list(range(2 * n - 2))
    assert d.merges[-1].size == n
