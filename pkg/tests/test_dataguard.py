import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab import dataguard as D


def test_algorithm_one_traces():
    assert D.find_cluster_duplicates(np.ones((3, 4)), [1, 2, 3], 0.1) == {2, 3}
    v = np.array([[0.0, 0.0], [0.01, 0.0], [5.0, 5.0], [5.0, 5.01]])
    assert D.find_cluster_duplicates(v, ["a", "a'", "b", "b'"], 0.1) == {"a'", "b'"}
    assert D.find_cluster_duplicates(np.eye(4) * 10, list("wxyz"), 0.5) == set()
    with pytest.raises(ValueError):
        D.find_cluster_duplicates(np.ones((3, 2)), [1, 2], 0.1)


def test_range_search_is_strict():
    idx = D.RangeIndex(np.array([[0.0], [1.0], [2.0]]))
    lims, dist, ids = idx.range_search([0.0], 1.0)
    assert list(ids) == [0] and list(lims) == [0, 1] and list(dist) == [0.0]


@given(st.integers(0, 10_000))
def test_some_copy_always_survives(seed):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(6, 3)) * 10
    group = rng.integers(0, 6, size=30)
    vecs = base[group] + rng.normal(scale=1e-3, size=(30, 3))
    dups = D.find_cluster_duplicates(vecs, list(range(30)), 0.05)
    for g in np.unique(group):
        members = set(np.flatnonzero(group == g).tolist())
        assert members - dups


def planted_corpus(rng, n_unique, frac):
    """Unique points far apart plus near-copies making up ``frac`` of the corpus."""
    n_dup = int(round(frac * n_unique / (1 - frac)))
    base = rng.normal(size=(n_unique, 8)) * 5
    src = rng.integers(0, n_unique, n_dup)
    vecs = np.vstack([base, base[src] + rng.normal(scale=1e-3, size=(n_dup, 8))])
    perm = rng.permutation(len(vecs))
    return vecs[perm], [f"id{i}" for i in range(len(vecs))], n_dup / len(vecs)


@pytest.mark.parametrize("frac", [0.05, 0.2, 0.4])
def test_planted_duplicate_fraction(frac):
    rng = np.random.default_rng(int(frac * 100))
    vecs, ids, truth = planted_corpus(rng, 600, frac)
    rows = D.dedup_sweep(vecs, ids, [0.0, 0.05], n_clusters=8, seed=1)
    assert rows[0].removed == 0
    assert abs(rows[1].fraction - truth) < 0.01


def test_threshold_infinity_keeps_one_per_cluster():
    rng = np.random.default_rng(0)
    vecs = np.vstack([rng.normal(size=(7, 2)), rng.normal(size=(5, 2)) + 100])
    assign = D.cluster_embeddings(vecs, 2, 0)
    assert len(D.deduplicate(vecs, list(range(12)), assign, np.inf)) == 12 - 2


def test_clustering_contract():
    rng = np.random.default_rng(3)
    blobs = np.vstack([rng.normal(size=(50, 4)), rng.normal(size=(50, 4)) + 20])
    lab = D.cluster_embeddings(blobs, 2, 7)
    assert len(set(lab[:50])) == 1 and len(set(lab[50:])) == 1 and lab[0] != lab[50]
    assert np.array_equal(lab, D.cluster_embeddings(blobs, 2, 7))
    assert np.all(D.cluster_embeddings(blobs, 1, 0) == 0)
    with pytest.raises(ValueError):
        D.cluster_embeddings(blobs[:3], 4)
    dup = np.zeros((10, 2))
    assert len(np.unique(D.cluster_embeddings(dup, 3, 0))) == 3


def test_dedup_report():
    rows = D.dedup_report(["a", "b", "c", "d"], {0.5: ["a", "b"], 0.1: ["a", "b", "c"]})
    assert [(r.threshold, r.removed) for r in rows] == [(0.1, 1), (0.5, 2)]
    assert rows[1].fraction == 0.5
    with pytest.raises(ValueError):
        D.dedup_report(["a"], {0.1: ["z"]})
    assert D.dedup_sweep(np.zeros((0, 2)), [], [0.1])[0].before == 0


def test_tiled_distance():
    a = np.zeros((8, 8))
    assert D.tiled_distance(a, a) == 0.0
    b = a.copy()
    b[2:4, 4:6] += 0.3  # one 2x2 tile of a 4x4 tiling
    assert D.tiled_distance(a, b) == pytest.approx(0.3 * math.sqrt(4))
    assert D.tiled_distance(b, a) == D.tiled_distance(a, b)
    with pytest.raises(ValueError):
        D.tiled_distance(np.zeros((6, 6)), np.zeros((6, 6)))
    with pytest.raises(ValueError):
        D.tiled_distance(np.zeros((8, 8)), np.zeros((4, 4)))


@given(st.integers(0, 10_000))
def test_tiled_distance_zero_iff_identical(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((8, 8, 1))
    b = a.copy()
    assert D.tiled_distance(a, b) == 0.0
    b[rng.integers(8), rng.integers(8), 0] += 1e-6
    assert D.tiled_distance(a, b) > 0.0


def planted_clique_instance(rng, n=10, k=4, eps=0.15):
    """``k`` near-copies of one image (pairwise tiled distance < eps) among far-apart others."""
    imgs = [rng.random((8, 8)) for _ in range(n)]
    members = sorted(rng.choice(n, size=k, replace=False).tolist())
    base = rng.random((8, 8))
    for m in members:
        imgs[m] = base + rng.uniform(-1, 1, size=(8, 8)) * eps / 20
    return imgs, members


def test_planted_cliques_on_100_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        imgs, members = planted_clique_instance(rng)
        got = D.detect_memorization({"p": (list(range(10)), imgs)}, eps=0.15, T=3)
        assert got == set(members)


def test_memorization_edge_cases():
    rng = np.random.default_rng(1)
    far = [rng.random((8, 8)) * 10 for _ in range(5)]
    assert D.detect_memorization({"p": (list(range(5)), far)}, 0.15, 3) == set()
    near = [np.zeros((8, 8)), np.zeros((8, 8)) + 0.001, np.ones((8, 8)) * 9]
    assert D.detect_memorization({"p": ([0, 1, 2], near)}, 0.15, 2) == {0, 1}
    with pytest.raises(ValueError):
        D.detect_memorization({"p": ([0], near[:1])}, 0.15, 2)
    with pytest.raises(ValueError):
        D.detect_memorization({"p": ([0, 1], near[:2])}, 0.15, 1)


def test_t_two_marks_every_edge():
    rng = np.random.default_rng(5)
    imgs = [rng.random((8, 8)) * 0.1 for _ in range(8)]
    g = D.build_graph(imgs, list(range(8)), 0.2)
    ends = {v for e in g.edges() for v in e}
    assert D.detect_memorization({"p": (list(range(8)), imgs)}, 0.2, 2) == ends


def test_graphs_are_per_prompt():
    same = [np.zeros((8, 8))] * 3
    gens = {"a": ([0, 1, 2], same), "b": ([3, 4], same[:2])}
    assert D.detect_memorization(gens, 0.15, 3) == {0, 1, 2}


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_marked_set_monotone_in_eps(seed):
    rng = np.random.default_rng(seed)
    centers = rng.random((3, 8, 8))
    imgs = [centers[rng.integers(3)] + rng.normal(scale=0.05, size=(8, 8)) for _ in range(12)]
    prev = set()
    for eps in np.linspace(0.05, 1.5, 15):
        cur = D.detect_memorization({"p": (list(range(12)), imgs)}, float(eps), 3)
        assert prev <= cur
        prev = cur


def test_vector_csv_roundtrip_and_errors(tmp_path):
    p = tmp_path / "c.csv"
    D.write_vector_csv(p, ["a", "b"], np.array([[1.0, 2.0], [3.0, 4.5]]))
    keys, m = D.read_vector_csv(p)
    assert keys == ["a", "b"] and np.array_equal(m, [[1, 2], [3, 4.5]])
    p.write_text("id,v0,v1\na,1,2\nb,3\n")
    with pytest.raises(D.CorpusFormatError, match=":3:"):
        D.read_vector_csv(p)
    p.write_text("id,v0\na,x\n")
    with pytest.raises(D.CorpusFormatError, match=":2:"):
        D.read_vector_csv(p)


def test_greedy_search_is_not_monotone():
    # the instance hypothesis found against greedy expansion; exact search stays monotone
    rng = np.random.default_rng(1311)
    centers = rng.random((3, 8, 8))
    imgs = [centers[rng.integers(3)] + rng.normal(scale=0.05, size=(8, 8)) for _ in range(12)]
    runs = [D.detect_memorization({"p": (list(range(12)), imgs)}, float(e), 3, search="greedy") for e in np.linspace(0.05, 1.5, 15)]
    assert any(not a <= b for a, b in zip(runs, runs[1:]))


@given(st.integers(0, 10_000))
def test_maximal_cliques_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 8
    adj = {i: set() for i in range(n)}
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < 0.5:
                adj[i].add(j)
                adj[j].add(i)
    g = D.GenerationGraph(list(range(n)), adj, 1.0)
    got = sorted(map(tuple, D.maximal_cliques(g)))
    # brute force over subsets
    cliques = [set(c) for k in range(1, n + 1) for c in itertools.combinations(range(n), k) if all(b in adj[a] for a, b in itertools.combinations(c, 2))]
    maximal = sorted(tuple(sorted(c)) for c in cliques if not any(c < o for o in cliques))
    assert got == maximal
