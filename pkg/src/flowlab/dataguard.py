"""Data hygiene: cluster-scoped near-duplicate removal and memorization detection.

Distances are Euclidean. Pixel data is expected on [0, 1] so that the default
similarity threshold 0.15 has its intended meaning.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2

DEFAULT_EPS = 0.15
DEFAULT_T = 10
DEFAULT_TILES = 4


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    cluster: int = -1


# clustering -------------------------------------------------------------------------


def cluster_embeddings(corpus, n_clusters: int, rng: np.random.Generator | int = 0, iters: int = 20) -> np.ndarray:
    """Seeded k-means assignments; empty clusters are refilled with the worst-fit points."""
    x = np.asarray(corpus, dtype=np.float64)
    n = len(x)
    if n_clusters < 1 or n_clusters > n:
        raise ValueError(f"need 1 <= n_clusters <= corpus size ({n}), got {n_clusters}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if n_clusters == 1:
        return np.zeros(n, dtype=np.int64)
    with warnings.catch_warnings():
        # degenerate corpora (repeated points) leave clusters empty; the repair below handles them
        warnings.simplefilter("ignore", UserWarning)
        warnings.simplefilter("ignore", RuntimeWarning)
        centroids, labels = kmeans2(x, n_clusters, iter=iters, minit="++", seed=rng)
    labels = labels.astype(np.int64)
    # repair: move the point farthest from its centroid into each empty cluster
    while True:
        counts = np.bincount(labels, minlength=n_clusters)
        empty = np.flatnonzero(counts == 0)
        if not empty.size:
            break
        err = ((x - centroids[labels]) ** 2).sum(axis=1)
        err[counts[labels] <= 1] = -1.0
        donor = int(np.argmax(err))
        labels[donor] = empty[0]
        centroids[empty[0]] = x[donor]
    return labels


class RangeIndex:
    """Exact range search over a small set of vectors, returning ``(lims, D, I)`` for one query."""

    def __init__(self, vecs):
        self.vecs = np.asarray(vecs, dtype=np.float64)

    def range_search(self, q, thresh: float):
        d = np.sqrt(((self.vecs - np.asarray(q, dtype=np.float64)) ** 2).sum(axis=1))
        hit = np.flatnonzero(d < thresh)
        return np.array([0, len(hit)]), d[hit], hit


def find_cluster_duplicates(vecs, items, thresh: float, index: RangeIndex | None = None) -> set:
    """Duplicate ids within one cluster; the first-encountered member of each group survives."""
    vecs = np.asarray(vecs, dtype=np.float64)
    items = list(items)
    if len(vecs) != len(items):
        raise ValueError(f"vecs ({len(vecs)}) and items ({len(items)}) are not aligned")
    index = index or RangeIndex(vecs)
    dups: set = set()
    for i in range(len(vecs)):
        qid = items[i]
        lims, _, found = index.range_search(vecs[i], thresh)
        if qid in dups:
            continue
        dups.update(items[j] for j in found[lims[0] : lims[1]] if items[j] != qid)
    return dups


def deduplicate(vectors, ids, assignments, thresh: float) -> set:
    """Union of per-cluster duplicate sets."""
    vectors = np.asarray(vectors, dtype=np.float64)
    ids = list(ids)
    assignments = np.asarray(assignments)
    out: set = set()
    for c in np.unique(assignments):
        members = np.flatnonzero(assignments == c)
        out |= find_cluster_duplicates(vectors[members], [ids[i] for i in members], thresh)
    return out


@dataclass(frozen=True)
class DedupRow:
    threshold: float
    before: int
    removed: int

    @property
    def fraction(self) -> float:
        return self.removed / self.before if self.before else 0.0


def dedup_report(before, after_by_threshold: dict) -> list[DedupRow]:
    """Removal counts per threshold, given the kept ids at each threshold."""
    before = set(before)
    rows = []
    for thr in sorted(after_by_threshold):
        after = set(after_by_threshold[thr])
        if not after <= before:
            raise ValueError("after-corpus contains ids absent from the before-corpus")
        rows.append(DedupRow(float(thr), len(before), len(before) - len(after)))
    return rows


def dedup_sweep(vectors, ids, thresholds, n_clusters: int = 1, seed: int = 0) -> list[DedupRow]:
    ids = list(ids)
    if not ids:
        return [DedupRow(float(t), 0, 0) for t in sorted(thresholds)]
    assign = cluster_embeddings(vectors, n_clusters, seed)
    after = {}
    for thr in thresholds:
        dups = deduplicate(vectors, ids, assign, thr)
        after[thr] = [i for i in ids if i not in dups]
    return dedup_report(ids, after)


def write_dedup_csv(rows: list[DedupRow], path, preamble: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if preamble:
            fh.write(preamble)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "before", "removed", "fraction"])
        for r in rows:
            w.writerow([repr(r.threshold), r.before, r.removed, f"{r.fraction:.6f}"])


# memorization -----------------------------------------------------------------------------


def tiled_distance(img_a, img_b, tiles_per_side: int = DEFAULT_TILES) -> float:
    """Maximum over corresponding tiles of the per-tile Euclidean distance."""
    a, b = np.asarray(img_a, dtype=np.float64), np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w, c = a.shape
    k = tiles_per_side
    if h % k or w % k:
        raise ValueError(f"image {h}x{w} is not divisible into {k}x{k} tiles")
    d = (a - b).reshape(k, h // k, k, w // k, c)
    return float(np.sqrt((d * d).sum(axis=(1, 3, 4))).max())


@dataclass
class GenerationGraph:
    nodes: list
    adj: dict
    eps: float

    def degree(self, n) -> int:
        return len(self.adj[n])

    def edges(self) -> list[tuple]:
        return sorted({tuple(sorted((u, v))) for u in self.nodes for v in self.adj[u]})


def build_graph(images, ids, eps: float, tiles_per_side: int = DEFAULT_TILES) -> GenerationGraph:
    ids = list(ids)
    adj = {i: set() for i in ids}
    for p in range(len(ids)):
        for q in range(p + 1, len(ids)):
            if tiled_distance(images[p], images[q], tiles_per_side) < eps:
                adj[ids[p]].add(ids[q])
                adj[ids[q]].add(ids[p])
    return GenerationGraph(ids, adj, eps)


def greedy_clique(graph: GenerationGraph, node) -> list:
    """Grow a clique from ``node``, trying neighbours by descending degree then ascending id."""
    clique = [node]
    for c in sorted(graph.adj[node], key=lambda v: (-graph.degree(v), v)):
        if all(c in graph.adj[m] for m in clique):
            clique.append(c)
    return clique


def maximal_cliques(graph: GenerationGraph):
    """All maximal cliques (Bron-Kerbosch with pivoting), each as a sorted list."""
    out = []

    def expand(r, p, x):
        if not p and not x:
            out.append(sorted(r))
            return
        pivot = max(p | x, key=lambda u: (len(graph.adj[u] & p), u))
        for v in sorted(p - graph.adj[pivot]):
            expand(r | {v}, p & graph.adj[v], x & graph.adj[v])
            p = p - {v}
            x = x | {v}

    expand(set(), set(graph.nodes), set())
    return out


def detect_memorization(
    generations: dict,
    eps: float = DEFAULT_EPS,
    T: int = DEFAULT_T,
    tiles_per_side: int = DEFAULT_TILES,
    search: str = "exact",
) -> set:
    """Ids in any clique of size >= ``T``, one graph per prompt.

    ``generations`` maps prompt -> ``(ids, images)``. With ``search="exact"``
    a node is marked when the largest clique containing it reaches ``T``,
    which makes the result monotone in ``eps``. ``search="greedy"`` grows one
    clique per node instead; it is cheaper but can lose nodes as edges are added.
    """
    if eps <= 0 or T < 2:
        raise ValueError("need eps > 0 and T >= 2")
    if search not in ("exact", "greedy"):
        raise ValueError(f"unknown clique search {search!r}")
    marked: set = set()
    for prompt, (ids, images) in generations.items():
        if len(ids) < 2:
            raise ValueError(f"prompt {prompt!r}: need at least two generations")
        g = build_graph(images, ids, eps, tiles_per_side)
        cliques = maximal_cliques(g) if search == "exact" else [greedy_clique(g, n) for n in g.nodes]
        for clique in cliques:
            if len(clique) >= T:
                marked.update(clique)
    return marked


# corpus I/O ----------------------------------------------------------------------------------


def read_vector_csv(path, leading: int = 1):
    """Rows of ``leading`` string columns followed by floats; returns (keys, matrix).

    The first row is a header. Errors name the offending line.
    """
    keys, rows, width = [], [], None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return keys, np.zeros((0, 0))
        for lineno, row in enumerate(reader, start=2):
            if not row or row[0].startswith("#"):
                continue
            if len(row) <= leading:
                raise CorpusFormatError(f"{path}:{lineno}: expected at least {leading + 1} columns, got {len(row)}")
            try:
                vals = [float(v) for v in row[leading:]]
            except ValueError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise CorpusFormatError(f"{path}:{lineno}: expected {width} values, got {len(vals)}")
            keys.append(tuple(row[:leading]) if leading > 1 else row[0])
            rows.append(vals)
    return keys, np.array(rows, dtype=np.float64).reshape(len(rows), width or 0)


def write_vector_csv(path, keys, vectors, key_names=("id",)) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(key_names) + [f"v{j}" for j in range(vectors.shape[1] if vectors.ndim == 2 else 0)])
        for k, v in zip(keys, vectors):
            w.writerow((list(k) if isinstance(k, tuple) else [k]) + [repr(float(x)) for x in v])
