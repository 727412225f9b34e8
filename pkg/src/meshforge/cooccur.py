"""Article-normalized subject-area co-occurrence matrices.

Each article adds a total weight of exactly 1.  With ``M`` distinct
categories present (binary presence, multiplicity ignored) every unordered
pair receives ``1 / C(M, 2)``, stored half in ``[i, j]`` and half in
``[j, i]``.  A mono-category article puts its unit weight on the diagonal.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exports import schema_tag, write_table
from .ontology import SAVector

__all__ = [
    "CoocMatrix",
    "CoocAccumulator",
    "SpanningTree",
    "article_matrix",
    "accumulate",
    "mst_hierarchy",
]


@dataclass
class CoocMatrix:
    level: int
    labels: tuple[str, ...]
    weights: np.ndarray
    article_count: int = 0
    window: tuple[int, int] | None = None
    occurrences: np.ndarray | None = None
    skipped: int = 0

    def __post_init__(self):
        self.labels = tuple(self.labels)
        n = len(self.labels)
        if self.weights.shape != (n, n):
            raise ValueError(f"weights shape {self.weights.shape} does not match {n} labels")
        if self.occurrences is None:
            self.occurrences = np.zeros(n, dtype=np.int64)

    @classmethod
    def zeros(cls, level: int, labels: Sequence[str], window=None) -> "CoocMatrix":
        n = len(labels)
        return cls(level, tuple(labels), np.zeros((n, n)), 0, window)

    @classmethod
    def from_pair_weights(cls, pair: np.ndarray, labels: Sequence[str], level: int = 2, window=None) -> "CoocMatrix":
        """Build from an unordered-pair weight matrix (diagonal = self weight)."""
        pair = np.asarray(pair, dtype=np.float64)
        if not np.allclose(pair, pair.T, rtol=0, atol=0):
            raise ValueError("pair weight matrix must be symmetric")
        w = pair / 2.0
        np.fill_diagonal(w, np.diag(pair))
        return cls(level, tuple(labels), w, int(round(w.sum())), window)

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def pair_weights(self) -> np.ndarray:
        """Unordered-pair view: off-diagonal entries hold the whole pair mass."""
        w = self.weights + self.weights.T
        np.fill_diagonal(w, np.diag(self.weights))
        return w

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def merge(self, other: "CoocMatrix") -> "CoocMatrix":
        if self.level != other.level or self.labels != other.labels:
            raise ValueError("cannot merge matrices with different levels or labels")
        if self.window is None or other.window is None:
            window = self.window or other.window
        else:
            window = (min(self.window[0], other.window[0]), max(self.window[1], other.window[1]))
        return CoocMatrix(
            self.level,
            self.labels,
            self.weights + other.weights,
            self.article_count + other.article_count,
            window,
            self.occurrences + other.occurrences,
            self.skipped + other.skipped,
        )

    __add__ = merge

    def permuted(self, order: Sequence[int]) -> "CoocMatrix":
        order = np.asarray(order)
        return CoocMatrix(
            self.level,
            tuple(self.labels[i] for i in order),
            self.weights[np.ix_(order, order)],
            self.article_count,
            self.window,
            self.occurrences[order],
            self.skipped,
        )

    def metadata(self) -> dict:
        return {
            "schema": schema_tag("cooc_matrix_meta"),
            "level": self.level,
            "window": list(self.window) if self.window else None,
            "article_count": self.article_count,
            "skipped_articles": self.skipped,
            "labels": list(self.labels),
            "diagonal": "mono-category articles",
            "off_diagonal": "pair mass split across symmetric cells",
        }

    def to_csv(self, path: str | os.PathLike, sidecar: bool = True) -> None:
        rows = ([lab, *map(float, row)] for lab, row in zip(self.labels, self.weights))
        write_table(path, "cooc_matrix", ["label", *self.labels], rows)
        if sidecar:
            with open(f"{path}.json", "w", encoding="utf-8") as fh:
                json.dump(self.metadata(), fh, indent=1)
                fh.write("\n")

    def to_edge_list(self, path: str | os.PathLike, include_diagonal: bool = True) -> None:
        w = self.pair_weights()
        n = len(self.labels)
        rows = []
        for i in range(n):
            for j in range(i if include_diagonal else i + 1, n):
                if w[i, j] > 0:
                    rows.append((self.labels[i], self.labels[j], float(w[i, j])))
        write_table(path, "cooc_edges", ["label_a", "label_b", "weight"], rows, delimiter="\t")

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "CoocMatrix":
        from .exports import read_table

        _, header, rows = read_table(path)
        labels = tuple(header[1:])
        weights = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(len(labels), len(labels))
        meta_path = f"{path}.json"
        level, window, count, skipped = 2, None, int(round(weights.sum())), 0
        if os.path.exists(meta_path):
            with open(meta_path, encoding="utf-8") as fh:
                meta = json.load(fh)
            level = meta["level"]
            window = tuple(meta["window"]) if meta["window"] else None
            count = meta["article_count"]
            skipped = meta.get("skipped_articles", 0)
        return cls(level, labels, weights, count, window, None, skipped)


def article_matrix(sa: SAVector | np.ndarray, labels: Sequence[str] | None = None) -> CoocMatrix:
    """Unit-mass co-occurrence contribution of one article.

    Raises ``ValueError`` for an all-zero vector; :func:`accumulate`
    turns that into a skip count.
    """
    if isinstance(sa, SAVector):
        level, labels, counts = sa.level, sa.labels, sa.counts
    else:
        level, counts = 0, np.asarray(sa)
        labels = tuple(labels) if labels is not None else tuple(map(str, range(len(counts))))
    present = np.flatnonzero(counts)
    n = len(counts)
    w = np.zeros((n, n))
    mp = len(present)
    if mp == 0:
        raise ValueError("article has no subject-area support")
    if mp == 1:
        w[present[0], present[0]] = 1.0
    else:
        half = 0.5 / (mp * (mp - 1) / 2)
        w[np.ix_(present, present)] = half
        w[present, present] = 0.0
    occ = (np.asarray(counts) > 0).astype(np.int64)
    return CoocMatrix(level, tuple(labels), w, 1, None, occ)


class CoocAccumulator:
    """Mergeable running sum of article matrices over one label basis."""

    def __init__(self, level: int, labels: Sequence[str], window=None):
        self.level = level
        self.labels = tuple(labels)
        self.window = window
        n = len(self.labels)
        self.weights = np.zeros((n, n))
        self.occurrences = np.zeros(n, dtype=np.int64)
        self.article_count = 0
        self.skipped = 0

    def add(self, sa: SAVector | np.ndarray) -> None:
        counts = sa.counts if isinstance(sa, SAVector) else np.asarray(sa)
        if isinstance(sa, SAVector) and sa.level != self.level:
            raise ValueError(f"level mismatch: vector level {sa.level}, accumulator {self.level}")
        self.add_batch(counts[None, :])

    def add_batch(self, counts: np.ndarray) -> None:
        """Add many articles at once; ``counts`` is (articles, categories)."""
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[1] != len(self.labels):
            raise ValueError(f"expected (n, {len(self.labels)}) counts, got {counts.shape}")
        present = counts > 0
        mp = present.sum(axis=1)
        self.skipped += int((mp == 0).sum())
        self.article_count += int((mp > 0).sum())
        self.occurrences += present.sum(axis=0)
        b = present.astype(np.float64)
        multi = mp >= 2
        if multi.any():
            bm = b[multi]
            k = mp[multi].astype(np.float64)
            pair_w = 1.0 / (k * (k - 1.0) / 2.0)
            off = bm.T @ (bm * (0.5 * pair_w)[:, None])
            np.fill_diagonal(off, 0.0)
            self.weights += off
        mono = mp == 1
        if mono.any():
            self.weights[np.diag_indices_from(self.weights)] += b[mono].sum(axis=0)

    def merge(self, other: "CoocAccumulator") -> "CoocAccumulator":
        if other.labels != self.labels or other.level != self.level:
            raise ValueError("cannot merge accumulators with different bases")
        self.weights += other.weights
        self.occurrences += other.occurrences
        self.article_count += other.article_count
        self.skipped += other.skipped
        return self

    def result(self) -> CoocMatrix:
        return CoocMatrix(
            self.level,
            self.labels,
            self.weights.copy(),
            self.article_count,
            self.window,
            self.occurrences.copy(),
            self.skipped,
        )


def accumulate(
    vectors: Iterable[SAVector],
    level: int,
    labels: Sequence[str],
    window: tuple[int, int] | None = None,
) -> CoocMatrix:
    """Sum the article matrices of a stream of SA vectors."""
    acc = CoocAccumulator(level, labels, window)
    for sa in vectors:
        acc.add(sa)
    return acc.result()


@dataclass
class SpanningTree:
    """Maximum-weight spanning forest; ``edges`` are in Kruskal merge order."""

    edges: list[tuple[str, str, float]]
    isolated: list[str] = field(default_factory=list)

    @property
    def nodes(self) -> set[str]:
        return {x for a, b, _ in self.edges for x in (a, b)}

    def edge_set(self) -> set[frozenset[str]]:
        return {frozenset((a, b)) for a, b, _ in self.edges}


def mst_hierarchy(m: CoocMatrix) -> SpanningTree:
    """Spanning tree maximizing total pair weight (MST under distance 1/weight).

    Equal weights are broken by label order. Labels without any
    off-diagonal weight are returned in ``isolated``.
    """
    n = len(m.labels)
    if n == 0 or not np.any(m.weights):
        raise ValueError("empty co-occurrence matrix")
    w = m.pair_weights()
    labs = m.labels
    cand = [
        (-w[i, j], *sorted((labs[i], labs[j])), i, j)
        for i in range(n)
        for j in range(i + 1, n)
        if w[i, j] > 0
    ]
    cand.sort()
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    edges = []
    for negw, a, b, i, j in cand:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            edges.append((a, b, float(-negw)))
    touched = {x for a, b, _ in edges for x in (a, b)}
    isolated = [lab for lab in labs if lab not in touched]
    return SpanningTree(edges, isolated)
