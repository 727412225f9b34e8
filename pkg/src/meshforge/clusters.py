"""Modularity clustering of co-occurrence networks and cluster continuity.

Networks are built from the unordered-pair view of a :class:`CoocMatrix`.
The diagonal (mono-category mass) enters as self-loops by default: it adds
to node strength and to a community's internal weight, exactly as in the
usual weighted modularity with self-loops.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cooccur import CoocMatrix
from .exports import write_json, write_table

logger = logging.getLogger(__name__)

__all__ = [
    "Clustering",
    "CliqueCatalog",
    "adjacency",
    "modularity",
    "louvain",
    "cluster_size_series",
    "stable_cliques",
    "continuity",
    "continuity_table",
]

DEFAULT_SEED = 42
_EPS = 1e-13


@dataclass
class Clustering:
    assignment: dict[str, int]
    modularity: float
    cluster_sizes: dict[int, int]
    excluded: tuple[str, ...] = ()
    seed: int | None = None
    resolution: float = 1.0
    year: int | None = None

    @property
    def nodes(self) -> list[str]:
        return list(self.assignment)

    def clusters(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = defaultdict(list)
        for node, cid in self.assignment.items():
            out[cid].append(node)
        return {cid: out[cid] for cid in sorted(out)}

    def members(self, cid: int) -> list[str]:
        return [n for n, c in self.assignment.items() if c == cid]

    def partition(self) -> set[frozenset[str]]:
        return {frozenset(v) for v in self.clusters().values()}

    def to_json(self) -> dict:
        return {
            "year": self.year,
            "seed": self.seed,
            "resolution": self.resolution,
            "modularity": self.modularity,
            "excluded": list(self.excluded),
            "clusters": [{"id": cid, "members": mem} for cid, mem in self.clusters().items()],
        }

    @classmethod
    def from_groups(cls, groups: Iterable[Iterable[str]], year: int | None = None) -> "Clustering":
        """Clustering with ids 1..k following the order of ``groups``; modularity is unset (nan)."""
        assignment = {}
        sizes = {}
        for cid, members in enumerate(groups, start=1):
            members = list(members)
            sizes[cid] = len(members)
            for m in members:
                if m in assignment:
                    raise ValueError(f"node {m!r} appears in two groups")
                assignment[m] = cid
        return cls(assignment, float("nan"), sizes, year=year)

    @classmethod
    def from_json(cls, obj: dict) -> "Clustering":
        assignment = {}
        sizes = {}
        for c in obj["clusters"]:
            sizes[c["id"]] = len(c["members"])
            for m in c["members"]:
                assignment[m] = c["id"]
        return cls(
            assignment,
            obj["modularity"],
            sizes,
            tuple(obj.get("excluded", ())),
            obj.get("seed"),
            obj.get("resolution", 1.0),
            obj.get("year"),
        )

    def write(self, path) -> None:
        write_json(path, "clustering", self.to_json())


def adjacency(m: CoocMatrix, diagonal: str = "selfloop") -> tuple[list[str], np.ndarray]:
    """Symmetric adjacency of the non-isolated nodes.

    ``A[i, i]`` holds twice the self-loop weight so that row sums are node
    strengths. ``diagonal="drop"`` ignores mono-category mass entirely.
    """
    if diagonal not in ("selfloop", "drop"):
        raise ValueError(f"diagonal must be 'selfloop' or 'drop', got {diagonal!r}")
    a = m.weights + m.weights.T
    if diagonal == "drop":
        np.fill_diagonal(a, 0.0)
    keep = np.flatnonzero(a.sum(axis=1) > 0)
    return [m.labels[i] for i in keep], a[np.ix_(keep, keep)]


def modularity(a: np.ndarray, communities: Sequence[int], resolution: float = 1.0) -> float:
    """Weighted modularity of a partition of adjacency ``a`` (self-loops doubled)."""
    a = np.asarray(a, dtype=np.float64)
    comm = np.asarray(communities)
    two_m = a.sum()
    if two_m <= 0:
        raise ValueError("graph has no weight")
    k = a.sum(axis=1)
    q = 0.0
    for c in np.unique(comm):
        idx = comm == c
        q += a[np.ix_(idx, idx)].sum() / two_m - resolution * (k[idx].sum() / two_m) ** 2
    return float(q)


def _local_moves(a, k, gamma, rng):
    """One Louvain level on a normalized adjacency (total weight 1)."""
    n = len(a)
    comm = np.arange(n)
    tot = k.copy()
    order = rng.permutation(n)
    any_move = False
    while True:
        moved = 0
        for i in order:
            ci = comm[i]
            row = a[i].copy()
            row[i] = 0.0
            w_to = np.bincount(comm, weights=row, minlength=n)
            tot[ci] -= k[i]
            gain = w_to - gamma * tot * k[i]
            best, best_gain = ci, gain[ci]
            for c in np.flatnonzero(w_to > 0):
                if gain[c] > best_gain + _EPS:
                    best, best_gain = c, gain[c]
            tot[best] += k[i]
            if best != ci:
                comm[i] = best
                moved += 1
        if not moved:
            break
        any_move = True
    _, comm = np.unique(comm, return_inverse=True)
    return comm, any_move


def _canonical_ids(labels, comm, a):
    groups = defaultdict(list)
    for i, c in enumerate(comm):
        groups[c].append(i)
    keyed = []
    for c, idx in groups.items():
        internal = a[np.ix_(idx, idx)].sum()
        keyed.append((-internal, min(labels[i] for i in idx), c))
    keyed.sort()
    return {c: rank for rank, (_, _, c) in enumerate(keyed, start=1)}


def louvain(
    m: CoocMatrix,
    seed: int = DEFAULT_SEED,
    resolution: float = 1.0,
    diagonal: str = "selfloop",
    year: int | None = None,
) -> Clustering:
    """Louvain modularity maximization (local moves + aggregation).

    Node visit order is a seeded shuffle, so results are deterministic for
    a given seed. Nodes with zero strength are excluded and listed in
    ``Clustering.excluded``. Cluster ids run from 1 in order of decreasing
    internal weight, ties broken by smallest member label.
    """
    labels, a = adjacency(m, diagonal)
    if not labels:
        raise ValueError("co-occurrence matrix has no weight")
    excluded = tuple(lab for lab in m.labels if lab not in set(labels))
    if excluded:
        logger.info("excluding %d zero-weight nodes: %s", len(excluded), ", ".join(excluded))
    rng = np.random.default_rng(seed)
    two_m = a.sum()
    g = a / two_m
    node_comm = np.arange(len(labels))
    while True:
        k = g.sum(axis=1)
        comm, moved = _local_moves(g, k, resolution, rng)
        if not moved:
            break
        node_comm = comm[node_comm]
        p = np.zeros((len(g), comm.max() + 1))
        p[np.arange(len(g)), comm] = 1.0
        g = p.T @ g @ p
        if len(g) == 1:
            break
    q = modularity(a, node_comm, resolution)
    q_single = modularity(a, np.zeros(len(labels), dtype=int), resolution)
    if q < q_single:
        node_comm = np.zeros(len(labels), dtype=int)
        q = q_single
    ids = _canonical_ids(labels, node_comm, a)
    assignment = {lab: ids[c] for lab, c in zip(labels, node_comm)}
    sizes: dict[int, int] = defaultdict(int)
    for cid in assignment.values():
        sizes[cid] += 1
    return Clustering(assignment, q, dict(sorted(sizes.items())), excluded, seed, resolution, year)


def cluster_size_series(clusterings: Mapping[int, Clustering]) -> list[tuple[int, int, int]]:
    """Rows of (year, cluster id, size), ordered by year then cluster id."""
    return [
        (year, cid, size)
        for year in sorted(clusterings)
        for cid, size in sorted(clusterings[year].cluster_sizes.items())
    ]


@dataclass
class CliqueCatalog:
    cliques: list[tuple[str, ...]]
    clique_of: dict[str, int]
    years: tuple[int, ...] = ()

    def label_set(self, clustering: Clustering, node: str) -> frozenset[int]:
        """Ids of the cliques present in ``node``'s cluster (its label set)."""
        cid = clustering.assignment[node]
        return frozenset(
            self.clique_of[x]
            for x, c in clustering.assignment.items()
            if c == cid and x in self.clique_of
        )

    def membership(self, clusterings: Mapping[int, Clustering]) -> dict[int, dict[str, frozenset[int]]]:
        return {
            year: {n: self.label_set(c, n) for n in c.assignment}
            for year, c in sorted(clusterings.items())
        }

    def to_json(self) -> dict:
        return {
            "years": list(self.years),
            "cliques": [{"id": i, "members": list(c)} for i, c in enumerate(self.cliques)],
        }


def stable_cliques(clusterings: Mapping[int, Clustering], years: Iterable[int] | None = None) -> CliqueCatalog:
    """Common refinement of the yearly partitions.

    Two nodes share a clique iff, in every analyzed year, they are either
    both absent or both present in the same cluster. Clique ids follow the
    order of each clique's smallest member label.
    """
    years = tuple(sorted(clusterings if years is None else years))
    if not years:
        raise ValueError("no clusterings given")
    nodes = sorted({n for y in years for n in clusterings[y].assignment})
    groups: dict[tuple, list[str]] = defaultdict(list)
    for node in nodes:
        sig = tuple(clusterings[y].assignment.get(node) for y in years)
        groups[sig].append(node)
    cliques = sorted((tuple(v) for v in groups.values()), key=lambda c: c[0])
    clique_of = {n: i for i, c in enumerate(cliques) for n in c}
    return CliqueCatalog(cliques, clique_of, years)


def continuity(catalog: CliqueCatalog, clustering_t: Clustering, clustering_next: Clustering, node: str) -> float:
    """Jaccard distance between a node's clique label sets in two years.

    Raises ``KeyError`` when the node is absent from either clustering.
    """
    if node not in clustering_t.assignment or node not in clustering_next.assignment:
        raise KeyError(f"node {node!r} absent from one of the clusterings")
    q0 = catalog.label_set(clustering_t, node)
    q1 = catalog.label_set(clustering_next, node)
    union = q0 | q1
    if not union:
        return 0.0
    # one division keeps simple ratios such as 2/3 exact
    return (len(union) - len(q0 & q1)) / len(union)


@dataclass
class ContinuityResult:
    rows: list[tuple[int, str, float]]
    histogram: list[tuple[int, int, int, int]]
    skipped: int = 0

    def write(self, rows_path, hist_path) -> None:
        write_table(rows_path, "continuity", ["year", "node", "delta_j"], self.rows)
        write_table(hist_path, "continuity_hist", ["year", "zero", "partial", "one"], self.histogram)


def continuity_table(catalog: CliqueCatalog, clusterings: Mapping[int, Clustering]) -> ContinuityResult:
    """ΔJ for every node between consecutive analyzed years.

    Rows are keyed by the later year of each transition. Nodes missing
    from either year are skipped and counted.
    """
    years = sorted(clusterings)
    rows, hist, skipped = [], [], 0
    for y0, y1 in zip(years, years[1:]):
        c0, c1 = clusterings[y0], clusterings[y1]
        counts = [0, 0, 0]
        for node in sorted(set(c0.assignment) | set(c1.assignment)):
            try:
                dj = continuity(catalog, c0, c1, node)
            except KeyError:
                skipped += 1
                continue
            rows.append((y1, node, dj))
            counts[0 if dj == 0 else 2 if dj == 1 else 1] += 1
        hist.append((y1, *counts))
    return ContinuityResult(rows, hist, skipped)
