"""Cross-cluster bridge scores, within-cluster ranks and emerging-bridge detection.

For node ``i`` in cluster ``I`` the bridge score is

    beta_i = sum over clusters J != I of W_iJ / W_IJ

where ``W_iJ`` is the pair weight from ``i`` into ``J`` and ``W_IJ`` the
total pair weight between the two clusters.  Cluster pairs with no weight
between them contribute nothing.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .clusters import Clustering
from .cooccur import CoocMatrix
from .exports import write_json, write_table

__all__ = [
    "BridgeScores",
    "BridgeSeries",
    "EmergingBridge",
    "EgoNetwork",
    "bridge_scores",
    "normalized_ranks",
    "ols_trend",
    "bridge_series",
    "moving_average",
    "detect_emerging",
    "ego_subnetwork",
]


@dataclass
class BridgeScores:
    year: int | None
    beta: dict[str, float]
    rank: dict[str, int]
    norm_rank: dict[str, float]
    cluster: dict[str, int]
    cluster_size: dict[str, int]
    single_cluster: bool = False

    def rows(self) -> list[tuple]:
        return [
            (n, self.year, self.beta[n], self.rank[n], self.norm_rank[n], self.cluster[n], self.cluster_size[n])
            for n in self.beta
        ]


def _pair_matrix(m: CoocMatrix, nodes: Sequence[str]) -> np.ndarray:
    idx = [m.index(n) for n in nodes]
    w = m.pair_weights()[np.ix_(idx, idx)]
    np.fill_diagonal(w, 0.0)
    return w


def _raw_beta(m: CoocMatrix, c: Clustering) -> tuple[list[str], np.ndarray]:
    nodes = [n for n in m.labels if n in c.assignment]
    if not nodes:
        raise ValueError("clustering covers none of the matrix nodes")
    w = _pair_matrix(m, nodes)
    cids = sorted(set(c.assignment[n] for n in nodes))
    col = {cid: k for k, cid in enumerate(cids)}
    member = np.zeros((len(nodes), len(cids)))
    own = np.array([col[c.assignment[n]] for n in nodes])
    member[np.arange(len(nodes)), own] = 1.0
    w_node_cluster = w @ member
    w_cluster = member.T @ w_node_cluster
    denom = w_cluster[own]
    foreign = (denom > 0) & (own[:, None] != np.arange(len(cids))[None, :])
    ratio = np.divide(w_node_cluster, denom, out=np.zeros_like(w_node_cluster), where=foreign)
    return nodes, ratio.sum(axis=1)


def normalized_ranks(
    beta: Mapping[str, float], c: Clustering, scope: str = "cluster"
) -> tuple[dict[str, int], dict[str, float]]:
    """Rank nodes by decreasing beta (rank 1 = largest), ties by label.

    With ``scope="cluster"`` ranks run 1..|C_I| inside each cluster and
    are divided by the cluster size; ``scope="global"`` ranks all nodes
    together and divides by the node count.
    """
    if scope not in ("cluster", "global"):
        raise ValueError(f"scope must be 'cluster' or 'global', got {scope!r}")
    groups: dict[int, list[str]] = defaultdict(list)
    for n in beta:
        groups[c.assignment[n] if scope == "cluster" else 0].append(n)
    rank, norm = {}, {}
    for members in groups.values():
        members.sort(key=lambda n: (-beta[n], n))
        for r, n in enumerate(members, start=1):
            rank[n] = r
            norm[n] = r / len(members)
    return {n: rank[n] for n in beta}, {n: norm[n] for n in beta}


def bridge_scores(m: CoocMatrix, c: Clustering, scope: str = "cluster", year: int | None = None) -> BridgeScores:
    """Bridge score, rank and normalized rank for every clustered node."""
    if not c.assignment:
        raise ValueError("empty clustering")
    nodes, beta = _raw_beta(m, c)
    beta_d = {n: float(b) for n, b in zip(nodes, beta)}
    rank, norm = normalized_ranks(beta_d, c, scope)
    sizes = defaultdict(int)
    for n in nodes:
        sizes[c.assignment[n]] += 1
    return BridgeScores(
        year if year is not None else c.year,
        beta_d,
        rank,
        norm,
        {n: c.assignment[n] for n in nodes},
        {n: sizes[c.assignment[n]] for n in nodes},
        single_cluster=len(sizes) < 2,
    )


@dataclass
class TrendResult:
    slope: float
    intercept: float
    p_value: float
    n: int


def ols_trend(x: Sequence[float], y: Sequence[float]) -> TrendResult:
    """Least-squares line with a two-sided t-test on the slope (n - 2 dof)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("need at least 2 points")
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx == 0:
        raise ValueError("x values are all equal")
    slope = ((x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    if n == 2:
        return TrendResult(slope, intercept, math.nan, n)
    resid = y - (intercept + slope * x)
    s2 = (resid**2).sum() / (n - 2)
    se = math.sqrt(s2 / sxx)
    if se == 0:
        p = 1.0 if slope == 0 else 0.0
    else:
        p = float(2 * stats.t.sf(abs(slope / se), n - 2))
    return TrendResult(float(slope), float(intercept), p, n)


@dataclass
class BridgeSeries:
    node: str
    years: list[int] = field(default_factory=list)
    rank: list[int] = field(default_factory=list)
    norm_rank: list[float] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)

    def trend(self, on: str = "rank") -> TrendResult:
        return ols_trend(self.years, self.rank if on == "rank" else self.norm_rank)


def bridge_series(scores: Iterable[BridgeScores]) -> dict[str, BridgeSeries]:
    """Collect per-year scores into per-node series ordered by year."""
    out: dict[str, BridgeSeries] = {}
    for s in sorted(scores, key=lambda s: s.year):
        for n in s.beta:
            ser = out.setdefault(n, BridgeSeries(n))
            if ser.years and s.year <= ser.years[-1]:
                raise ValueError(f"duplicate or unordered year {s.year} for {n}")
            ser.years.append(s.year)
            ser.rank.append(s.rank[n])
            ser.norm_rank.append(s.norm_rank[n])
            ser.beta.append(s.beta[n])
    return dict(sorted(out.items()))


def moving_average(values: Sequence[float], width: int = 5) -> np.ndarray:
    """Centered moving average; the window shrinks at the series ends."""
    v = np.asarray(values, dtype=np.float64)
    h = width // 2
    return np.array([v[max(0, i - h) : i + h + 1].mean() for i in range(len(v))])


@dataclass
class EmergingBridge:
    node: str
    slope: float
    intercept: float
    p_value: float
    direction: str
    years_covered: int
    mean_rank: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def detect_emerging(
    series: Mapping[str, BridgeSeries],
    span: tuple[int, int] = (1970, 2018),
    top_rank: float = 20,
    min_coverage: float = 0.5,
    p_max: float = 0.01,
    min_slope: float = 0.1,
    on: str = "rank",
) -> list[EmergingBridge]:
    """Nodes passing all four emerging-bridge criteria.

    1. mean within-cluster rank <= ``top_rank``;
    2. series length >= ``min_coverage`` x the number of years in ``span``;
    3. OLS slope p-value < ``p_max``;
    4. |slope| > ``min_slope`` (per year, on raw rank unless ``on="norm_rank"``).

    A negative slope means the rank number falls, i.e. the node becomes a
    more prominent bridge ("rising").
    """
    span_years = span[1] - span[0] + 1
    found = []
    for node, ser in sorted(series.items()):
        n = len(ser.years)
        if n < 2 or n < min_coverage * span_years:
            continue
        mean_rank = float(np.mean(ser.rank))
        if mean_rank > top_rank:
            continue
        t = ser.trend(on)
        if not (t.p_value < p_max) or not abs(t.slope) > min_slope:
            continue
        found.append(
            EmergingBridge(
                node,
                t.slope,
                t.intercept,
                t.p_value,
                "rising" if t.slope < 0 else "declining",
                n,
                mean_rank,
            )
        )
    return found


def write_bridge_series(path, scores: Iterable[BridgeScores]) -> None:
    rows = []
    for s in sorted(scores, key=lambda s: s.year):
        rows.extend(sorted(s.rows()))
    write_table(
        path,
        "bridge_series",
        ["node", "year", "beta", "rank", "norm_rank", "cluster_id", "cluster_size"],
        rows,
    )


def write_emerging(path, found: Sequence[EmergingBridge], criteria: dict) -> None:
    write_json(path, "emerging_bridges", {"criteria": criteria, "bridges": [b.to_json() for b in found]})


@dataclass
class EgoNetwork:
    ego: str
    neighbors: list[str]
    weights: list[float]
    clusters: list[int | None]
    neighbor_matrix: np.ndarray
    ego_cluster: int | None = None

    def to_node_link(self, branch_of=lambda label: label[0]) -> dict:
        nodes = [{"id": self.ego, "ego": True, "cluster": self.ego_cluster, "branch": branch_of(self.ego)}]
        nodes += [
            {"id": j, "weight": w, "cluster": c, "branch": branch_of(j)}
            for j, w, c in zip(self.neighbors, self.weights, self.clusters)
        ]
        links = [{"source": self.ego, "target": j, "weight": w} for j, w in zip(self.neighbors, self.weights)]
        k = len(self.neighbors)
        for a in range(k):
            for b in range(a + 1, k):
                if self.neighbor_matrix[a, b] > 0:
                    links.append(
                        {
                            "source": self.neighbors[a],
                            "target": self.neighbors[b],
                            "weight": float(self.neighbor_matrix[a, b]),
                        }
                    )
        return {"directed": False, "nodes": nodes, "links": links}


def ego_subnetwork(m: CoocMatrix, c: Clustering | None, node: str, k: int = 10) -> EgoNetwork:
    """Top-``k`` co-occurring neighbors of ``node`` and their mutual weights.

    Neighbors are ordered by decreasing pair weight to the ego, ties by label.
    """
    if node not in m.labels:
        raise KeyError(f"unknown node {node!r}")
    w = m.pair_weights()
    i = m.index(node)
    cand = [(-w[i, j], m.labels[j], j) for j in range(len(m.labels)) if j != i and w[i, j] > 0]
    cand.sort()
    top = cand[:k]
    idx = [j for _, _, j in top]
    sub = w[np.ix_(idx, idx)].copy()
    np.fill_diagonal(sub, 0.0)
    assign = c.assignment if c is not None else {}
    return EgoNetwork(
        node,
        [lab for _, lab, _ in top],
        [float(-nw) for nw, _, _ in top],
        [assign.get(lab) for _, lab, _ in top],
        sub,
        assign.get(node),
    )
