"""Article-level categorical diversity, convergence fractions and trend fits.

The diversity of a count vector ``c`` is ``1 - trace(D)`` where ``D`` is the
upper triangle (diagonal included) of the outer product ``c c^T``
normalized to unit sum.  In closed form, with ``n = sum(c)``::

    f_d = (n**2 - sum(c**2)) / (n**2 + sum(c**2))

which is bounded by ``(d - 1) / (d + 1)`` for ``d`` categories.
"""
from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .ontology import SAVector

__all__ = [
    "CORE_BRANCHES",
    "TeamGroup",
    "DiversityRecord",
    "TrendFit",
    "GroupStats",
    "f_d",
    "f_d_matrix",
    "f_d_batch",
    "f_d_bound",
    "f_x",
    "f_x_batch",
    "yearly_fraction",
    "team_group",
    "trend_fit",
    "aggregate",
    "journal_ranking",
]

CORE_BRANCHES = ("A", "B", "C", "D", "E", "G")
HIST_BINS = 20


def _counts(sa) -> np.ndarray:
    return np.asarray(sa.counts if isinstance(sa, SAVector) else sa, dtype=np.float64)


def f_d_matrix(sa: SAVector | Sequence[float]) -> float:
    """Diversity through the normalized upper-triangular outer product."""
    c = _counts(sa)
    if not c.any():
        raise ValueError("diversity undefined for an all-zero vector")
    u = np.triu(np.outer(c, c))
    # 1 - trace(D) as one division: no cancellation, exact for integer counts
    return float(np.triu(u, 1).sum() / u.sum())


def f_d(sa: SAVector | Sequence[float]) -> float:
    c = _counts(sa)
    n2 = c.sum() ** 2
    s2 = (c * c).sum()
    if n2 == 0:
        raise ValueError("diversity undefined for an all-zero vector")
    return float((n2 - s2) / (n2 + s2))


def f_d_batch(counts: np.ndarray) -> np.ndarray:
    """Row-wise closed-form diversity; all-zero rows give NaN."""
    c = np.asarray(counts, dtype=np.float64)
    n2 = c.sum(axis=1) ** 2
    s2 = (c * c).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (n2 - s2) / (n2 + s2)


def f_d_bound(d: int) -> float:
    return (d - 1) / (d + 1)


_FX_MODES = {"J": ("J",), "L": ("L",), "J+L": ("J", "L")}


def _fx_masks(labels: Sequence[str], mode: str):
    if mode not in _FX_MODES:
        raise ValueError(f"mode must be one of {sorted(_FX_MODES)}, got {mode!r}")
    labels = list(labels)
    core = np.array([lab in CORE_BRANCHES for lab in labels])
    flag_idx = [labels.index(b) for b in _FX_MODES[mode]]
    return core, flag_idx


def f_x(
    sa1: SAVector,
    mode: str = "J+L",
    core_min: float = 0.5,
    flag_min: float = 0.25,
    strict: bool = False,
) -> bool:
    """Convergence indicator on an L1 vector.

    True when at least ``core_min`` of the locator counts fall in ABCDEG and
    at least ``flag_min`` fall in the flagged branch(es). In ``"J+L"`` mode
    the combined J+L share is used and both branches must be present;
    ``strict=True`` instead requires each of J and L to reach ``flag_min``.
    """
    if sa1.level != 1:
        raise ValueError("f_x needs a level-1 vector")
    return bool(f_x_batch(sa1.counts[None, :], sa1.labels, mode, core_min, flag_min, strict)[0])


def f_x_batch(
    counts: np.ndarray,
    labels: Sequence[str],
    mode: str = "J+L",
    core_min: float = 0.5,
    flag_min: float = 0.25,
    strict: bool = False,
) -> np.ndarray:
    c = np.asarray(counts, dtype=np.float64)
    core, flag_idx = _fx_masks(labels, mode)
    total = c.sum(axis=1)
    safe = np.where(total > 0, total, 1.0)
    ok = (total > 0) & (c[:, core].sum(axis=1) / safe >= core_min)
    flagged = c[:, flag_idx]
    if len(flag_idx) == 1:
        return ok & (flagged[:, 0] / safe >= flag_min)
    if strict:
        return ok & np.all(flagged / safe[:, None] >= flag_min, axis=1)
    return ok & np.all(flagged > 0, axis=1) & (flagged.sum(axis=1) / safe >= flag_min)


def yearly_fraction(items: Iterable[tuple[int, bool]]) -> dict[int, float]:
    """Flagged share per year; years without articles are absent."""
    hits: dict[int, int] = defaultdict(int)
    totals: dict[int, int] = defaultdict(int)
    for year, flag in items:
        totals[year] += 1
        hits[year] += bool(flag)
    return {y: hits[y] / totals[y] for y in sorted(totals)}


class TeamGroup(str, enum.Enum):
    SOLO = "Solo"
    SMALL = "Small"
    MEDIUM = "Medium"
    LARGE = "Large"
    UNKNOWN = "Unknown"


def team_group(author_count: int) -> TeamGroup:
    if author_count == 1:
        return TeamGroup.SOLO
    if 2 <= author_count <= 5:
        return TeamGroup.SMALL
    if 6 <= author_count <= 10:
        return TeamGroup.MEDIUM
    if 11 <= author_count <= 50:
        return TeamGroup.LARGE
    return TeamGroup.UNKNOWN


def team_group_codes(author_counts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`team_group` returning indices into ``list(TeamGroup)``."""
    a = np.asarray(author_counts)
    out = np.full(a.shape, 4, dtype=np.int8)
    out[a == 1] = 0
    out[(a >= 2) & (a <= 5)] = 1
    out[(a >= 6) & (a <= 10)] = 2
    out[(a >= 11) & (a <= 50)] = 3
    return out


@dataclass(frozen=True)
class DiversityRecord:
    pmid: str
    year: int
    f_d: float
    team_group: TeamGroup
    journal: str
    level: int = 2


@dataclass
class TrendFit:
    coefficients: np.ndarray
    center: float
    residual_variance: float
    cov_unscaled: np.ndarray
    dof: int
    confidence: float = 0.99
    rss: float = 0.0

    @property
    def a(self):
        return float(self.coefficients[0])

    @property
    def b(self):
        return float(self.coefficients[1])

    @property
    def c(self):
        return float(self.coefficients[2])

    @property
    def d(self):
        return float(self.coefficients[3])

    def _design(self, t) -> np.ndarray:
        x = np.asarray(t, dtype=np.float64) - self.center
        return np.vander(x, len(self.coefficients), increasing=True)

    def predict(self, t) -> np.ndarray:
        return self._design(np.atleast_1d(t)) @ self.coefficients

    def band(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper confidence limits of the fitted mean at ``t``."""
        x = self._design(np.atleast_1d(t))
        yhat = x @ self.coefficients
        if self.dof <= 0:
            nan = np.full_like(yhat, np.nan)
            return nan, nan
        tq = stats.t.ppf(0.5 + self.confidence / 2, self.dof)
        se = np.sqrt(self.residual_variance * np.einsum("ij,jk,ik->i", x, self.cov_unscaled, x))
        return yhat - tq * se, yhat + tq * se

    def to_json(self) -> dict:
        return {
            "model": "a + b*(t-center) + c*(t-center)^2 + d*(t-center)^3",
            "center": self.center,
            "a": self.a,
            "b": self.b,
            "c": self.c,
            "d": self.d,
            "residual_variance": self.residual_variance,
            "rss": self.rss,
            "dof": self.dof,
            "confidence": self.confidence,
        }


def trend_fit(
    years: Sequence[float],
    values: Sequence[float],
    center: float = 1990,
    degree: int = 3,
    confidence: float = 0.99,
) -> TrendFit:
    """Least-squares cubic in ``(t - center)`` with a classical confidence band."""
    t = np.asarray(years, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    p = degree + 1
    if len(t) < p:
        raise ValueError(f"need at least {p} points for a degree-{degree} fit, got {len(t)}")
    x = np.vander(t - center, p, increasing=True)
    # complete QR keeps the cubic well conditioned over half-century spans;
    # the residual lives in the trailing columns, empty for a square system
    q, r = np.linalg.qr(x, mode="complete")
    qty = q.T @ y
    r = r[:p]
    coef = np.linalg.solve(r, qty[:p])
    rss = float(qty[p:] @ qty[p:])
    dof = len(t) - p
    rvar = rss / dof if dof > 0 else math.nan
    rinv = np.linalg.inv(r)
    return TrendFit(coef, float(center), rvar, rinv @ rinv.T, dof, confidence, rss)


@dataclass
class GroupStats:
    """Mergeable running statistics of diversity values."""

    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0
    zeros: int = 0
    hist: np.ndarray = field(default_factory=lambda: np.zeros(HIST_BINS, dtype=np.int64))

    def add(self, values) -> None:
        v = np.atleast_1d(np.asarray(values, dtype=np.float64))
        self.count += len(v)
        self.total += float(v.sum())
        self.total_sq += float((v * v).sum())
        self.zeros += int((v == 0).sum())
        self.hist += np.histogram(v, bins=HIST_BINS, range=(0.0, 1.0))[0]

    def merge(self, other: "GroupStats") -> "GroupStats":
        return GroupStats(
            self.count + other.count,
            self.total + other.total,
            self.total_sq + other.total_sq,
            self.zeros + other.zeros,
            self.hist + other.hist,
        )

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else math.nan

    @property
    def std(self) -> float:
        """Population standard deviation."""
        if not self.count:
            return math.nan
        return math.sqrt(max(self.total_sq / self.count - self.mean**2, 0.0))


def window_start(year: int, width: int, origin: int = 1970) -> int:
    return origin + (year - origin) // width * width


def aggregate(
    records: Iterable[DiversityRecord],
    key: str = "year",
    window: int = 1,
    origin: int = 1970,
) -> dict:
    """Group diversity values and return ``{group key: GroupStats}``.

    ``key`` is ``"year"`` (years binned into non-overlapping windows of
    ``window`` years starting at ``origin``, keyed by window start),
    ``"journal"`` or ``"team_year"`` (``(group, window start)`` pairs).
    """
    if key not in ("year", "journal", "team_year"):
        raise ValueError(f"unknown key {key!r}")
    values: dict = defaultdict(list)
    for r in records:
        if key == "journal":
            k = r.journal
        else:
            w = window_start(r.year, window, origin)
            k = w if key == "year" else (TeamGroup(r.team_group).value, w)
        values[k].append(r.f_d)
    out = {}
    for k in sorted(values):
        out[k] = GroupStats()
        out[k].add(values[k])
    return out


def journal_ranking(groups: Mapping[str, GroupStats]) -> list[tuple[str, float, int]]:
    """(journal, mean f_d, article count) sorted by decreasing mean, then name."""
    return sorted(((j, g.mean, g.count) for j, g in groups.items()), key=lambda r: (-r[1], r[0]))
