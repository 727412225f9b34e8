"""Streaming ingestion of article records from corpus JSONL files."""
from __future__ import annotations

import bisect
import json
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_PUB_TYPES",
    "ArticleRecord",
    "CorpusStats",
    "CorpusParseError",
    "Windows",
    "parse_record",
    "ingest_file",
    "shard_ranges",
    "write_jsonl",
    "partition_by_window",
]

DEFAULT_PUB_TYPES = frozenset({"Journal Article", "Review"})
DEFAULT_YEARS = (1970, 2018)


class CorpusParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass(frozen=True)
class ArticleRecord:
    pmid: str
    year: int
    journal: str
    author_count: int
    mesh: tuple[tuple[str, bool], ...]
    pub_types: tuple[str, ...] = ()

    @property
    def major_ids(self) -> list[str]:
        return [m for m, major in self.mesh if major]

    @property
    def mesh_ids(self) -> list[str]:
        return [m for m, _ in self.mesh]

    def to_json(self) -> dict:
        obj = {
            "pmid": self.pmid,
            "year": self.year,
            "journal": self.journal,
            "authors": self.author_count,
            "mesh": [{"id": m, "major": major} for m, major in self.mesh],
        }
        if self.pub_types:
            obj["pub_types"] = list(self.pub_types)
        return obj


@dataclass
class CorpusStats:
    articles_read: int = 0
    articles_kept: int = 0
    dropped_no_major_mesh: int = 0
    dropped_out_of_range: int = 0
    dropped_pub_type: int = 0
    malformed_lines: int = 0
    unresolved_mesh_refs: int = 0
    excluded_mesh_refs: int = 0
    empty_sa_articles: int = 0

    def __add__(self, other: "CorpusStats") -> "CorpusStats":
        return CorpusStats(
            **{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)}
        )

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def parse_record(obj: dict) -> ArticleRecord:
    """Validate one decoded JSONL object; raises ``ValueError`` when malformed."""
    try:
        pmid = str(obj["pmid"])
        year = obj["year"]
        mesh_raw = obj["mesh"]
    except (KeyError, TypeError) as err:
        raise ValueError(f"missing key {err}") from None
    if not isinstance(year, int) or isinstance(year, bool):
        raise ValueError(f"year must be an integer, got {year!r}")
    authors = obj.get("authors") or 0
    if not isinstance(authors, int) or authors < 0:
        raise ValueError(f"authors must be a non-negative integer, got {authors!r}")
    if not isinstance(mesh_raw, list):
        raise ValueError("mesh must be an array")
    mesh = []
    for m in mesh_raw:
        if not isinstance(m, dict) or not isinstance(m.get("id"), str):
            raise ValueError(f"bad mesh entry {m!r}")
        mesh.append((m["id"], bool(m.get("major", False))))
    pub_types = obj.get("pub_types") or ()
    if isinstance(pub_types, str):
        pub_types = (pub_types,)
    return ArticleRecord(
        pmid, year, str(obj.get("journal") or ""), authors, tuple(mesh), tuple(pub_types)
    )


def shard_ranges(path: str | os.PathLike, n: int) -> list[tuple[int, int]]:
    """Split a file into ``n`` contiguous byte ranges.

    A line belongs to the range containing its first byte, so the ranges
    deliver every line exactly once whatever the cut points.
    """
    size = os.path.getsize(path)
    n = max(1, min(n, size or 1))
    cuts = [size * k // n for k in range(n + 1)]
    return list(zip(cuts[:-1], cuts[1:]))


def _iter_lines(fh, byte_range):
    if byte_range is None:
        yield from fh
        return
    start, end = byte_range
    if start > 0:
        fh.seek(start - 1)
        fh.readline()
    while fh.tell() < end:
        line = fh.readline()
        if not line:
            break
        yield line


def ingest_file(
    path: str | os.PathLike,
    major_only: bool = True,
    years: tuple[int, int] | None = DEFAULT_YEARS,
    pub_types: Iterable[str] | None = DEFAULT_PUB_TYPES,
    on_error: str = "skip",
    stats: CorpusStats | None = None,
    byte_range: tuple[int, int] | None = None,
) -> Iterator[ArticleRecord]:
    """Stream article records from a corpus JSONL file.

    Parameters
    ----------
    path : path-like
        Corpus JSONL, one article object per line.
    major_only : bool
        Keep only Major MeSH entries and drop articles left without any.
    years : (int, int) or None
        Inclusive publication-year range; records outside are dropped.
    pub_types : iterable of str or None
        Publication-type allowlist. Records that carry no publication
        types are kept; ``None`` disables the filter.
    on_error : {"skip", "raise"}
        Malformed lines are counted and skipped, or raise
        :class:`CorpusParseError` with the line number.
    stats : CorpusStats, optional
        Updated in place while the stream is consumed.
    byte_range : (int, int), optional
        Restrict to lines starting inside ``[start, end)``; see
        :func:`shard_ranges`.
    """
    if on_error not in ("skip", "raise"):
        raise ValueError(f"on_error must be 'skip' or 'raise', got {on_error!r}")
    if stats is None:
        stats = CorpusStats()
    allowed = frozenset(pub_types) if pub_types is not None else None
    with open(path, "rb") as fh:
        for lineno, line in enumerate(_iter_lines(fh, byte_range), start=1):
            if not line.strip():
                continue
            stats.articles_read += 1
            try:
                rec = parse_record(json.loads(line))
            except ValueError as err:  # JSONDecodeError is a ValueError
                stats.malformed_lines += 1
                if on_error == "raise":
                    raise CorpusParseError(str(err), None if byte_range else lineno) from None
                logger.debug("skipping malformed line %d: %s", lineno, err)
                continue
            if years is not None and not years[0] <= rec.year <= years[1]:
                stats.dropped_out_of_range += 1
                continue
            if allowed is not None and rec.pub_types and allowed.isdisjoint(rec.pub_types):
                stats.dropped_pub_type += 1
                continue
            if major_only:
                major = tuple(m for m in rec.mesh if m[1])
                if not major:
                    stats.dropped_no_major_mesh += 1
                    continue
                if len(major) != len(rec.mesh):
                    rec = ArticleRecord(
                        rec.pmid, rec.year, rec.journal, rec.author_count, major, rec.pub_types
                    )
            stats.articles_kept += 1
            yield rec


def write_jsonl(records: Iterable[ArticleRecord], path: str | os.PathLike) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


@dataclass(frozen=True)
class Windows:
    """Non-overlapping inclusive year windows, kept in start order."""

    spans: tuple[tuple[int, int], ...]
    _starts: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        spans = tuple(sorted((int(a), int(b)) for a, b in self.spans))
        for a, b in spans:
            if a > b:
                raise ValueError(f"window [{a}, {b}] has start after end")
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            if a1 <= b0:
                raise ValueError(f"windows [{a0}, {b0}] and [{a1}, {b1}] overlap")
        object.__setattr__(self, "spans", spans)
        object.__setattr__(self, "_starts", tuple(a for a, _ in spans))

    @classmethod
    def annual(cls, first: int, last: int) -> "Windows":
        return cls(tuple((y, y) for y in range(first, last + 1)))

    def __len__(self) -> int:
        return len(self.spans)

    def __iter__(self):
        return iter(self.spans)

    def locate(self, year: int) -> int | None:
        k = bisect.bisect_right(self._starts, year) - 1
        if k >= 0 and year <= self.spans[k][1]:
            return k
        return None


def partition_by_window(
    records: Iterable[ArticleRecord], windows: Windows | Sequence[Sequence[int]]
) -> Iterator[tuple[tuple[int, int], ArticleRecord]]:
    """Route each record to the window containing its year.

    Records outside every window are dropped. Raises ``ValueError`` on
    overlapping windows before consuming any record.
    """
    if not isinstance(windows, Windows):
        windows = Windows(tuple(tuple(w) for w in windows))
    return _route(records, windows)


def _route(records, windows):
    for rec in records:
        k = windows.locate(rec.year)
        if k is not None:
            yield windows.spans[k], rec
