"""Descriptor ontology parsing and subject-area projection.

A descriptor owns one or more tree numbers (locators) such as
``C18.654.726.500``.  The branch letter of a locator is its first-level
(L1) subject area and its first segment (``C18``) is its second-level
(L2) heading.  Projections count locators, not descriptors, so a
descriptor located twice in branch C contributes 2 to C.
"""
from __future__ import annotations

import hashlib
import io
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "ALL_BRANCHES",
    "DEFAULT_BRANCHES",
    "TreeNumber",
    "Descriptor",
    "OntologyTree",
    "SAVector",
    "OntologyParseError",
    "parse_tree_number",
    "parse_ontology",
    "read_ontology",
    "project_l1",
    "project_l2",
    "article_sa",
]

ALL_BRANCHES = frozenset("ABCDEFGHIJKLMNVZ")
DEFAULT_BRANCHES = frozenset("ABCDEFGJLN")

_FIRST_SEGMENT = re.compile(r"^([A-Z])(\d{2})?$")
_SEGMENT = re.compile(r"^\d+$")


class OntologyParseError(ValueError):
    """Malformed ontology input; ``position`` is a line or record number."""

    def __init__(self, message: str, position: int | None = None, unit: str = "line"):
        self.position = position
        if position is not None:
            message = f"{unit} {position}: {message}"
        super().__init__(message)


@dataclass(frozen=True, order=True)
class TreeNumber:
    path: tuple[str, ...]

    @property
    def branch(self) -> str:
        return self.path[0][0]

    @property
    def depth(self) -> int:
        """Number of segments; a bare branch letter has depth 0."""
        if len(self.path) == 1 and len(self.path[0]) == 1:
            return 0
        return len(self.path)

    @property
    def l2(self) -> str | None:
        """Second-level heading code, or None for a bare branch letter."""
        return None if self.depth == 0 else self.path[0]

    def __str__(self) -> str:
        return ".".join(self.path)


def parse_tree_number(text: str) -> TreeNumber:
    segments = tuple(text.strip().split("."))
    if not segments or not segments[0]:
        raise ValueError(f"empty tree number {text!r}")
    m = _FIRST_SEGMENT.match(segments[0])
    if m is None or m.group(1) not in ALL_BRANCHES:
        raise ValueError(f"bad leading segment in tree number {text!r}")
    if m.group(2) is None and len(segments) > 1:
        raise ValueError(f"branch letter without code in {text!r}")
    for seg in segments[1:]:
        if not _SEGMENT.match(seg):
            raise ValueError(f"bad segment {seg!r} in tree number {text!r}")
    return TreeNumber(segments)


@dataclass(frozen=True)
class Descriptor:
    id: str
    name: str
    tree_numbers: tuple[TreeNumber, ...]

    @property
    def branches(self) -> list[str]:
        return [t.branch for t in self.tree_numbers]


@dataclass(frozen=True)
class SAVector:
    """Subject-area count vector at level 1 (branches) or 2 (headings)."""

    level: int
    labels: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        if self.counts.shape != (len(self.labels),):
            raise ValueError("counts/labels length mismatch")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def as_dict(self, nonzero: bool = True) -> dict[str, int]:
        return {
            lab: int(c) for lab, c in zip(self.labels, self.counts) if c or not nonzero
        }

    def __add__(self, other: "SAVector") -> "SAVector":
        if self.level != other.level or self.labels != other.labels:
            raise ValueError("cannot add SA vectors with different bases")
        return SAVector(self.level, self.labels, self.counts + other.counts)


@dataclass
class OntologyTree:
    """Immutable-by-convention descriptor forest restricted to a branch set."""

    descriptors: dict[str, Descriptor]
    branch_filter: frozenset[str] = DEFAULT_BRANCHES
    stats: dict[str, int] = field(default_factory=dict)
    excluded: frozenset[str] = frozenset()

    def __post_init__(self):
        self.l1_index: tuple[str, ...] = tuple(sorted(self.branch_filter))
        l2 = {
            t.l2
            for d in self.descriptors.values()
            for t in d.tree_numbers
            if t.l2 is not None
        }
        self.l2_index: tuple[str, ...] = tuple(sorted(l2))
        self._l1_pos = {b: i for i, b in enumerate(self.l1_index)}
        self._l2_pos = {c: i for i, c in enumerate(self.l2_index)}
        self._by_name = {d.name: d.id for d in self.descriptors.values()}
        self.stats.setdefault(
            "depth0_locators",
            sum(t.depth == 0 for d in self.descriptors.values() for t in d.tree_numbers),
        )

    def __len__(self) -> int:
        return len(self.descriptors)

    def __contains__(self, key: str) -> bool:
        return key in self.descriptors

    def __getitem__(self, key: str) -> Descriptor:
        try:
            return self.descriptors[key]
        except KeyError:
            raise KeyError(f"unknown descriptor {key!r}") from None

    def id_for_name(self, name: str) -> str:
        return self._by_name[name]

    def labels(self, level: int) -> tuple[str, ...]:
        if level == 1:
            return self.l1_index
        if level == 2:
            return self.l2_index
        raise ValueError(f"level must be 1 or 2, got {level}")

    def l1_position(self, branch: str) -> int:
        return self._l1_pos[branch]

    def l2_position(self, code: str) -> int:
        return self._l2_pos[code]

    def l2_to_l1(self) -> np.ndarray:
        """0/1 matrix collapsing L2 headings onto their branch."""
        out = np.zeros((len(self.l2_index), len(self.l1_index)), dtype=np.int64)
        for i, code in enumerate(self.l2_index):
            out[i, self._l1_pos[code[0]]] = 1
        return out

    def projection_table(self, level: int) -> tuple[list[str], list[np.ndarray]]:
        """Per-descriptor arrays of category positions (with multiplicity)."""
        ids = sorted(self.descriptors)
        rows = []
        for did in ids:
            tns = self.descriptors[did].tree_numbers
            if level == 1:
                pos = [self._l1_pos[t.branch] for t in tns]
            else:
                pos = [self._l2_pos[t.l2] for t in tns if t.l2 is not None]
            rows.append(np.asarray(pos, dtype=np.int64))
        return ids, rows

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(",".join(sorted(self.branch_filter)).encode())
        for did in sorted(self.descriptors):
            d = self.descriptors[did]
            h.update(f"\n{d.id}\t{d.name}\t".encode())
            h.update(";".join(map(str, d.tree_numbers)).encode())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {
            "branch_filter": sorted(self.branch_filter),
            "l2_index": list(self.l2_index),
            "stats": dict(self.stats),
            "excluded": sorted(self.excluded),
            "descriptors": [
                {
                    "id": d.id,
                    "name": d.name,
                    "tree_numbers": [str(t) for t in d.tree_numbers],
                }
                for d in sorted(self.descriptors.values(), key=lambda d: d.id)
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "OntologyTree":
        descs = {
            r["id"]: Descriptor(
                r["id"], r["name"], tuple(parse_tree_number(t) for t in r["tree_numbers"])
            )
            for r in obj["descriptors"]
        }
        return cls(
            descs,
            frozenset(obj["branch_filter"]),
            dict(obj.get("stats", {})),
            frozenset(obj.get("excluded", ())),
        )


def _tsv_records(text: str) -> Iterator[tuple[int, str, str, list[str]]]:
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise OntologyParseError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
        did, name, tns = parts
        yield lineno, did.strip(), name.strip(), [t for t in tns.split(";") if t.strip()]


def _xml_records(text: str | bytes) -> Iterator[tuple[int, str, str, list[str]]]:
    from xml.etree import ElementTree

    data = text.encode() if isinstance(text, str) else text
    try:
        root = ElementTree.fromstring(data)
    except ElementTree.ParseError as err:
        raise OntologyParseError(f"malformed XML: {err}") from err
    records = [root] if root.tag == "DescriptorRecord" else root.iter("DescriptorRecord")
    for recno, rec in enumerate(records, start=1):
        did = (rec.findtext("DescriptorUI") or "").strip()
        name = (rec.findtext("DescriptorName/String") or rec.findtext("DescriptorName") or "").strip()
        tns = [(t.text or "").strip() for t in rec.findall("TreeNumberList/TreeNumber")]
        yield recno, did, name, tns


def parse_ontology(
    source: str | bytes,
    branch_filter: Iterable[str] = DEFAULT_BRANCHES,
    fmt: str | None = None,
) -> OntologyTree:
    """Parse descriptor records into an :class:`OntologyTree`.

    Parameters
    ----------
    source : str or bytes
        Simplified TSV (``id<TAB>name<TAB>tn;tn;...``) or NLM descriptor XML.
    branch_filter : iterable of str
        Branch letters to retain. Locators outside it are pruned; a
        descriptor with no surviving locator is dropped.
    fmt : {"tsv", "xml"}, optional
        Input format; sniffed from the first non-blank character if omitted.

    Raises
    ------
    OntologyParseError
        On malformed locators or duplicate descriptor ids. The message
        carries the line (TSV) or record (XML) position.
    """
    branch_filter = frozenset(branch_filter)
    unknown = branch_filter - ALL_BRANCHES
    if unknown:
        raise ValueError(f"unknown branch letters {sorted(unknown)}")
    if fmt is None:
        head = source.lstrip()[:1]
        fmt = "xml" if head in ("<", b"<") else "tsv"
    if fmt == "tsv":
        text = source.decode("utf-8") if isinstance(source, bytes) else source
        records = _tsv_records(text)
        unit = "line"
    elif fmt == "xml":
        records = _xml_records(source)
        unit = "record"
    else:
        raise ValueError(f"unknown ontology format {fmt!r}")

    descriptors: dict[str, Descriptor] = {}
    seen: set[str] = set()
    dropped: set[str] = set()
    stats = Counter(descriptors_read=0, descriptors_dropped=0, locators_read=0, locators_pruned=0)
    for pos, did, name, tns in records:
        if not did:
            raise OntologyParseError("missing descriptor id", pos, unit)
        if did in seen:
            raise OntologyParseError(f"duplicate descriptor id {did!r}", pos, unit)
        seen.add(did)
        if not tns:
            raise OntologyParseError(f"descriptor {did!r} has no tree numbers", pos, unit)
        parsed = []
        for t in tns:
            try:
                parsed.append(parse_tree_number(t))
            except ValueError as err:
                raise OntologyParseError(str(err), pos, unit) from None
        stats["descriptors_read"] += 1
        stats["locators_read"] += len(parsed)
        kept = tuple(t for t in parsed if t.branch in branch_filter)
        stats["locators_pruned"] += len(parsed) - len(kept)
        if not kept:
            stats["descriptors_dropped"] += 1
            dropped.add(did)
            continue
        descriptors[did] = Descriptor(did, name, kept)
    return OntologyTree(descriptors, branch_filter, dict(stats), frozenset(dropped))


def read_ontology(path: str | os.PathLike, branch_filter: Iterable[str] = DEFAULT_BRANCHES) -> OntologyTree:
    with open(path, "rb") as fh:
        data = fh.read()
    fmt = "xml" if str(path).endswith(".xml") else None
    return parse_ontology(data, branch_filter, fmt)


def project_l1(tree: OntologyTree, id: str) -> SAVector:
    counts = np.zeros(len(tree.l1_index), dtype=np.int64)
    for t in tree[id].tree_numbers:
        counts[tree.l1_position(t.branch)] += 1
    return SAVector(1, tree.l1_index, counts)


def project_l2(tree: OntologyTree, id: str) -> SAVector:
    counts = np.zeros(len(tree.l2_index), dtype=np.int64)
    for t in tree[id].tree_numbers:
        if t.l2 is not None:
            counts[tree.l2_position(t.l2)] += 1
    return SAVector(2, tree.l2_index, counts)


def article_sa(
    tree: OntologyTree,
    mesh_ids: Sequence[str],
    level: int,
    on_unknown: str = "skip",
    stats: Counter | None = None,
) -> SAVector:
    """Sum of per-descriptor projections for one article.

    Unresolvable ids are skipped and tallied in ``stats["unresolved_mesh_refs"]``
    unless ``on_unknown="raise"``. Ids whose every locator lies in an
    excluded branch are always skipped (tallied as ``excluded_mesh_refs``).
    """
    project = project_l1 if level == 1 else project_l2
    labels = tree.labels(level)
    counts = np.zeros(len(labels), dtype=np.int64)
    for mid in mesh_ids:
        if mid not in tree:
            if mid in tree.excluded:
                if stats is not None:
                    stats["excluded_mesh_refs"] += 1
                continue
            if on_unknown == "raise":
                raise KeyError(f"unknown descriptor {mid!r}")
            if stats is not None:
                stats["unresolved_mesh_refs"] += 1
            continue
        counts += project(tree, mid).counts
    return SAVector(level, labels, counts)
