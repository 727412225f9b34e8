import json
from pathlib import Path

import numpy as np
import pytest

from meshforge.ontology import read_ontology

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture
def tree():
    return read_ontology(FIXTURES / "ontology.tsv")


def write_corpus(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    return path


def article(pmid, year, mesh, journal="J Test", authors=3, **extra):
    """Corpus JSONL object; ``mesh`` items are ids (major) or (id, major) pairs."""
    items = [{"id": m, "major": True} if isinstance(m, str) else {"id": m[0], "major": m[1]} for m in mesh]
    return {"pmid": str(pmid), "year": year, "journal": journal, "authors": authors, "mesh": items, **extra}


def random_counts(rng, n, d, max_count=5, density=0.4):
    c = rng.integers(1, max_count + 1, size=(n, d)) * (rng.random((n, d)) < density)
    empty = ~c.any(axis=1)
    c[empty, rng.integers(0, d, size=empty.sum())] = 1
    return c


# ---- acceptance reporting: one PASS/FAIL line per criterion

_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    _ACCEPTANCE[marker[0]] = (marker[1], "PASS" if report.passed else "FAIL", report.duration)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        outcome.get_result().acceptance = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        title, verdict, secs = _ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d} {verdict}  {title} ({secs:.1f} s)")
