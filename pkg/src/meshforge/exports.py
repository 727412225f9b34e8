"""Writers for CSV/TSV/JSON exports.

Every file starts with a schema-version marker: a ``# schema: <kind>/<v>``
comment line for delimited text, a ``"schema"`` key for JSON.  Floats are
written with ``repr`` so identical inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import json
import os
from typing import Iterable, Sequence

SCHEMA_VERSION = 1


def schema_tag(kind: str) -> str:
    return f"meshforge.{kind}/{SCHEMA_VERSION}"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_table(
    path: str | os.PathLike,
    kind: str,
    header: Sequence[str],
    rows: Iterable[Sequence],
    delimiter: str = ",",
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema: {schema_tag(kind)}\n")
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_table(path: str | os.PathLike, delimiter: str = ",") -> tuple[str, list[str], list[list[str]]]:
    """Return (schema tag, header, rows) of a file written by :func:`write_table`."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# schema: "):
            raise ValueError(f"{path}: missing schema line")
        r = csv.reader(fh, delimiter=delimiter)
        header = next(r)
        return first[len("# schema: "):].strip(), header, list(r)


def write_json(path: str | os.PathLike, kind: str, obj: dict) -> None:
    payload = {"schema": schema_tag(kind), **obj}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=False)
        fh.write("\n")
