"""Versioned tab-separated text tables.

Every table starts with a ``# schema_version: N`` line followed by a header
row.  Floats are written with ``repr`` so a write/read cycle is exact.
"""

from __future__ import annotations

import csv
import os
from typing import Iterable, Sequence

from .errors import ValidationError

SCHEMA_VERSION = 1
_PREFIX = "# schema_version:"


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"{_PREFIX} {SCHEMA_VERSION}\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def read_table(path, columns: Sequence[str]) -> list[list[str]]:
    """Read a table and check its version line and header; returns raw string rows."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith(_PREFIX):
            raise ValidationError("missing schema_version line", where=path)
        try:
            version = int(first[len(_PREFIX):].strip())
        except ValueError:
            raise ValidationError("unreadable schema_version", where=path) from None
        if version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {version}", where=path)
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or list(header) != list(columns):
            raise ValidationError(f"expected header {list(columns)}, got {header}", where=path)
        return [row for row in reader if row]
