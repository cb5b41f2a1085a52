"""Readers and writers for the CSV and text formats used by the CLI.

Every reader error names the file and line it came from.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import FrequencyOfFrequencies
from .disclosure import CellRecord, TwoWayTable
from .errors import DataError
from .netdegree import DegreeEstimates, LinkCounts, NodeFrequencyTables, RoutingTable


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None
    except UnicodeDecodeError:
        raise DataError(f"{path}: not valid UTF-8") from None


def read_rows(path, required: Sequence[str]) -> tuple[list[str], list[tuple[int, dict]]]:
    """Header and ``(line_number, row)`` pairs of a CSV file with the ``required`` columns."""
    text = _read_text(path)
    reader = csv.DictReader(io.StringIO(text))
    header = [h.strip() for h in (reader.fieldnames or [])]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}:1: missing column(s) {', '.join(missing)}")
    reader.fieldnames = header
    rows = []
    for row in reader:
        if None in row:
            raise DataError(f"{path}:{reader.line_num}: too many fields")
        if all((v or "").strip() == "" for v in row.values()):
            continue
        rows.append((reader.line_num, {k: (v or "").strip() for k, v in row.items()}))
    return header, rows


def _num(path, line, name, text, kind=float, allow_blank=False):
    if text == "" and allow_blank:
        return None
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: column {name!r} is not a number: {text!r}") from None
    if not np.isfinite(v):
        raise DataError(f"{path}:{line}: column {name!r} must be finite")
    if kind is int:
        if v != int(v):
            raise DataError(f"{path}:{line}: column {name!r} must be an integer: {text!r}")
        return int(v)
    return v


def read_frequency_csv(path, allow_zero: bool = False) -> tuple[FrequencyOfFrequencies, int]:
    """``k,count`` rows with strictly increasing ``k``; returns the table and the ``k = 0`` count."""
    _, rows = read_rows(path, ["k", "count"])
    entries, n_zero, last = {}, 0, None
    for line, row in rows:
        k = _num(path, line, "k", row["k"], int)
        c = _num(path, line, "count", row["count"])
        if c < 0:
            raise DataError(f"{path}:{line}: count must be >= 0")
        if last is not None and k <= last:
            raise DataError(f"{path}:{line}: k must be strictly increasing")
        last = k
        if k < 0 or (k == 0 and not allow_zero):
            raise DataError(f"{path}:{line}: k must be >= {0 if allow_zero else 1}, got {k}")
        if k == 0:
            if c != int(c):
                raise DataError(f"{path}:{line}: the k = 0 count must be an integer")
            n_zero = int(c)
        else:
            entries[k] = c
    return FrequencyOfFrequencies(entries), n_zero


def read_observations_csv(path) -> np.ndarray:
    """Column ``x`` of non-negative integers, one row per unit."""
    _, rows = read_rows(path, ["x"])
    xs = []
    for line, row in rows:
        x = _num(path, line, "x", row["x"], int)
        if x < 0:
            raise DataError(f"{path}:{line}: x must be >= 0")
        xs.append(x)
    if not xs:
        raise DataError(f"{path}: no observations")
    return np.asarray(xs, dtype=np.int64)


def read_count_data(path):
    """Raw observations (``x`` column) or a frequency table (``k,count``)."""
    text = _read_text(path)
    first = text.splitlines()[0] if text else ""
    cols = [c.strip() for c in first.split(",")]
    if "x" in cols:
        return read_observations_csv(path), 0
    return read_frequency_csv(path, allow_zero=True)


def read_routing_table(path, node_count: int | None = None) -> RoutingTable:
    """One path per line as whitespace-separated node ids; ``#`` starts a comment."""
    paths = []
    for line_no, raw in enumerate(_read_text(path).splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        try:
            nodes = tuple(int(t) for t in body.split())
        except ValueError:
            raise DataError(f"{path}:{line_no}: node ids must be integers") from None
        if len(nodes) < 2:
            raise DataError(f"{path}:{line_no}: a path needs at least two nodes")
        if any(a == b for a, b in zip(nodes, nodes[1:])):
            raise DataError(f"{path}:{line_no}: consecutive nodes must differ")
        if min(nodes) < 1:
            raise DataError(f"{path}:{line_no}: node ids must be >= 1")
        if node_count is not None and max(nodes) > node_count:
            raise DataError(f"{path}:{line_no}: node id exceeds node count {node_count}")
        paths.append(nodes)
    return RoutingTable.from_paths(paths, node_count)


def read_link_counts(path, node_count: int | None = None, sample_size: int = 0) -> LinkCounts:
    _, rows = read_rows(path, ["k", "l", "count"])
    counts = {}
    for line, row in rows:
        k = _num(path, line, "k", row["k"], int)
        l = _num(path, line, "l", row["l"], int)
        c = _num(path, line, "count", row["count"], int)
        if k < 1 or l < 1 or c < 0:
            raise DataError(f"{path}:{line}: need k >= 1, l >= 1 and count >= 0")
        if k == l:
            raise DataError(f"{path}:{line}: self-link {k} -> {l}")
        if (k, l) in counts:
            raise DataError(f"{path}:{line}: duplicate link ({k}, {l})")
        counts[(k, l)] = c
    top = max((max(k, l) for k, l in counts), default=0)
    if node_count is None:
        node_count = top
    elif top > node_count:
        raise DataError(f"{path}: node id {top} exceeds node count {node_count}")
    return LinkCounts(counts, sample_size, node_count)


def read_cells_csv(path) -> list[CellRecord]:
    """``cell_id,x,pi,p`` rows; ``pi`` may be blank."""
    _, rows = read_rows(path, ["cell_id", "x", "pi", "p"])
    cells = []
    for line, row in rows:
        try:
            cells.append(
                CellRecord(
                    x=_num(path, line, "x", row["x"], int),
                    p=_num(path, line, "p", row["p"]),
                    pi=_num(path, line, "pi", row["pi"], allow_blank=True),
                    cell_id=row["cell_id"],
                )
            )
        except DataError as exc:
            if str(exc).startswith(f"{path}:"):
                raise
            raise DataError(f"{path}:{line}: {exc}") from None
    if not cells:
        raise DataError(f"{path}: no cells")
    return cells


def read_two_way_csv(path) -> TwoWayTable:
    """``row,col,x,p`` rows forming a rectangular table."""
    _, rows = read_rows(path, ["row", "col", "x", "p"])
    records = []
    for line, row in rows:
        x = _num(path, line, "x", row["x"], int)
        p = _num(path, line, "p", row["p"])
        if x < 0 or not 0 <= p <= 1:
            raise DataError(f"{path}:{line}: need x >= 0 and 0 <= p <= 1")
        records.append((row["row"], row["col"], x, p))
    try:
        return TwoWayTable.from_records(records)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


def link_counts_csv(lc: LinkCounts) -> str:
    return _csv(["k", "l", "count"], ((k, l, c) for (k, l), c in lc.counts.items()))


def fitted_frequencies_csv(rows) -> str:
    return _csv(["k", "observed", "fitted"], rows)


def cell_risks_csv(risks) -> str:
    return _csv(["cell_id", "risk"], risks)


def degree_estimates_csv(tables: NodeFrequencyTables, est: DegreeEstimates, method: str) -> str:
    rows = []
    for k, (t, rep) in enumerate(zip(tables.tables, est.reports), start=1):
        rows.append(
            (k, t.d_tilde, None if rep is None else rep.estimate, None if rep is None else rep.se, method)
        )
    return _csv(["node", "observed_degree", "estimate", "se", "method"], rows)
