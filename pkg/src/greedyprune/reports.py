"""CSV and JSON output with atomic writes."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if isinstance(row, dict):
            row = [row[h] for h in header]
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, csv_text(header, rows))


def write_json(path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


LOCAL_TRACE_HEADER = ("k", "loss", "support", "chosen_index", "gamma")
GLOBAL_TRACE_HEADER = ("k", "loss", "support", "chosen_index", "mode", "tail_pass_count")


def write_trace(path, trace) -> None:
    """Write a local or global greedy trace (header picked from the row type)."""
    if trace and hasattr(trace[0], "mode"):
        header = GLOBAL_TRACE_HEADER
    else:
        header = LOCAL_TRACE_HEADER
    write_csv(path, header, ([getattr(r, h) for h in header] for r in trace))
