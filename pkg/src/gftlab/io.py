"""CSV and JSON emission with provenance lines."""

from __future__ import annotations

import csv
import json
from pathlib import Path

FIELD_COLUMNS = ("beta", "t", "grid_x", "grid_y", "eps_model_x", "eps_model_y", "eps_target_x", "eps_target_y")
DIST_COLUMNS = ("sequence_id", "tokens", "p_model", "p_target", "class", "beta")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows, provenance: dict | None = None):
    """Write rows under an exact header.

    A single leading ``# key=value ...`` comment line carries provenance;
    readers skip it with ``comment='#'``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if provenance:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in provenance.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [row for row in reader]


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
