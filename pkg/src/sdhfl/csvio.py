"""CSV persistence with round-trip exact floats, plus the run manifest."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__


class OutputError(OSError):
    pass


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    if v is None:
        return ""
    return str(v)


def emit_csv(rows: Iterable, schema: Sequence[str], path) -> Path:
    """Write ``schema`` as header then one line per row.

    Rows may be sequences (positional) or mappings keyed by column name.
    Floats carry 17 significant digits.
    """
    path = Path(path)
    out = []
    for i, row in enumerate(rows):
        if isinstance(row, Mapping):
            missing = set(schema) - set(row)
            extra = set(row) - set(schema)
            if missing or extra:
                raise ValueError(f"row {i} does not match schema (missing {sorted(missing)}, extra {sorted(extra)})")
            row = [row[c] for c in schema]
        elif len(row) != len(schema):
            raise ValueError(f"row {i} has {len(row)} fields, schema has {len(schema)}")
        out.append([fmt(v) for v in row])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(schema)
            w.writerows(out)
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def read_float_columns(path) -> dict[str, np.ndarray]:
    header, rows = read_csv(path)
    return {h: np.array([float(r[i]) for r in rows]) for i, h in enumerate(header)}


@dataclass
class RunManifest:
    preset: str
    figure: str
    config_hash: str
    seed: int
    artifacts: list = field(default_factory=list)
    status: str = "ok"
    notes: list = field(default_factory=list)
    wall_clock: float = 0.0
    code_version: str = __version__

    def write(self, out_dir) -> Path:
        rows = [
            ("preset", self.preset),
            ("figure", self.figure),
            ("config_hash", self.config_hash),
            ("seed", self.seed),
            ("code_version", self.code_version),
            ("status", self.status),
            ("wall_clock_seconds", round(self.wall_clock, 3)),
        ]
        rows += [("artifact", os.path.basename(str(a))) for a in self.artifacts]
        rows += [("note", n) for n in self.notes]
        return emit_csv(rows, ("field", "value"), Path(out_dir) / "manifest.csv")
