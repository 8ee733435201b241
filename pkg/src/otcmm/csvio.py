"""CSV files with a provenance comment line ahead of the header row."""
from __future__ import annotations

import csv
import io
from pathlib import Path

from . import __version__


def _cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):  # numpy scalar
        return _cell(v.item())
    return str(v)


def provenance_line(config_hash: str, seed: int, extra: dict | None = None) -> str:
    parts = [f"config_hash={config_hash}", f"seed={seed}", f"version={__version__}"]
    for k, v in (extra or {}).items():
        parts.append(f"{k}={_cell(v)}")
    return "# " + " ".join(parts)


def write_csv(path, header, rows, config_hash: str, seed: int, extra: dict | None = None) -> Path:
    """Write rows deterministically: floats use their shortest round-trip form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(provenance_line(config_hash, seed, extra) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
        w.writerow([_cell(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    """Return ``(provenance, header, rows)``; rows are lists of strings."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such CSV: {path}")
    meta: dict[str, str] = {}
    lines = path.read_text().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
        elif line.strip():
            body.append(line)
    if not body:
        raise ValueError(f"{path}: no header row")
    reader = list(csv.reader(body))
    header, rows = reader[0], reader[1:]
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}: data row {i - 1} has {len(row)} cells, header has {len(header)}")
    return meta, header, rows


def numeric_column(header: list[str], rows: list[list[str]], name: str | None = None) -> tuple[str, list[float]]:
    """Pick column ``name`` (or the first all-numeric one) and convert it to floats."""
    candidates = [name] if name is not None else header
    for col in candidates:
        if col not in header:
            raise ValueError(f"column {col!r} not found; available: {header}")
        j = header.index(col)
        try:
            return col, [float(r[j]) for r in rows]
        except ValueError:
            if name is not None:
                raise ValueError(f"column {col!r} is not numeric") from None
    raise ValueError("no numeric column found")
