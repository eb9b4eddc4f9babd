"""Plain-text file helpers: atomic writes, CSV tables and key-value files."""
from __future__ import annotations

import contextlib
import csv
import math
import os
import tempfile
from pathlib import Path

import numpy as np


def fmt(v) -> str:
    """Deterministic text form of a cell: shortest round-trip repr for floats."""
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "NA"
        return repr(v)
    return str(v)


@contextlib.contextmanager
def atomic_writer(path):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_csv(path, rows, columns):
    with atomic_writer(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_kv(path, items, header: str | None = None):
    """Write ``key = value`` lines; arrays become comma-separated lists."""
    with atomic_writer(path) as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for k, v in items.items() if isinstance(items, dict) else items:
            if isinstance(v, (list, tuple, np.ndarray)):
                v = ",".join(fmt(x) for x in np.ravel(np.asarray(v, dtype=object)))
            else:
                v = fmt(v)
            fh.write(f"{k} = {v}\n")


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def parse_floats(s: str) -> np.ndarray:
    if not s:
        return np.empty(0)
    return np.array([float("nan") if t == "NA" else float(t) for t in s.split(",")])
