"""CSV/JSON readers and writers plus run manifests.

CSV files have one header row; floats are written with 9 significant
digits.  JSON reports carry a ``schema`` tag (``shapprop.<kind>/1``).
Every command writes ``<output>.manifest.json`` next to its main output.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1


class CsvError(ValueError):
    pass


def fmt(v: float) -> str:
    return format(float(v), ".9g")


def read_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Header and float matrix of a CSV file."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise CsvError(f"{path}: line {k} has {len(r)} fields, header has {len(header)}")
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=float)
    except ValueError as exc:
        raise CsvError(f"{path}: non-numeric value ({exc})") from exc
    return header, data.reshape(len(body), len(header))


def split_target(header: list[str], data: np.ndarray, target: str | None):
    """Separate the target column (if present) from the feature columns."""
    if target and target in header:
        j = header.index(target)
        keep = [i for i in range(len(header)) if i != j]
        return [header[i] for i in keep], data[:, keep], data[:, j]
    return header, data, None


def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) if isinstance(v, float) or
                        isinstance(v, np.floating) else v for v in r])


def write_json(path: str | Path, kind: str, payload: dict) -> None:
    doc = {"schema": f"shapprop.{kind}/{SCHEMA_VERSION}", **payload}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp for reproducible manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def write_manifest(output: str | Path, command: str, config: dict, seed: int | None,
                   inputs: Sequence[str | Path] = (), extra_outputs: Sequence[str | Path] = ()) -> Path:
    from . import __version__

    path = Path(str(output) + ".manifest.json")
    outputs = [output, *extra_outputs]
    doc = {
        "command": command,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()},
        "seed": seed,
        "versions": {"shapprop": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "created": _timestamp(),
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
        "argv": sys.argv[1:],
    }
    write_json(path, "manifest", doc)
    return path
