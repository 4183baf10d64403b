"""Canonical serialization and small file helpers."""

import csv
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _encode(obj, out):
    if obj is None or isinstance(obj, bool):
        out.append(json.dumps(obj))
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        if not math.isfinite(obj):
            # JSON has no literal for these; keep them distinguishable
            out.append(json.dumps("nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")))
        else:
            out.append(format(obj, ".17g"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _encode(obj[key], out)
        out.append("}")
    elif isinstance(obj, list):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _encode(v, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace, floats at 17 significant digits."""
    out = []
    _encode(_plain(obj), out)
    return "".join(out)


def content_hash(obj) -> str:
    """SHA-256 of the canonical JSON of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_hash(path, chunk=1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def directory_hash(path) -> str:
    """Hash of every file under ``path`` (relative names and contents)."""
    h = hashlib.sha256()
    root = Path(path)
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "DONE":
            h.update(str(p.relative_to(root)).encode())
            h.update(file_hash(p).encode())
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(canonical_json(obj) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(canonical_json(rec) + "\n")


def write_csv(path, rows, columns=None):
    """Write a list of dicts; floats use 17 significant digits."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([format(v, ".17g") if isinstance(v, (float, np.floating)) else _plain(v)
                        for v in (r.get(c, "") for c in columns)])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_vector_csv(path, values, header):
    """One value per line with ``# key=value`` metadata lines first."""
    with open(path, "w") as fh:
        for key in sorted(header):
            fh.write(f"# {key}={header[key]}\n")
        for v in np.asarray(values, dtype=float).ravel():
            fh.write(format(v, ".17g") + "\n")


def read_vector_csv(path):
    header, values = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                header[key] = val
            elif line.strip():
                values.append(float(line))
    return np.array(values), header


def atomic_dir_done(path):
    """Mark a stage directory complete."""
    Path(path, "DONE").write_text("ok\n")


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
