"""Atomic file output, CSV matrices and dataset (de)serialization."""

import csv
import io as _io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .models import GraphSample, ParamVector
from .posterior import NormalizationRecord


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    return x


def write_json(path, obj):
    _atomic_write(path, json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _fmt(v):
    if isinstance(v, (str, np.str_)):
        return str(v)
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows):
    """Write rows with shortest round-trip float formatting."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [row for row in r]
    return header, rows


def write_matrix(path, M, header=None):
    M = np.atleast_2d(M)
    if header is None:
        header = [f"c{j}" for j in range(M.shape[1])]
    write_csv(path, header, M.tolist())


def read_matrix(path):
    header, rows = read_csv(path)
    return header, np.array([[float(v) for v in row] for row in rows]).reshape(len(rows),
                                                                              len(header))


def write_samples(path, W, layout, meta=None):
    """Parameter draws as CSV (columns ``layer[k]``) plus a JSON sidecar."""
    W = np.atleast_2d(W)
    names = ParamVector(np.zeros(W.shape[1]), layout).column_names()
    write_matrix(path, W, names)
    side = dict(meta or {})
    side["layout"] = [list(x) for x in layout]
    side["n_rows"] = int(W.shape[0])
    write_json(str(path) + ".json", side)


def read_samples(path):
    header, W = read_matrix(path)
    side_path = str(path) + ".json"
    side = read_json(side_path) if os.path.exists(side_path) else {}
    return header, W, side


# --------------------------------------------------------------------------
# datasets

def save_dataset(directory, samples, manifest):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_json(directory / f"{s.name}.json", s.to_dict())
    write_json(directory / "manifest.json", manifest)


def load_dataset(directory):
    """Returns ``(samples_by_name, manifest, record)``."""
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    names = manifest.get("train", []) + manifest.get("heldout", [])
    samples = {n: GraphSample.from_dict(read_json(directory / f"{n}.json")) for n in names}
    rec = manifest.get("normalization")
    record = NormalizationRecord.from_dict(rec) if rec else None
    return samples, manifest, record
