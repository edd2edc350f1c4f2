"""Directory-of-arrays persistence: .npy files plus a JSON index.

The on-disk format is the standard NPY array format, one file per array,
with ``index.json`` recording name -> file, shape, dtype and sha256 so
consumers can verify integrity without loading everything.
"""
from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import numpy as np

INDEX_NAME = "index.json"


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_array_dir(out_dir: str | Path, arrays: dict[str, np.ndarray],
                   meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        fname = _slug(name) + ".npy"
        np.save(out / fname, arr)
        entries[name] = {
            "file": fname,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "sha256": sha256_file(out / fname),
        }
    index = {"format": "npy-dir/1", "arrays": entries, "meta": meta or {}}
    (out / INDEX_NAME).write_text(json.dumps(index, indent=2, sort_keys=True))
    return out


def load_array_dir(in_dir: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    src = Path(in_dir)
    index = json.loads((src / INDEX_NAME).read_text())
    arrays = {}
    for name, entry in index["arrays"].items():
        arrays[name] = np.load(src / entry["file"])
    return arrays, index.get("meta", {})
