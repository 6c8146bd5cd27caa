"""Canonical parameter export: ``params.json`` descriptor + ``params.f32`` blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_params(params: dict[str, np.ndarray], directory, stem: str = "params") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name in sorted(params):
        a = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.ravel())
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob.tofile(directory / f"{stem}.f32")
    with open(directory / f"{stem}.json", "w", encoding="utf-8") as fh:
        json.dump({"dtype": "float32", "byte_order": "little", "count": int(offset),
                   "params": entries}, fh, indent=1)


def load_params(directory, stem: str = "params", dtype=np.float64) -> dict[str, np.ndarray]:
    directory = Path(directory)
    with open(directory / f"{stem}.json", encoding="utf-8") as fh:
        desc = json.load(fh)
    blob = np.fromfile(directory / f"{stem}.f32", dtype="<f4")
    if blob.size != desc["count"]:
        raise ValueError(f"{stem}.f32 holds {blob.size} values, descriptor says {desc['count']}")
    out = {}
    for e in desc["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        out[e["name"]] = blob[e["offset"] : e["offset"] + n].reshape(e["shape"]).astype(dtype)
    return out
