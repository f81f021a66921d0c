"""Versioned JSON checkpoints of a ParamStore.

Floats are written with ``repr`` precision so save -> load is bit exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .layers import ParamStore

FORMAT = "drama-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": [float(x) for x in arr.ravel()]}


def _unpack(doc: dict, name: str) -> np.ndarray:
    try:
        arr = np.asarray(doc["values"], dtype=np.float64)
        return arr.reshape(doc["shape"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt entry {name!r}: {exc}") from None


def to_document(store: ParamStore, config: dict | None = None, extra: dict | None = None) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": config or {},
        "params": {n: _pack(store[n].data) for n in store.names()},
        "buffers": {n: _pack(store.buffers[n]) for n in sorted(store.buffers)},
        "extra": extra or {},
    }


def from_document(doc: dict, expect: ParamStore | None = None) -> ParamStore:
    if doc.get("format") != FORMAT:
        raise CheckpointError("not a drama checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')} != supported {VERSION}")
    store = ParamStore()
    for name in sorted(doc["params"]):
        store.add(name, _unpack(doc["params"][name], name))
    store.buffers = {n: _unpack(v, n) for n, v in doc["buffers"].items()}
    if expect is not None:
        check_compatible(store, expect)
    return store


def check_compatible(store: ParamStore, expect: ParamStore) -> None:
    """Raise naming the first parameter whose presence or shape differs."""
    for name in sorted(set(store.names()) | set(expect.names())):
        if name not in store:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if name not in expect:
            raise CheckpointError(f"checkpoint has unexpected parameter {name!r}")
        a, b = store[name].data.shape, expect[name].data.shape
        if a != b:
            raise CheckpointError(f"parameter {name!r}: checkpoint shape {a} != model shape {b}")


def save(path, store: ParamStore, config: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_document(store, config, extra)))
    return path


def load(path, expect: ParamStore | None = None) -> tuple[ParamStore, dict]:
    doc = json.loads(Path(path).read_text())
    return from_document(doc, expect), doc
