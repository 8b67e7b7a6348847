"""Flat parameter vectors with named segments, plus the npz checkpoint container."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

CHECKPOINT_VERSION = 1


@dataclass
class ParamVector:
    """A flat float64 vector whose slices are addressed by name.

    ``segments`` maps a name to ``(offset, shape)``; segments tile the vector
    in insertion order.
    """

    values: np.ndarray
    segments: Dict[str, Tuple[int, Tuple[int, ...]]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        total = sum(int(np.prod(shape)) for _, shape in self.segments.values())
        if total != self.values.size:
            raise ValueError(f"segments cover {total} values, vector has {self.values.size}")

    @classmethod
    def zeros(cls, shapes: Mapping[str, Tuple[int, ...]]) -> "ParamVector":
        segments, offset = {}, 0
        for name, shape in shapes.items():
            shape = tuple(int(s) for s in shape)
            segments[name] = (offset, shape)
            offset += int(np.prod(shape))
        return cls(np.zeros(offset), segments)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        pv = cls.zeros({k: np.shape(v) for k, v in arrays.items()})
        for k, v in arrays.items():
            pv[k] = v
        return pv

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.segments[name]
        return self.values[offset : offset + int(np.prod(shape))].reshape(shape)

    def __setitem__(self, name: str, value) -> None:
        self[name][...] = value

    def like(self, values: np.ndarray) -> "ParamVector":
        """Same segment table, new values (copied)."""
        return ParamVector(np.array(values, dtype=np.float64), dict(self.segments))

    def copy(self) -> "ParamVector":
        return self.like(self.values)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def segment_table(self) -> Dict[str, list]:
        return {k: [off, list(shape)] for k, (off, shape) in self.segments.items()}


def save_params(path, params: Mapping[str, ParamVector], meta: Mapping | None = None) -> None:
    """Write several named ParamVectors and a JSON metadata blob to one ``.npz``."""
    payload = {"__version__": np.array(CHECKPOINT_VERSION)}
    tables = {}
    for name, pv in params.items():
        payload[f"values/{name}"] = pv.values
        tables[name] = pv.segment_table()
    payload["__segments__"] = np.array(json.dumps(tables))
    payload["__meta__"] = np.array(json.dumps(dict(meta or {})))
    with open(Path(path), "wb") as fh:
        np.savez(fh, **payload)


def load_params(path) -> Tuple[Dict[str, ParamVector], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        tables = json.loads(str(data["__segments__"]))
        meta = json.loads(str(data["__meta__"]))
        out = {}
        for name, table in tables.items():
            segments = {k: (int(off), tuple(shape)) for k, (off, shape) in table.items()}
            out[name] = ParamVector(data[f"values/{name}"].copy(), segments)
    return out, meta
