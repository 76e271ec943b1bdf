"""Bit-exact parameter snapshots and their JSON serialization.

File layout (version 1)::

    {"format": "attn-tta-snapshot", "version": 1,
     "params": [{"name": str, "shape": [int, ...], "data": base64(<f8 bytes)}, ...]}
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import DiffTensor

FORMAT = "attn-tta-snapshot"
VERSION = 1


class SnapshotMismatch(ValueError):
    def __init__(self, missing: list[str], extra: list[str], detail: str = ""):
        self.missing = missing
        self.extra = extra
        parts = []
        if missing:
            parts.append(f"missing {missing}")
        if extra:
            parts.append(f"extra {extra}")
        if detail:
            parts.append(detail)
        super().__init__("parameter set mismatch: " + "; ".join(parts))


@dataclass
class ParameterSnapshot:
    entries: list[tuple[str, np.ndarray]] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.entries)

    def equals(self, other: "ParameterSnapshot") -> bool:
        """Exact (bitwise) equality, names and order included."""
        if self.names != other.names:
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for (_, a), (_, b) in zip(self.entries, other.entries))

    def to_json_dict(self) -> dict:
        params = []
        for name, arr in self.entries:
            le = np.ascontiguousarray(arr, dtype="<f8")
            params.append({"name": name, "shape": list(arr.shape),
                           "data": base64.b64encode(le.tobytes()).decode("ascii")})
        return {"format": FORMAT, "version": VERSION, "params": params}

    @classmethod
    def from_json_dict(cls, d: dict) -> "ParameterSnapshot":
        if d.get("format") != FORMAT:
            raise ValueError(f"not a parameter snapshot (format={d.get('format')!r})")
        if d.get("version") != VERSION:
            raise ValueError(f"unsupported snapshot version {d.get('version')!r}")
        entries = []
        for p in d["params"]:
            raw = base64.b64decode(p["data"])
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(p["shape"])
            entries.append((p["name"], arr))
        return cls(entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ParameterSnapshot":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def take_snapshot(params: Mapping[str, DiffTensor]) -> ParameterSnapshot:
    return ParameterSnapshot([(name, p.values.copy()) for name, p in params.items()])


def restore_snapshot(params: Mapping[str, DiffTensor], snap: ParameterSnapshot) -> None:
    """Copy snapshot values into ``params`` in place."""
    have, want = set(params), set(snap.names)
    if have != want:
        raise SnapshotMismatch(sorted(have - want), sorted(want - have))
    for name, arr in snap.entries:
        p = params[name]
        if p.shape != arr.shape:
            raise SnapshotMismatch([], [], detail=f"{name}: shape {p.shape} vs {arr.shape}")
        np.copyto(p.values, arr)
