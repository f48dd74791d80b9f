"""Checkpoints as canonical JSON; arrays are stored as base64 little-endian float64."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Checkpoint:
    role: str  # "teacher" or "student"
    params: dict  # name -> float64 ndarray
    config: dict
    rng_state: dict
    epoch: int = 0
    num_classes: int = 0
    class_weights: list = field(default_factory=list)
    class_names: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "role": self.role,
            "epoch": int(self.epoch),
            "num_classes": int(self.num_classes),
            "class_weights": [float(w) for w in self.class_weights],
            "class_names": list(self.class_names),
            "config": self.config,
            "rng_state": self.rng_state,
            "params": {
                name: {
                    "shape": list(arr.shape),
                    "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
                }
                for name, arr in sorted(self.params.items())
            },
        }

    def dumps(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_json(cls, doc: dict) -> "Checkpoint":
        params = {}
        for name, entry in doc["params"].items():
            raw = base64.b64decode(entry["data"])
            params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        return cls(
            doc["role"],
            params,
            doc["config"],
            doc["rng_state"],
            doc.get("epoch", 0),
            doc.get("num_classes", 0),
            doc.get("class_weights", []),
            doc.get("class_names", []),
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_json(json.loads(fh.read().decode("utf-8")))


def snapshot(named_params) -> dict:
    return {name: p.data.copy() for name, p in named_params}


def restore(named_params, params: dict, strict: bool = True) -> None:
    for name, p in named_params:
        if name not in params:
            if strict:
                raise KeyError(f"checkpoint has no parameter {name!r}")
            continue
        if params[name].shape != p.data.shape:
            raise ValueError(f"parameter {name}: checkpoint shape {params[name].shape} != model {p.data.shape}")
        p.data[...] = params[name]
