"""Named parameter storage with group partition and checkpoint I/O."""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

GROUPS = ("ego", "agent", "shared")
CHECKPOINT_VERSION = 1


class ParamStore:
    """Trainable arrays keyed by dotted names, each tagged with one group."""

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}
        self.groups: dict[str, str] = {}

    def add(self, prefix: str, arrays: dict, group: str) -> None:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group '{group}'")
        for key, value in arrays.items():
            name = f"{prefix}.{key}"
            if name in self.arrays:
                raise KeyError(f"duplicate parameter '{name}'")
            self.arrays[name] = np.array(value, dtype=np.float64)
            self.groups[name] = group

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.arrays if group is None or self.groups[n] == group]

    def tensors(self) -> dict[str, Tensor]:
        """Fresh leaf tensors sharing memory with the stored arrays."""
        return {name: Tensor(arr, requires_grad=True, name=name) for name, arr in self.arrays.items()}

    def gradients(self, tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradients from a backward pass; parameters off the graph get zeros."""
        return {
            n: (tensors[n].grad if tensors[n].grad is not None else np.zeros_like(a))
            for n, a in self.arrays.items()
        }

    def copy(self) -> "ParamStore":
        other = ParamStore()
        other.arrays = {n: a.copy() for n, a in self.arrays.items()}
        other.groups = dict(self.groups)
        return other

    def nested(self, source: dict | None = None) -> dict:
        """View as ``{"dec": {"gru": {"Wx": ..}}, ...}`` for the layer functions."""
        source = self.arrays if source is None else source
        tree: dict = {}
        for name, value in source.items():
            *path, leaf = name.split(".")
            node = tree
            for part in path:
                node = node.setdefault(part, {})
            node[leaf] = value
        return tree


def save_checkpoint(path, store: ParamStore, header: dict) -> None:
    payload = {
        "format": "capo-checkpoint",
        "version": CHECKPOINT_VERSION,
        "groups": store.groups,
        "shapes": {n: list(a.shape) for n, a in store.arrays.items()},
        **header,
    }
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(payload, sort_keys=True)), **store.arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != "capo-checkpoint":
            raise ValueError(f"{path} is not a capo checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        store = ParamStore()
        for name, shape in header["shapes"].items():
            arr = np.array(data[name], dtype=np.float64)
            if list(arr.shape) != shape:
                raise ValueError(f"checkpoint array '{name}' has shape {arr.shape}, header says {shape}")
            store.arrays[name] = arr
            store.groups[name] = header["groups"][name]
    return store, header
