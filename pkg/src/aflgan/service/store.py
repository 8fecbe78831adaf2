"""Checkpoint directory access and the bounded trace cache."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..checkpoint import Checkpoint, load_checkpoint
from ..feedback import DEFAULT_ALPHA

__all__ = ["StoreError", "CheckpointStore", "TraceStore", "trace_id"]

CHECKPOINT_SUFFIX = ".afl1"


class StoreError(Exception):
    pass


def _is_image_arch(ckpt: Checkpoint) -> bool:
    kinds = {layer["kind"] for layer in ckpt.arch["g"]["layers"]}
    return bool(kinds & {"conv2d", "conv2d_transpose"})


class CheckpointStore:
    """Read-only view of a directory of .afl1 files.

    Loads are cached per (path, mtime, size), so replacing a file on disk
    swaps in the new snapshot atomically on the next request.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self._cache: dict[str, tuple[tuple, Checkpoint]] = {}

    def ids(self) -> list[str]:
        if not self.directory.is_dir():
            return []
        return sorted(p.stem for p in self.directory.glob("*" + CHECKPOINT_SUFFIX))

    def path(self, checkpoint_id: str) -> Path:
        if "/" in checkpoint_id or "\\" in checkpoint_id or ".." in checkpoint_id:
            raise StoreError(f"invalid checkpoint id {checkpoint_id!r}")
        return self.directory / (checkpoint_id + CHECKPOINT_SUFFIX)

    def load(self, checkpoint_id: str) -> Checkpoint:
        path = self.path(checkpoint_id)
        if not path.is_file():
            raise StoreError(f"unknown checkpoint {checkpoint_id!r}")
        st = path.stat()
        key = (st.st_mtime_ns, st.st_size)
        hit = self._cache.get(checkpoint_id)
        if hit and hit[0] == key:
            return hit[1]
        ckpt = load_checkpoint(path)
        self._cache[checkpoint_id] = (key, ckpt)
        return ckpt

    def summary(self, checkpoint_id: str) -> dict:
        ckpt = self.load(checkpoint_id)
        return {
            "id": checkpoint_id,
            "phase": ckpt.phase,
            "kind": "images" if _is_image_arch(ckpt) else "points",
            "n_modules": len(ckpt.arch.get("modules", [])),
        }

    def describe(self, checkpoint_id: str) -> dict:
        ckpt = self.load(checkpoint_id)
        modules = [
            {
                "name": m["name"],
                "variant": m["variant"],
                "binding": list(m["binding"]),
                "disc_shape": list(m["disc_shape"]),
                "gen_shape": list(m["gen_shape"]),
            }
            for m in ckpt.arch.get("modules", [])
        ]
        info = self.summary(checkpoint_id)
        info["modules"] = modules
        info["default_alpha"] = DEFAULT_ALPHA
        return info


def trace_id(arr: np.ndarray) -> str:
    """Content-addressed id: same array, same id, across processes."""
    h = hashlib.blake2b(digest_size=12)
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


class TraceStore:
    """Bounded LRU of generated sample arrays, addressable by content id."""

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise StoreError("trace capacity must be >= 1")
        self.capacity = capacity
        self._items: OrderedDict[str, np.ndarray] = OrderedDict()

    def put(self, arr: np.ndarray) -> str:
        key = trace_id(arr)
        if key in self._items:
            self._items.move_to_end(key)
        else:
            self._items[key] = np.array(arr, dtype=np.float64, copy=True)
            while len(self._items) > self.capacity:
                self._items.popitem(last=False)
        return key

    def get(self, key: str) -> np.ndarray | None:
        arr = self._items.get(key)
        if arr is not None:
            self._items.move_to_end(key)
        return arr

    def __len__(self) -> int:
        return len(self._items)
