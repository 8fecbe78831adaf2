"""Checkpoint persistence.

Binary layout, all integers little-endian:

    bytes 0..3   magic "AFL1"
    bytes 4..11  u64 length of the metadata document
    ...          UTF-8 JSON metadata (format version, phase, architecture
                 descriptors, RNG info, training metadata, array index)
    ...          raw float32 arrays, in array-index order
    last 8       blake2b-64 checksum of every preceding byte

Arrays are stored in float32; live parameters are canonicalized to
float32-representable values when a checkpoint is snapshotted, so eval
outputs before saving and after loading are bit-identical.  Loading parses
and verifies everything before constructing any state: a corrupt file is
rejected without partial effects.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .nets import Network
from .feedback import FeedbackModule

__all__ = [
    "CheckpointError",
    "ChecksumError",
    "VersionError",
    "TruncatedError",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "FORMAT_VERSION",
]

MAGIC = b"AFL1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class Checkpoint:
    """Self-contained snapshot: architecture descriptors plus every
    persistent array (parameters, BN running stats, SN vectors, loss
    curves), all float32."""

    def __init__(self, phase: int, arch: dict, arrays: dict,
                 rng_info: dict, train_meta: dict,
                 format_version: int = FORMAT_VERSION):
        self.format_version = format_version
        self.phase = phase
        self.arch = arch
        self.arrays = {k: np.asarray(v, dtype=np.float32)
                       for k, v in arrays.items()}
        self.rng_info = dict(rng_info)
        self.train_meta = dict(train_meta)

    # -- construction from live networks -------------------------------------

    @classmethod
    def snapshot(cls, phase: int, G: Network, D: Network,
                 modules: list[FeedbackModule], rng_info: dict,
                 train_meta: dict, curves: dict | None = None) -> "Checkpoint":
        """Canonicalizes the live networks to float32 precision (so the
        round-trip contract holds), then captures their state."""
        G.canonicalize_float32()
        D.canonicalize_float32()
        for m in modules:
            m.inner.canonicalize_float32()
        arrays: dict[str, np.ndarray] = {}
        for key, arr in G.state_arrays().items():
            arrays[f"G/{key}"] = arr
        for key, arr in D.state_arrays().items():
            arrays[f"D/{key}"] = arr
        for m in modules:
            for key, arr in m.inner.state_arrays().items():
                arrays[f"F/{m.name}/{key}"] = arr
        for name, values in (curves or {}).items():
            arrays[f"meta/{name}"] = np.asarray(values, dtype=np.float32)
        arch = {
            "g": G.describe(),
            "d": D.describe(),
            "modules": [m.describe() for m in modules],
        }
        return cls(phase, arch, arrays, rng_info, train_meta)

    def build(self) -> tuple[Network, Network, list[FeedbackModule]]:
        """Rebuild eval-mode networks and feedback modules from descriptors
        and stored arrays alone."""
        G = Network.from_descriptor(self.arch["g"])
        D = Network.from_descriptor(self.arch["d"])
        G.load_state_arrays(self._scoped("G/"))
        D.load_state_arrays(self._scoped("D/"))
        modules = []
        for desc in self.arch["modules"]:
            m = FeedbackModule.from_descriptor(desc)
            m.inner.load_state_arrays(self._scoped(f"F/{m.name}/"))
            modules.append(m)
        G.set_mode("eval")
        D.set_mode("eval")
        for m in modules:
            m.set_mode("eval")
        return G, D, modules

    def _scoped(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.arrays.items()
                if k.startswith(prefix)}

    def curve(self, name: str) -> np.ndarray:
        return self.arrays.get(f"meta/{name}", np.zeros(0, dtype=np.float32))

    # -- serialization --------------------------------------------------------

    def to_bytes(self) -> bytes:
        names = sorted(self.arrays)
        meta = {
            "format_version": self.format_version,
            "phase": self.phase,
            "arch": self.arch,
            "rng": self.rng_info,
            "train_meta": self.train_meta,
            "arrays": [{"name": n, "shape": list(self.arrays[n].shape)}
                       for n in names],
        }
        meta_bytes = json.dumps(meta, sort_keys=True,
                                separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, len(meta_bytes).to_bytes(8, "little"), meta_bytes]
        for n in names:
            arr = np.ascontiguousarray(self.arrays[n], dtype="<f4")
            parts.append(arr.tobytes())
        body = b"".join(parts)
        digest = hashlib.blake2b(body, digest_size=8).digest()
        return body + digest

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 8 + 8:
            raise TruncatedError(f"file too short ({len(blob)} bytes)")
        if blob[:4] != MAGIC:
            raise CheckpointError(f"bad magic {blob[:4]!r}")
        body, digest = blob[:-8], blob[-8:]
        if hashlib.blake2b(body, digest_size=8).digest() != digest:
            raise ChecksumError("checksum mismatch")
        meta_len = int.from_bytes(blob[4:12], "little")
        if 12 + meta_len > len(body):
            raise TruncatedError("metadata extends past end of file")
        try:
            meta = json.loads(blob[12:12 + meta_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable metadata: {e}") from None
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionError(f"format version {version!r}, expected "
                               f"{FORMAT_VERSION}")
        offset = 12 + meta_len
        arrays = {}
        for entry in meta["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 4
            if offset + nbytes > len(body):
                raise TruncatedError(f"array {entry['name']!r} truncated")
            arr = np.frombuffer(body, dtype="<f4", count=count,
                                offset=offset).reshape(shape)
            arrays[entry["name"]] = arr.copy()
            offset += nbytes
        if offset != len(body):
            raise TruncatedError(f"{len(body) - offset} unexpected trailing bytes")
        return cls(meta["phase"], meta["arch"], arrays, meta["rng"],
                   meta["train_meta"], format_version=version)

    def save(self, path: str) -> None:
        blob = self.to_bytes()
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise CheckpointError(f"cannot read {path}: {exc}") from exc
        return cls.from_bytes(blob)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    ckpt.save(path)


def load_checkpoint(path: str) -> Checkpoint:
    return Checkpoint.load(path)
