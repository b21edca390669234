"""Versioned binary checkpoint format for model weights.

Layout::

    bytes 0-3   magic b"PSGC"
    bytes 4-7   format version, uint32 little-endian
    bytes 8-11  header length in bytes, uint32 little-endian
    header      UTF-8 JSON (sorted keys, compact separators)
    payload     raw little-endian float32 blocks, concatenated in the order
                the header's "entries" list declares them

Each entry records name, kind ("param" or "buffer"), shape, and — for
parameters — the frozen flag.  Buffers carry batch-norm running statistics.
Values are stored as float32; a float32 save/load cycle is bit-exact.

The header's "config", "provenance", and "extra" slots hold caller-supplied
JSON (model geometry, surgery lineage, training metadata).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PSGC"
VERSION = 1


class CheckpointFormatError(ValueError):
    """File is not a readable checkpoint."""


class CheckpointVersionError(CheckpointFormatError):
    """Checkpoint was written by an unsupported format version."""


@dataclass
class CheckpointEntry:
    name: str
    kind: str  # "param" | "buffer"
    array: np.ndarray
    frozen: bool = False


@dataclass
class Checkpoint:
    entries: dict = field(default_factory=dict)  # name -> CheckpointEntry
    config: dict | None = None
    provenance: dict | None = None
    extra: dict | None = None
    version: int = VERSION


def save_checkpoint(path, entries, *, config=None, provenance=None, extra=None) -> None:
    entries = list(entries)
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise ValueError("duplicate entry names in checkpoint")
    described = []
    blocks = []
    for e in entries:
        if e.kind not in ("param", "buffer"):
            raise ValueError(f"unknown entry kind {e.kind!r} for {e.name!r}")
        arr = np.ascontiguousarray(e.array, dtype="<f4")
        desc = {"name": e.name, "kind": e.kind, "shape": list(arr.shape)}
        if e.kind == "param":
            desc["frozen"] = bool(e.frozen)
        described.append(desc)
        blocks.append(arr.tobytes())
    header = {
        "version": VERSION,
        "config": config,
        "provenance": provenance,
        "extra": extra,
        "entries": described,
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(payload)))
        fh.write(payload)
        for block in blocks:
            fh.write(block)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointFormatError(
                f"{path}: bad magic {magic!r}, expected {MAGIC!r}"
            )
        head = fh.read(8)
        if len(head) != 8:
            raise CheckpointFormatError(f"{path}: truncated fixed header")
        version, header_len = struct.unpack("<II", head)
        if version != VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version} unsupported (reader is {VERSION})"
            )
        raw = fh.read(header_len)
        if len(raw) != header_len:
            raise CheckpointFormatError(f"{path}: truncated JSON header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointFormatError(f"{path}: unreadable header: {err}") from err
        ck = Checkpoint(
            config=header.get("config"),
            provenance=header.get("provenance"),
            extra=header.get("extra"),
            version=version,
        )
        for desc in header["entries"]:
            shape = tuple(desc["shape"])
            count = int(np.prod(shape)) if shape else 1
            block = fh.read(4 * count)
            if len(block) != 4 * count:
                raise CheckpointFormatError(
                    f"{path}: truncated payload for entry {desc['name']!r}"
                )
            arr = np.frombuffer(block, dtype="<f4").reshape(shape).copy()
            ck.entries[desc["name"]] = CheckpointEntry(
                name=desc["name"],
                kind=desc["kind"],
                array=arr,
                frozen=bool(desc.get("frozen", False)),
            )
    return ck
