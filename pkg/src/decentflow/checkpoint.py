"""Bit-exact binary checkpoint container.

Layout::

    8 bytes   magic b"DFLOWCKP"
    4 bytes   format version, uint32 little-endian
    4 bytes   header length n, uint32 little-endian
    n bytes   UTF-8 JSON header (sorted keys, compact separators)
    32 bytes  SHA-256 of the 16-byte prefix plus the header bytes
    payload   every tensor as little-endian float32, in header order

The header carries the SHA-256 of the payload, so every byte of the file is
covered by one of the two digests.  Tensors are computed in
float64 and rounded to float32 on store; ``store(load(store(c)))`` reproduces
the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DFLOWCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_HEAD_DIGEST = 32


class CheckpointError(IOError):
    """Unreadable or malformed checkpoint."""


class CorruptCheckpointError(CheckpointError):
    """Payload digest does not match the header."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint written by an unknown format version."""


@dataclass
class Checkpoint:
    model_kind: str
    owner: int | str
    config: dict
    seed: int
    step: int
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def rounded(self) -> "Checkpoint":
        """Copy with every tensor rounded through float32, i.e. what a store/load round trip yields."""
        def r(d):
            return {k: np.asarray(v, dtype="<f4").astype(np.float64) for k, v in d.items()}

        return Checkpoint(self.model_kind, self.owner, self.config, self.seed, self.step,
                          r(self.params), r(self.ema), dict(self.provenance))

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for section, tensors in (("params", self.params), ("ema", self.ema)):
            for name, arr in tensors.items():
                raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                entries.append({"name": name, "section": section, "shape": list(np.shape(arr)),
                                "offset": offset, "nbytes": len(raw)})
                chunks.append(raw)
                offset += len(raw)
        payload = b"".join(chunks)
        header = {
            "format_version": FORMAT_VERSION,
            "model_kind": self.model_kind,
            "owner": self.owner,
            "config": self.config,
            "seed": self.seed,
            "step": self.step,
            "digest": "sha256:" + hashlib.sha256(payload).hexdigest(),
            "payload_bytes": len(payload),
            "tensors": entries,
            "provenance": self.provenance,
        }
        body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        head = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(body)) + body
        return head + hashlib.sha256(head).digest() + payload

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "Checkpoint":
        header, start = _parse_header(blob[:_PREFIX.size], lambda n: blob[_PREFIX.size:_PREFIX.size + n], source)
        payload = blob[start:]
        if len(payload) != header["payload_bytes"]:
            raise CorruptCheckpointError(f"{source}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
        digest = "sha256:" + hashlib.sha256(payload).hexdigest()
        if digest != header["digest"]:
            raise CorruptCheckpointError(f"{source}: payload digest mismatch")
        sections: dict[str, dict[str, np.ndarray]] = {"params": {}, "ema": {}}
        for e in header["tensors"]:
            raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(e["shape"])
            sections[e["section"]][e["name"]] = arr
        return cls(header["model_kind"], header["owner"], header["config"], header["seed"],
                   header["step"], sections["params"], sections["ema"], header["provenance"])


def _parse_header(prefix: bytes, read, source: str) -> tuple[dict, int]:
    if len(prefix) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated checkpoint")
    magic, version, n = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{source}: format version {version} unsupported (expected {FORMAT_VERSION})")
    raw = read(n + _HEAD_DIGEST)
    if len(raw) != n + _HEAD_DIGEST:
        raise CheckpointError(f"{source}: truncated header")
    raw, check = raw[:n], raw[n:]
    if hashlib.sha256(prefix + raw).digest() != check:
        raise CorruptCheckpointError(f"{source}: header digest mismatch")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{source}: unreadable header ({exc})") from None
    return header, _PREFIX.size + n + _HEAD_DIGEST


def store_checkpoint(ckpt: Checkpoint, path) -> str:
    """Atomic write; returns the payload digest."""
    path = Path(path)
    blob = ckpt.to_bytes()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return read_header(path)["digest"]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
    return Checkpoint.from_bytes(blob, str(path))


def read_header(path) -> dict:
    """Header only; the tensor payload is not read."""
    with open(path, "rb") as fh:
        header, _ = _parse_header(fh.read(_PREFIX.size), fh.read, str(path))
    return header


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
