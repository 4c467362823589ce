"""Sample-set files: same container layout as checkpoints, float32 payload.

``magic b"FLOWDATA" | uint32 version | uint32 header length | JSON header | sha256(prefix + header) | f32le samples``

The header records sample shape, count, seed, the payload digest, the global
index of every sample, and (optionally) ground-truth component labels.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FLOWDATA"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


class DataFileError(IOError):
    pass


@dataclass
class SampleSet:
    samples: np.ndarray
    global_ids: np.ndarray | None = None
    labels: np.ndarray | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        n = self.samples.shape[0]
        self.global_ids = np.arange(n, dtype=np.int64) if self.global_ids is None else np.asarray(self.global_ids, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.global_ids.shape != (n,):
            raise DataFileError("global_ids must have one entry per sample")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def subset(self, index) -> "SampleSet":
        labels = None if self.labels is None else self.labels[index]
        return SampleSet(self.samples[index], self.global_ids[index], labels, self.seed, dict(self.meta))

    def to_bytes(self) -> bytes:
        payload = np.ascontiguousarray(self.samples, dtype="<f4").tobytes()
        header = {
            "shape": list(self.sample_shape),
            "count": len(self),
            "seed": self.seed,
            "digest": "sha256:" + hashlib.sha256(payload).hexdigest(),
            "global_ids": self.global_ids.tolist(),
            "labels": None if self.labels is None else self.labels.tolist(),
            "meta": self.meta,
        }
        body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        head = _PREFIX.pack(MAGIC, VERSION, len(body)) + body
        return head + hashlib.sha256(head).digest() + payload


def round_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def sample_digests(samples: np.ndarray) -> list[str]:
    flat = np.ascontiguousarray(samples, dtype="<f4").reshape(len(samples), -1)
    return [hashlib.sha256(row.tobytes()).hexdigest() for row in flat]


def write_samples(ss: SampleSet, path) -> str:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(ss.to_bytes())
    os.replace(tmp, path)
    return read_data_header(path)["digest"]


def _parse(prefix: bytes, read, source: str) -> tuple[dict, int]:
    if len(prefix) < _PREFIX.size:
        raise DataFileError(f"{source}: truncated data file")
    magic, version, n = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise DataFileError(f"{source}: not a sample file (bad magic {magic!r})")
    if version != VERSION:
        raise DataFileError(f"{source}: unsupported sample-file version {version}")
    raw = read(n + 32)
    if len(raw) != n + 32 or hashlib.sha256(prefix + raw[:n]).digest() != raw[n:]:
        raise DataFileError(f"{source}: truncated or corrupt header")
    try:
        return json.loads(raw[:n].decode("utf-8")), _PREFIX.size + n + 32
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFileError(f"{source}: unreadable header ({exc})") from None


def read_data_header(path) -> dict:
    with open(path, "rb") as fh:
        header, _ = _parse(fh.read(_PREFIX.size), fh.read, str(path))
    return header


def read_samples(path) -> SampleSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, start = _parse(blob[:_PREFIX.size], lambda n: blob[_PREFIX.size:_PREFIX.size + n], str(path))
    if len(blob) - start != 4 * header["count"] * int(np.prod(header["shape"])):
        raise DataFileError(f"{path}: payload size does not match the header")
    payload = blob[start:]
    if "sha256:" + hashlib.sha256(payload).hexdigest() != header["digest"]:
        raise DataFileError(f"{path}: payload digest mismatch")
    samples = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape([header["count"]] + header["shape"])
    return SampleSet(samples, np.array(header["global_ids"], dtype=np.int64), header["labels"], header["seed"], header["meta"])
