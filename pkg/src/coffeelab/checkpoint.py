"""Binary checkpoint: magic, u64 header length, JSON header, then the arrays
as concatenated little-endian float32 in header order."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"COFFEECK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


def fingerprint(obj) -> str:
    """sha256 of the canonical JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    vocabulary: list[str] = field(default_factory=list)
    schedule: dict = field(default_factory=dict)
    fingerprint: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "vocabulary": list(self.vocabulary),
            "arrays": [{"name": k, "shape": list(v.shape)} for k, v in self.arrays.items()],
            "schedule": self.schedule,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "meta": self.meta,
        }


def to_bytes(ckpt: Checkpoint) -> bytes:
    head = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<Q", len(head)), head]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in ckpt.arrays.values()]
    return b"".join(parts)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path, expect_fingerprint: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(raw) < start + hlen:
        raise CheckpointTruncatedError(f"{path}: header truncated ({len(raw) - start} of {hlen} bytes)")
    head = json.loads(raw[start: start + hlen])
    if head.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {head.get('format_version')} but this build reads {FORMAT_VERSION}")
    if expect_fingerprint is not None and head["fingerprint"] != expect_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: fingerprint {head['fingerprint']} does not match expected {expect_fingerprint}")
    blob = raw[start + hlen:]
    expected = sum(int(np.prod(a["shape"], dtype=np.int64)) for a in head["arrays"]) * 4
    if len(blob) != expected:
        raise CheckpointTruncatedError(f"{path}: blob has {len(blob)} bytes, expected {expected}")
    arrays, off = {}, 0
    for a in head["arrays"]:
        n = int(np.prod(a["shape"], dtype=np.int64))
        arrays[a["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float32) \
            .reshape(a["shape"])
        off += 4 * n
    return Checkpoint(arrays, head["vocabulary"], head["schedule"], head["fingerprint"], head["seed"],
                      head.get("meta", {}))
