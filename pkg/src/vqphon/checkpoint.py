"""Binary checkpoint container: a JSON header plus raw float64 payloads.

Layout: magic "VQCK", version u32, header length u32, UTF-8 JSON header,
then the arrays' little-endian float64 bytes in header order. Round
trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

CHECKPOINT_MAGIC = b"VQCK"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def write_container(path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    meta = dict(header)
    meta["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    (hlen,) = struct.unpack_from("<I", raw, 8)
    if 12 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    arrays: dict[str, np.ndarray] = {}
    for entry in header.pop("arrays", []):
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(
            raw[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
    return header, arrays
