"""Single-file binary checkpoint format.

Layout:

    bytes 0..3    magic b"MJPK"
    bytes 4..5    format version, little-endian uint16 (currently 1)
    bytes 6..9    header length N, little-endian uint32
    bytes 10..10+N  UTF-8 JSON header
    remainder     raw array payloads, little-endian, concatenated

The JSON header holds a free-form "meta" dict (training step, seed, config
digest, ...) and an "arrays" dict mapping each name to dtype string, shape
list, and byte offset into the payload region. Offsets are relative to the
end of the header. Round-trips are bit-exact: the bytes written for an array
are exactly `arr.tobytes()` of its little-endian form.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"MJPK"
VERSION = 1

# single-byte types carry "|" (not applicable) as their byte-order character
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "|u1"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write arrays + JSON-serializable meta to a single MJPK file."""
    entries = {}
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        dtype_str = le.dtype.str
        if dtype_str not in _ALLOWED_DTYPES:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw = le.tobytes()
        entries[name] = {"dtype": dtype_str, "shape": list(arr.shape), "offset": offset}
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION.to_bytes(2, "little"))
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an MJPK file back into (arrays, meta)."""
    data = Path(path).read_bytes()
    if len(data) < 10 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = int.from_bytes(data[4:6], "little")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    hlen = int.from_bytes(data[6:10], "little")
    if 10 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    body = data[10 + hlen :]
    arrays = {}
    for name, ent in header["arrays"].items():
        dtype = np.dtype(ent["dtype"])
        shape = tuple(ent["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        start = ent["offset"]
        chunk = body[start : start + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload for array {name!r}")
        arrays[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
    return arrays, header["meta"]
