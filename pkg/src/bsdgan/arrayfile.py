"""Single-file artifact format: JSON manifest + named little-endian float32 arrays.

Layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header, then the raw
array payload. The header's ``arrays`` list records name/shape/offset/nbytes
for every array so loaders can validate before materializing anything.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"BSDGANv1"


def write_array_file(path: str | os.PathLike, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    """Atomically write named float32 arrays with a JSON manifest."""
    path = Path(path)
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": len(payload), "nbytes": arr.nbytes}
        )
        payload += arr.tobytes()
    header = dict(meta)
    header["kind"] = kind
    header["arrays"] = entries
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        fh.write(bytes(payload))
    os.replace(tmp, path)
    return path


def read_array_file(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Read (manifest, arrays); every recorded name/shape/length is validated."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no artifact file at {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path.name}: bad magic, not an artifact file")
    header_len = int(np.frombuffer(raw, dtype="<u8", count=1, offset=len(MAGIC))[0])
    body_start = len(MAGIC) + 8
    try:
        header = json.loads(raw[body_start : body_start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path.name}: corrupt manifest ({exc})") from exc
    payload = raw[body_start + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path.name}: array {entry['name']!r} overruns payload")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start).copy()
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{path.name}: array {entry['name']!r} size/shape mismatch")
        arrays[entry["name"]] = arr.reshape(shape)
    return header, arrays
