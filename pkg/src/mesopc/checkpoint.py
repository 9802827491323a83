"""CKPT1 checkpoint container: JSON header plus raw float32 weights.

Layout: magic "CKPTv001", u64 little-endian header length, JSON header
{kind, config, manifest}, then the concatenated float32 little-endian
arrays.  Manifest entries carry name/shape/offset (byte offset into the
payload) and must not overlap; round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, ShapeMismatchError

CKPT_MAGIC = b"CKPTv001"


def save_checkpoint(
    path: Path | str, kind: str, config: dict, arrays: dict[str, np.ndarray]
) -> Path:
    path = Path(path)
    names = sorted(arrays)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps(
        {"kind": kind, "config": config, "manifest": manifest}, sort_keys=True
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path: Path | str) -> tuple[str, dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CorruptFileError(f"corrupt checkpoint: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", f.read(8))
        try:
            header = json.loads(f.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptFileError(f"corrupt checkpoint header ({e})") from e
        payload = f.read()

    manifest = header["manifest"]
    spans = []
    arrays = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        start = entry["offset"]
        spans.append((start, start + nbytes, entry["name"]))
        if start + nbytes > len(payload):
            raise ShapeMismatchError(
                f"checkpoint array {entry['name']!r} overruns payload"
            )
        arrays[entry["name"]] = (
            np.frombuffer(payload[start : start + nbytes], dtype="<f4")
            .reshape(shape)
            .copy()
        )
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CorruptFileError(f"checkpoint arrays {n0!r} and {n1!r} overlap")
    return header["kind"], header["config"], arrays
