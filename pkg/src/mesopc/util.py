"""Small shared helpers: canonical JSON, digests, seed derivation."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def canonical_json(obj) -> str:
    """Serialize deterministically: sorted keys, fixed separators, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dump_json(obj, path: Path | str) -> None:
    Path(path).write_text(canonical_json(obj) + "\n")


def load_json(path: Path | str):
    return json.loads(Path(path).read_text())


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path | str, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            block = f.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def derive_seed(master: int, *tags) -> int:
    """Stable 32-bit sub-seed from a master seed and a tag path.

    Hash-based so that adding a new tagged stream never shifts the
    streams of existing tags.
    """
    text = ":".join([str(int(master))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:4], "little")


def rng_for(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))


def set_torch_threads(single_threaded: bool) -> None:
    import torch

    if single_threaded:
        torch.set_num_threads(1)
