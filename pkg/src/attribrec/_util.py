"""Small shared helpers: seeded RNG derivation, atomic file writes, hashing."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np


def child_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Derive an independent generator from a master seed and an integer path.

    The same (seed, path) always yields the same stream, so every stage of the
    pipeline can be reseeded independently from one ``--seed``.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(master_seed), *map(int, path)])))


def atomic_write_text(path: str, text: str) -> None:
    """Write text to ``path`` via a temp file + rename so readers never see partial output."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def stable_hash(obj) -> str:
    """sha256 of a JSON-serializable object with canonical key order."""
    payload = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def array_checksum(arrays) -> str:
    """sha256 over the raw bytes of a sequence of arrays (order-sensitive)."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()
