"""Patch embedding store: flat ids mapped to float32 vectors.

Binary layout, integers little-endian:

    8 bytes   magic "PSEMBED1"
    4 bytes   uint32 embedding dimension D
    8 bytes   uint64 record count
    per record:
        2 bytes   uint16 id length
        id bytes  UTF-8
        D * 4     float32 little-endian values

Ids are ``<doc_id>/<export_name>`` for base patches; augmented variants
append ``#a<k>``. Values round-trip bit-exactly: the store is the single
place where single precision is allowed, everything downstream converts
to float64 on lookup.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class StoreError(ValueError):
    pass


class StoreMagicError(StoreError):
    """File does not start with the store magic."""


class StoreDimensionError(StoreError):
    """Vector length disagrees with the declared dimension."""


class StoreTruncatedError(StoreError):
    """File ends mid-record."""


class DuplicateIdError(StoreError):
    """The same patch id appears twice."""


class MissingIdsError(KeyError):
    """Lookup ids absent from the store, reported together."""

    def __init__(self, missing: list[str]):
        self.missing = missing
        preview = ", ".join(missing[:5])
        suffix = "" if len(missing) <= 5 else f" (+{len(missing) - 5} more)"
        super().__init__(f"{len(missing)} ids missing from store: {preview}{suffix}")


MAGIC = b"PSEMBED1"


def patch_id(doc_id: str, name: str, variant: int | None = None) -> str:
    base = f"{doc_id}/{name}"
    return base if variant is None else f"{base}#a{variant}"


class EmbeddingStore:
    """In-memory id -> float32 vector map with a fixed dimension."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise StoreDimensionError(f"dimension must be positive, got {dim}")
        self.dim = int(dim)
        self._vectors: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, pid: str) -> bool:
        return pid in self._vectors

    def ids(self) -> list[str]:
        return list(self._vectors)

    def add(self, pid: str, vec: np.ndarray) -> None:
        if pid in self._vectors:
            raise DuplicateIdError(f"duplicate patch id {pid!r}")
        v = np.asarray(vec, dtype="<f4").reshape(-1)
        if v.shape[0] != self.dim:
            raise StoreDimensionError(f"vector for {pid!r} has length {v.shape[0]}, store dim {self.dim}")
        self._vectors[pid] = v

    def get(self, pid: str) -> np.ndarray:
        if pid not in self._vectors:
            raise MissingIdsError([pid])
        return self._vectors[pid]

    def batch_lookup(self, pids: list[str]) -> np.ndarray:
        """Stack vectors in request order as float64; missing ids raise together."""
        missing = [p for p in pids if p not in self._vectors]
        if missing:
            raise MissingIdsError(missing)
        if not pids:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.stack([self._vectors[p] for p in pids]).astype(np.float64)

    def variants_of(self, base_id: str) -> list[str]:
        """The base id plus any augmented ids present, sorted."""
        out = [p for p in (base_id,) if p in self._vectors]
        prefix = base_id + "#a"
        out.extend(sorted(p for p in self._vectors if p.startswith(prefix)))
        return out


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<I", store.dim), struct.pack("<Q", len(store))]
    for pid, vec in store._vectors.items():
        pb = pid.encode("utf-8")
        if len(pb) > 0xFFFF:
            raise StoreError(f"patch id too long: {pid[:32]}...")
        chunks.append(struct.pack("<H", len(pb)))
        chunks.append(pb)
        chunks.append(vec.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_store(path: str | Path) -> EmbeddingStore:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise StoreMagicError(f"{path}: bad magic, not an embedding store")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise StoreTruncatedError(f"{path}: truncated at byte {pos}")
        out = raw[pos : pos + n]
        pos += n
        return out

    (dim,) = struct.unpack("<I", take(4))
    (count,) = struct.unpack("<Q", take(8))
    store = EmbeddingStore(dim)
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        pid = take(id_len).decode("utf-8")
        vec = np.frombuffer(take(4 * dim), dtype="<f4")
        store.add(pid, vec)
    if pos != len(raw):
        raise StoreTruncatedError(f"{path}: {len(raw) - pos} trailing bytes")
    return store
