"""Host-tier store for parity chunks, plus its on-disk format.

File layout (little-endian)::

    b"GSRV" | version u16 | scheme kind u8 | n u8 | k u8
    repeated: entry_len u32 | request_id u64 | chunk_id u32 | valid_tokens u32
              | slice_len u64 | k * slice_len parity bytes | checksum u64
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .codes import CodingScheme, Kind
from .errors import BackPressure, MissingParityError, ParityIntegrityError, ShardError

ENTRY_METADATA_BYTES = 32  # request_id, chunk_id, valid_tokens, slice_len, checksum
MAGIC = b"GSRV"
VERSION = 1
_KIND_CODES = {Kind.XOR: 0, Kind.RDP: 1, Kind.RS: 2}
_HEADER = struct.Struct("<4sHBBB")
_ENTRY_HEAD = struct.Struct("<QIIQ")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes | np.ndarray, h: int = FNV_OFFSET) -> int:
    if isinstance(data, np.ndarray):
        data = data.tobytes()
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def _checksum(buffers) -> int:
    h = FNV_OFFSET
    for b in buffers:
        h = fnv1a64(b, h)
    return h


@dataclass
class ParityChunk:
    """Redundancy for one chunk as it sits in host memory.

    ``parity`` is empty for sized entries, which the timing-only simulator uses
    to account bytes without materialising them.
    """

    request_id: int
    chunk_id: int
    scheme: Optional[CodingScheme]
    parity: tuple
    valid_tokens: int
    slice_len: int
    checksum: Optional[int] = None
    buffers: int = 0

    @classmethod
    def from_parity(cls, request_id, chunk_id, scheme, parity, valid_tokens) -> "ParityChunk":
        parity = tuple(np.asarray(p, dtype=np.uint8) for p in parity)
        lengths = {p.size for p in parity}
        if len(lengths) != 1:
            raise ShardError(f"parity buffers have unequal lengths {sorted(lengths)}")
        return cls(request_id, chunk_id, scheme, parity, valid_tokens,
                   lengths.pop(), _checksum(parity), len(parity))

    @classmethod
    def sized(cls, request_id, chunk_id, scheme, slice_len, buffers, valid_tokens) -> "ParityChunk":
        return cls(request_id, chunk_id, scheme, (), valid_tokens, slice_len, None, buffers)

    @property
    def materialized(self) -> bool:
        return bool(self.parity)

    @property
    def payload_bytes(self) -> int:
        return self.buffers * self.slice_len

    @property
    def stored_bytes(self) -> int:
        return self.payload_bytes + ENTRY_METADATA_BYTES

    def verify(self) -> bool:
        return not self.materialized or _checksum(self.parity) == self.checksum


@dataclass
class ParityStore:
    capacity_bytes: int
    entries: dict = field(default_factory=dict)
    used_bytes: int = 0
    payload_bytes: int = 0
    peak_used_bytes: int = 0
    peak_payload_bytes: int = 0

    def __post_init__(self):
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __iter__(self) -> Iterator[ParityChunk]:
        return iter(list(self.entries.values()))

    def fits(self, p: ParityChunk) -> bool:
        old = self.entries.get((p.request_id, p.chunk_id))
        freed = old.stored_bytes if old else 0
        return self.used_bytes - freed + p.stored_bytes <= self.capacity_bytes

    def put(self, p: ParityChunk) -> None:
        key = (p.request_id, p.chunk_id)
        with self._lock:
            if not self.fits(p):
                raise BackPressure(
                    f"parity store full: {self.used_bytes} used + {p.stored_bytes} "
                    f"> {self.capacity_bytes} capacity"
                )
            old = self.entries.pop(key, None)
            if old is not None:
                self.used_bytes -= old.stored_bytes
                self.payload_bytes -= old.payload_bytes
            self.entries[key] = p
            self.used_bytes += p.stored_bytes
            self.payload_bytes += p.payload_bytes
            self.peak_used_bytes = max(self.peak_used_bytes, self.used_bytes)
            self.peak_payload_bytes = max(self.peak_payload_bytes, self.payload_bytes)

    def get(self, request_id: int, chunk_id: int) -> ParityChunk:
        p = self.entries.get((request_id, chunk_id))
        if p is None:
            raise MissingParityError(f"no parity for request {request_id} chunk {chunk_id}")
        if not p.verify():
            raise ParityIntegrityError(f"checksum mismatch for request {request_id} chunk {chunk_id}")
        return p

    def evict(self, request_id: int, chunk_id: int) -> None:
        with self._lock:
            p = self.entries.pop((request_id, chunk_id), None)
            if p is not None:
                self.used_bytes -= p.stored_bytes
                self.payload_bytes -= p.payload_bytes

    def evict_request(self, request_id: int) -> int:
        keys = [k for k in self.entries if k[0] == request_id]
        for rid, cid in keys:
            self.evict(rid, cid)
        return len(keys)

    def audit(self) -> bool:
        """Recompute the byte counters from the entries."""
        used = sum(p.stored_bytes for p in self.entries.values())
        payload = sum(p.payload_bytes for p in self.entries.values())
        return used == self.used_bytes and payload == self.payload_bytes and used <= self.capacity_bytes


def save_store(store: ParityStore, path: str | Path) -> None:
    entries = sorted(store, key=lambda p: (p.request_id, p.chunk_id))
    schemes = {p.scheme for p in entries}
    if len(schemes) != 1 or None in schemes:
        raise ShardError("a saved store needs entries that share one coding scheme")
    if not all(p.materialized for p in entries):
        raise ShardError("sized (timing-only) entries have no bytes to save")
    scheme = schemes.pop()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, _KIND_CODES[scheme.kind], scheme.n, scheme.k))
        for p in entries:
            body = _ENTRY_HEAD.pack(p.request_id, p.chunk_id, p.valid_tokens, p.slice_len)
            body += b"".join(b.tobytes() for b in p.parity)
            body += struct.pack("<Q", p.checksum)
            fh.write(struct.pack("<I", len(body)))
            fh.write(body)


def load_store(path: str | Path, capacity_bytes: int | None = None) -> ParityStore:
    """Read a saved store. Checksums are kept as written and verified on ``get``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ParityIntegrityError("truncated parity file")
    magic, version, kind, n, k = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ParityIntegrityError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ParityIntegrityError(f"unsupported parity file version {version}")
    kinds = {v: key for key, v in _KIND_CODES.items()}
    scheme = CodingScheme(kinds[kind], n, k)
    entries = []
    off = _HEADER.size
    while off < len(raw):
        (size,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + size > len(raw):
            raise ParityIntegrityError("truncated parity entry")
        rid, cid, valid, slen = _ENTRY_HEAD.unpack_from(raw, off)
        pos = off + _ENTRY_HEAD.size
        if size != _ENTRY_HEAD.size + k * slen + 8:
            raise ParityIntegrityError(f"entry length {size} inconsistent with k={k}, slice_len={slen}")
        bufs = tuple(np.frombuffer(raw, np.uint8, slen, pos + i * slen).copy() for i in range(k))
        (checksum,) = struct.unpack_from("<Q", raw, pos + k * slen)
        entries.append(ParityChunk(rid, cid, scheme, bufs, valid, slen, checksum, k))
        off += size
    cap = capacity_bytes if capacity_bytes is not None else sum(p.stored_bytes for p in entries)
    store = ParityStore(cap)
    for p in entries:
        store.put(p)
    return store
