import threading

import numpy as np
import pytest

from kvparity.codes import CodingScheme, encode
from kvparity.errors import BackPressure, MissingParityError, ParityIntegrityError, ShardError
from kvparity.store import (
    ENTRY_METADATA_BYTES, ParityChunk, ParityStore, fnv1a64, load_store, save_store,
)

SCHEME = CodingScheme.rs(4, 2)


def chunk(rng, rid=0, cid=0, length=64):
    data = [rng.integers(0, 256, length, dtype=np.uint8) for _ in range(4)]
    return ParityChunk.from_parity(rid, cid, SCHEME, encode(SCHEME, data), valid_tokens=3)


def test_fnv1a_reference_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_put_get_round_trip(rng):
    store = ParityStore(1 << 20)
    p = chunk(rng)
    store.put(p)
    got = store.get(0, 0)
    assert all(np.array_equal(a, b) for a, b in zip(got.parity, p.parity))
    assert store.used_bytes == 2 * 64 + ENTRY_METADATA_BYTES
    assert store.audit()


def test_missing_and_corrupt(rng):
    store = ParityStore(1 << 20)
    with pytest.raises(MissingParityError):
        store.get(0, 0)
    p = chunk(rng)
    store.put(p)
    p.parity[0][3] ^= 1
    with pytest.raises(ParityIntegrityError):
        store.get(0, 0)


def test_capacity_for_four_rejects_fifth(rng):
    size = chunk(rng).stored_bytes
    store = ParityStore(4 * size)
    for c in range(4):
        store.put(chunk(rng, cid=c))
    with pytest.raises(BackPressure):
        store.put(chunk(rng, cid=4))
    assert len(store) == 4 and store.used_bytes <= store.capacity_bytes
    store.put(chunk(rng, cid=2))  # replacing an entry needs no extra room
    store.evict(0, 0)
    store.put(chunk(rng, cid=4))
    assert store.audit()


def test_accounting_after_random_ops(rng):
    store = ParityStore(10_000)
    for _ in range(300):
        rid, cid = rng.integers(0, 3, 2).tolist()
        if rng.random() < 0.6:
            try:
                store.put(chunk(rng, rid, cid, int(rng.integers(1, 200))))
            except BackPressure:
                pass
        elif rng.random() < 0.5:
            store.evict(rid, cid)
        else:
            store.evict_request(rid)
        assert store.audit()
    assert store.peak_used_bytes >= store.used_bytes


def test_sized_entries_count_bytes_only():
    p = ParityChunk.sized(1, 2, SCHEME, slice_len=1000, buffers=2, valid_tokens=7)
    assert not p.materialized and p.verify()
    assert p.payload_bytes == 2000 and p.stored_bytes == 2000 + ENTRY_METADATA_BYTES


def test_unequal_parity_rejected():
    with pytest.raises(ShardError):
        ParityChunk.from_parity(0, 0, SCHEME, [np.zeros(3, np.uint8), np.zeros(4, np.uint8)], 1)


def test_concurrent_writers_keep_counters_consistent(rng):
    store = ParityStore(1 << 30)
    entries = [chunk(rng, rid, cid, 32) for rid in range(4) for cid in range(25)]

    def writer(rid):
        for p in entries:
            if p.request_id == rid:
                store.put(p)

    threads = [threading.Thread(target=writer, args=(r,)) for r in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(store) == 100 and store.audit()


def test_file_round_trip(tmp_path, rng):
    store = ParityStore(1 << 20)
    for c in range(3):
        store.put(chunk(rng, 7, c, 48))
    path = tmp_path / "p.gsrv"
    save_store(store, path)
    raw = path.read_bytes()
    assert raw[:4] == b"GSRV"
    back = load_store(path)
    assert sorted(back.entries) == sorted(store.entries)
    for key, p in store.entries.items():
        q = back.get(*key)
        assert q.checksum == p.checksum and q.valid_tokens == p.valid_tokens
        assert all(np.array_equal(a, b) for a, b in zip(p.parity, q.parity))


def test_file_corruption_detected(tmp_path, rng):
    store = ParityStore(1 << 20)
    store.put(chunk(rng, 1, 0, 48))
    path = tmp_path / "p.gsrv"
    save_store(store, path)
    raw = bytearray(path.read_bytes())
    raw[30] ^= 0xFF  # inside the parity bytes
    path.write_bytes(bytes(raw))
    with pytest.raises(ParityIntegrityError):
        load_store(path).get(1, 0)
    path.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(ParityIntegrityError):
        load_store(path)
    path.write_bytes(bytes(raw[:20]))
    with pytest.raises(ParityIntegrityError):
        load_store(path)
