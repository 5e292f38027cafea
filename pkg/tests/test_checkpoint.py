from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvparity.checkpoint import (
    AssignmentState, CheckpointConfig, DecodeCheckpointer, checkpoint_chunk,
    checkpoint_decode_step, next_parity_worker, run_prefill_with_checkpointing,
)
from kvparity.codes import CodingScheme, encode
from kvparity.cost import CostModel
from kvparity.errors import BackPressure, ConfigError, ShardError
from kvparity.kv import LLAMA_70B, ground_truth_slice, slice_bytes, token_kv, total_kv_bytes
from kvparity.store import ParityStore


def assign(c, n):
    state, out = AssignmentState(), []
    for _ in range(c):
        w, state = next_parity_worker(state, n)
        out.append(w)
    return out


def test_round_robin_order():
    assert assign(6, 4) == [0, 1, 2, 3, 0, 1]
    assert assign(5, 1) == [0] * 5
    assert np.bincount(assign(1000, 8)).tolist() == [125] * 8


@given(c=st.integers(0, 500), n=st.integers(1, 16))
def test_round_robin_fair(c, n):
    counts = np.bincount(assign(c, n), minlength=n)
    assert counts.max() - counts.min() <= 1
    assert counts.sum() == c


def test_config_requires_matching_width(tiny_model):
    with pytest.raises(ConfigError):
        CheckpointConfig(CodingScheme.rs(8, 2), 16, tiny_model)
    with pytest.raises(ConfigError):
        CheckpointConfig(CodingScheme.rs(4, 2), 0, tiny_model)


def test_checkpoint_chunk_parity_and_ordering(tiny_model):
    cfg = CheckpointConfig(CodingScheme.rs(4, 2), 16, tiny_model)
    slices = [ground_truth_slice(0, 1, 0, w, tiny_model, 16) for w in range(4)]
    p, ev, state = checkpoint_chunk(slices, cfg, AssignmentState())
    expected = encode(cfg.scheme, [s.data for s in slices])
    assert all(np.array_equal(a, b) for a, b in zip(p.parity, expected))
    assert state.next_worker == 1
    compute = [e for e in ev if e.kind == "compute_chunk"]
    gather, encode_ev, barrier, offload = (next(e for e in ev if e.kind == k)
                                           for k in ("gather", "encode", "barrier", "offload"))
    assert len(compute) == 4
    assert max(e.end for e in compute) <= gather.start < encode_ev.start < offload.start
    assert barrier.start == encode_ev.end and offload.overlappable
    assert gather.worker == encode_ev.worker == offload.worker == 0


def test_xor_two_workers(rng):
    from kvparity.kv import ModelConfig
    model = ModelConfig(1, 2, 4, 2)
    cfg = CheckpointConfig(CodingScheme.xor(2), 4, model)
    slices = [ground_truth_slice(0, 0, 0, w, model, 4) for w in range(2)]
    p, _, _ = checkpoint_chunk(slices, cfg, AssignmentState())
    assert np.array_equal(p.parity[0], slices[0].data ^ slices[1].data)


def test_checkpoint_chunk_rejects_missing_slice(tiny_model):
    cfg = CheckpointConfig(CodingScheme.rs(4, 2), 16, tiny_model)
    slices = [ground_truth_slice(0, 1, 0, w, tiny_model, 16) for w in range(3)]
    with pytest.raises(ShardError):
        checkpoint_chunk(slices, cfg, AssignmentState())
    mixed = slices + [ground_truth_slice(0, 1, 1, 3, tiny_model, 16)]
    with pytest.raises(ShardError):
        checkpoint_chunk(mixed, cfg, AssignmentState())


def test_stall_under_five_percent_of_compute():
    cost = CostModel()
    stall = cost.checkpoint_stall(CodingScheme.rs(8, 2), slice_bytes(LLAMA_70B, 2048))
    assert stall / cost.compute(2048) < 0.05


@pytest.mark.parametrize("s_tokens,entries", [(64, 4), (65, 5)])
def test_prefill_entries(tiny_model, s_tokens, entries):
    cfg = CheckpointConfig(CodingScheme.rs(4, 2), 16, tiny_model)
    store = ParityStore(1 << 30)
    res = run_prefill_with_checkpointing(SimpleNamespace(id=9, input_len=s_tokens), cfg, store)
    assert sorted(c for _, c in store.entries) == list(range(entries))
    workers = [e.worker for e in res.timeline if e.kind == "encode"]
    assert workers == [i % 4 for i in range(entries)]
    assert store.entries[(9, entries - 1)].valid_tokens == s_tokens - 16 * (entries - 1)
    assert store.payload_bytes == total_kv_bytes(tiny_model, s_tokens, 16) * 2 // 4
    # next chunk's compute starts at the barrier, not after the offload
    barriers = [e for e in res.timeline if e.kind == "barrier"]
    computes = [e for e in res.timeline if e.kind == "compute_chunk" and e.worker == 0]
    assert all(b.start == c.start for b, c in zip(barriers, computes[1:]))


def test_prefill_stalls_then_raises_when_store_full(tiny_model):
    cfg = CheckpointConfig(CodingScheme.rs(4, 2), 16, tiny_model)
    store = ParityStore(2 * (2 * cfg.slice_len + 32))
    with pytest.raises(BackPressure):
        run_prefill_with_checkpointing(SimpleNamespace(id=0, input_len=64), cfg, store)
    assert len(store) == 2


def test_decode_checkpointing(tiny_model):
    m = 16
    cfg = CheckpointConfig(CodingScheme.rdp(4), m, tiny_model)
    store = ParityStore(1 << 30)
    dec = DecodeCheckpointer(5, first_chunk_id=3, config=cfg, store=store)
    truth = [[ground_truth_slice(1, 5, 3 + c, w, tiny_model, m) for w in range(4)] for c in range(3)]
    emitted = []
    total = 2 * m + 5
    for t in range(total):
        c, i = divmod(t, m)
        out = checkpoint_decode_step(dec, [token_kv(truth[c][w], i, m, tiny_model) for w in range(4)])
        if out:
            emitted.append(out[0])
    assert len(emitted) == 2
    tail = dec.finish()
    assert tail is not None and tail[0].valid_tokens == 5
    assert sorted(store.entries) == [(5, 3), (5, 4), (5, 5)]
    full = encode(cfg.scheme, [s.data for s in truth[0]])
    assert all(np.array_equal(a, b) for a, b in zip(store.get(5, 3).parity, full))
    # partial chunk parity is the parity of masked slices
    masked = [ground_truth_slice(1, 5, 5, w, tiny_model, m, 5).data for w in range(4)]
    assert all(np.array_equal(a, b) for a, b in zip(store.get(5, 5).parity, encode(cfg.scheme, masked)))
    assert dec.finish() is None


def test_decode_checkpointing_disabled(tiny_model):
    cfg = CheckpointConfig(CodingScheme.rs(4, 2), 16, tiny_model, checkpoint_decode=False)
    with pytest.raises(ConfigError):
        DecodeCheckpointer(0, 0, cfg, ParityStore(1 << 20))


def test_decode_back_pressure_keeps_chunk(tiny_model):
    m = 4
    cfg = CheckpointConfig(CodingScheme.xor(4), m, tiny_model)
    store = ParityStore(10)
    dec = DecodeCheckpointer(0, 0, cfg, store)
    block = np.zeros((2, tiny_model.layers, tiny_model.row_bytes), np.uint8)
    for _ in range(m - 1):
        dec.step([block] * 4)
    with pytest.raises(BackPressure):
        dec.step([block] * 4)
    assert dec.pending is not None
    store.capacity_bytes = 1 << 20
    dec.retry_pending()
    assert dec.pending is None and len(store) == 1
