"""Chunk-level checkpointing: gather a chunk's slices on a rotating worker,
encode parity there, then offload it to host memory behind the next chunk's
compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .codes import CodingScheme, encode
from .cost import CostModel
from .errors import ConfigError, ShardError
from .events import ENGINE, Event
from .kv import KvChunkSlice, ModelConfig, chunk_count, ground_truth_slice, slice_bytes
from .store import ParityChunk, ParityStore


@dataclass(frozen=True)
class AssignmentState:
    next_worker: int = 0


def next_parity_worker(state: AssignmentState, n_workers: int) -> tuple[int, AssignmentState]:
    if n_workers < 1:
        raise ConfigError("need at least one worker")
    w = state.next_worker % n_workers
    return w, AssignmentState((w + 1) % n_workers)


@dataclass(frozen=True)
class CheckpointConfig:
    scheme: CodingScheme
    chunk_size: int
    model: ModelConfig
    cost: CostModel = field(default_factory=CostModel)
    checkpoint_decode: bool = True

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive")
        if self.scheme.n != self.model.tp_degree:
            raise ConfigError(
                f"scheme has n={self.scheme.n} data shards but the model runs on "
                f"tp_degree={self.model.tp_degree} workers"
            )

    @property
    def n_workers(self) -> int:
        return self.model.tp_degree

    @property
    def slice_len(self) -> int:
        return slice_bytes(self.model, self.chunk_size)


def chunk_events(
    config: CheckpointConfig, request_id: int, chunk_id: int, parity_worker: int,
    start: float, compute_tokens: int, slice_len: int, host_link_free: float = 0.0,
) -> list[Event]:
    """Timeline of one chunk: N computes, gather, encode, barrier, async offload.

    ``compute_tokens`` of 0 skips the compute events (decode chunks were
    produced token by token beforehand).
    """
    cost, scheme = config.cost, config.scheme
    events = []
    t = start
    if compute_tokens:
        dur = cost.compute(compute_tokens)
        events += [Event("compute_chunk", start, dur, j, chunk_id, request_id)
                   for j in range(config.n_workers)]
        t = start + dur
    g = cost.gather(scheme.n - 1, slice_len)
    events.append(Event("gather", t, g, parity_worker, chunk_id, request_id))
    t += g
    e = cost.encode(scheme, slice_len)
    events.append(Event("encode", t, e, parity_worker, chunk_id, request_id))
    t += e
    events.append(Event("barrier", t, 0.0, ENGINE, chunk_id, request_id))
    off_start = max(t, host_link_free)
    events.append(Event("offload", off_start, cost.parity_offload(scheme, slice_len),
                        parity_worker, chunk_id, request_id, overlappable=True))
    return events


def checkpoint_chunk(
    slices: Sequence[KvChunkSlice], config: CheckpointConfig, state: AssignmentState,
    start: float = 0.0, host_link_free: float = 0.0, compute: bool = True,
) -> tuple[ParityChunk, list[Event], AssignmentState]:
    n = config.n_workers
    by_worker = {s.worker: s for s in slices}
    if sorted(by_worker) != list(range(n)) or len(slices) != n:
        raise ShardError(f"need one slice per worker 0..{n - 1}, got workers {sorted(by_worker)}")
    chunk_ids = {s.chunk_id for s in slices}
    request_ids = {s.request_id for s in slices}
    if len(chunk_ids) != 1 or len(request_ids) != 1:
        raise ShardError("slices belong to different chunks")
    data = [by_worker[j].data for j in range(n)]
    parity = encode(config.scheme, data)
    valid = max(s.valid_tokens for s in slices)
    worker, state = next_parity_worker(state, n)
    (rid,), (cid,) = request_ids, chunk_ids
    events = chunk_events(config, rid, cid, worker, start, valid if compute else 0,
                          data[0].size, host_link_free)
    return ParityChunk.from_parity(rid, cid, config.scheme, parity, valid), events, state


def sized_checkpoint(
    config: CheckpointConfig, request_id: int, chunk_id: int, valid_tokens: int,
    state: AssignmentState, start: float = 0.0, host_link_free: float = 0.0, compute: bool = True,
) -> tuple[ParityChunk, list[Event], AssignmentState]:
    """Timing and byte accounting of ``checkpoint_chunk`` without materialising KV."""
    worker, state = next_parity_worker(state, config.n_workers)
    events = chunk_events(config, request_id, chunk_id, worker, start,
                          valid_tokens if compute else 0, config.slice_len, host_link_free)
    p = ParityChunk.sized(request_id, chunk_id, config.scheme, config.slice_len,
                          config.scheme.k, valid_tokens)
    return p, events, state


@dataclass
class PrefillResult:
    timeline: list
    store: ParityStore
    state: AssignmentState
    end: float


def run_prefill_with_checkpointing(
    request, config: CheckpointConfig, store: ParityStore, seed: int = 0,
    state: Optional[AssignmentState] = None, start: float = 0.0, materialize: bool = True,
) -> PrefillResult:
    """Chunked prefill of one request with a parity checkpoint after every chunk.

    Back-pressure from the store is recorded as a stall once the host link has
    drained; if the store is still full nothing can free it inside a single
    request, so the error propagates to the caller.
    """
    state = state or AssignmentState()
    m = config.chunk_size
    s = request.input_len
    timeline: list[Event] = []
    t = start
    link_free = start
    for i in range(chunk_count(s, m)):
        valid = min(m, s - i * m)
        if materialize:
            slices = [ground_truth_slice(seed, request.id, i, j, config.model, m, valid)
                      for j in range(config.n_workers)]
            p, ev, state = checkpoint_chunk(slices, config, state, t, link_free)
        else:
            p, ev, state = sized_checkpoint(config, request.id, i, valid, state, t, link_free)
        timeline += ev
        barrier = next(e for e in ev if e.kind == "barrier")
        offload = ev[-1]
        link_free = offload.end
        t = barrier.start
        if not store.fits(p):
            timeline.append(Event("stall", t, max(0.0, link_free - t), ENGINE, i, request.id))
            t = max(t, link_free)
        store.put(p)
    return PrefillResult(timeline, store, state, t)


class DecodeCheckpointer:
    """Buffers decode-token KV per worker and checkpoints every full chunk."""

    def __init__(self, request_id: int, first_chunk_id: int, config: CheckpointConfig,
                 store: ParityStore, state: Optional[AssignmentState] = None):
        if not config.checkpoint_decode:
            raise ConfigError("decode checkpointing is disabled in this config")
        self.request_id = request_id
        self.config = config
        self.store = store
        self.state = state or AssignmentState()
        self.next_chunk_id = first_chunk_id
        model, m = config.model, config.chunk_size
        self._shape = (2, model.layers, m, model.row_bytes)
        self._buf = [np.zeros(self._shape, dtype=np.uint8) for _ in range(config.n_workers)]
        self.buffered = 0
        self.link_free = 0.0
        self.pending: Optional[ParityChunk] = None

    def step(self, new_token_kv: Sequence[np.ndarray], start: float = 0.0):
        if len(new_token_kv) != self.config.n_workers:
            raise ShardError("need one token KV block per worker")
        for buf, kv in zip(self._buf, new_token_kv):
            buf[:, :, self.buffered, :] = np.asarray(kv, dtype=np.uint8).reshape(
                self._shape[0], self._shape[1], self._shape[3])
        self.buffered += 1
        if self.buffered == self.config.chunk_size:
            return self._flush(start)
        return None

    def finish(self, start: float = 0.0):
        return self._flush(start) if self.buffered else None

    def _flush(self, start: float):
        slices = [KvChunkSlice(self.request_id, self.next_chunk_id, j, b.reshape(-1), self.buffered)
                  for j, b in enumerate(self._buf)]
        p, ev, self.state = checkpoint_chunk(slices, self.config, self.state, start,
                                             self.link_free, compute=False)
        self.link_free = ev[-1].end
        self.next_chunk_id += 1
        self.buffered = 0
        self._buf = [np.zeros(self._shape, dtype=np.uint8) for _ in self._buf]
        self.pending = p
        self.retry_pending()
        return p, ev

    def retry_pending(self) -> None:
        """Store the held parity chunk; raises ``BackPressure`` while the store is full."""
        if self.pending is not None:
            self.store.put(self.pending)
            self.pending = None


def checkpoint_decode_step(decoder: DecodeCheckpointer, new_token_kv, start: float = 0.0):
    """Feed one decode token; returns ``(ParityChunk, events)`` at chunk boundaries."""
    return decoder.step(new_token_kv, start)


__all__ = [
    "AssignmentState", "CheckpointConfig", "DecodeCheckpointer",
    "PrefillResult", "checkpoint_chunk", "checkpoint_decode_step", "chunk_events",
    "next_parity_worker", "run_prefill_with_checkpointing", "sized_checkpoint",
]
