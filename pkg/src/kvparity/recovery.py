"""Failure recovery: split the lost chunks between recomputation and parity
reconstruction so the two lanes finish together, then rebuild the bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .checkpoint import CheckpointConfig
from .codes import CodingScheme, max_tolerance, reconstruct
from .cost import CostModel
from .errors import ParityIntegrityError, ShardError, UnrecoverableError
from .events import ENGINE, Event
from .kv import LLAMA_70B, KvChunkSlice, ModelConfig, pad_partial, slice_bytes
from .store import ParityChunk, ParityStore


class RecoveryMode(str, Enum):
    PURE_RECOMPUTE = "pure_recompute"
    HYBRID = "hybrid"
    FALLBACK = "full_recompute_fallback"


@dataclass(frozen=True)
class FailureEvent:
    """One failure of a request.

    ``at_chunk`` counts the chunks whose KV was complete (and checkpointed)
    when the failure struck. ``inflight_tokens`` is KV produced after the
    last completed chunk, which has no parity and is always recomputed.
    """

    request_id: int
    failed_workers: frozenset
    at_chunk: int
    at_time: float = 0.0
    phase: str = "prefill"
    inflight_tokens: int = 0

    def __post_init__(self):
        object.__setattr__(self, "failed_workers", frozenset(self.failed_workers))
        if not self.failed_workers:
            raise ShardError("a failure needs at least one failed worker")
        if self.at_chunk < 0 or self.inflight_tokens < 0:
            raise ShardError("at_chunk and inflight_tokens must be non-negative")
        if self.phase not in ("prefill", "decode"):
            raise ShardError(f"unknown phase {self.phase!r}")


@dataclass(frozen=True)
class RecoveryPlan:
    r: int
    n: int
    mode: RecoveryMode

    @property
    def recompute_ids(self) -> range:
        return range(self.n) if self.mode is RecoveryMode.FALLBACK else range(min(self.r, self.n))

    @property
    def reconstruct_ids(self) -> range:
        return range(0) if self.mode is not RecoveryMode.HYBRID else range(self.r, self.n)


def _default_slice_len(m: int, model: ModelConfig = LLAMA_70B) -> int:
    return slice_bytes(model, m)


def recompute_time(r: int, m: int, cost: CostModel) -> float:
    return r * m * cost.compute_per_token + cost.restart_overhead


def reconstruct_time(q: int, scheme: CodingScheme, cost: CostModel, slice_len: int,
                     failed: int = 1) -> float:
    return q * cost.reconstruct_chunk(scheme, slice_len, failed)


def recovery_time(r: int, n: int, m: int, scheme: CodingScheme, cost: CostModel,
                  slice_len: int, failed: int = 1) -> float:
    """Both lanes run at once, so the episode lasts as long as the slower one."""
    return max(recompute_time(r, m, cost), reconstruct_time(n - r, scheme, cost, slice_len, failed))


def get_recompute_units(n: int, m: int, scheme: CodingScheme, cost: CostModel,
                        slice_len: Optional[int] = None, failed: int = 1) -> int:
    """Number of leading chunks to recompute; the rest come from parity.

    The recompute lane grows with r and the reconstruct lane shrinks, so the
    minimum of their max sits at the crossing point. Ties go to the smaller r.
    ``slice_len`` defaults to the 70B-class layout at chunk size ``m``.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return 0
    slice_len = _default_slice_len(m) if slice_len is None else slice_len

    def cost_at(r):
        return recovery_time(r, n, m, scheme, cost, slice_len, failed)

    # smallest r whose recompute lane is at least as long as the reconstruct lane
    lo, hi = 0, n
    while lo < hi:
        mid = (lo + hi) // 2
        if recompute_time(mid, m, cost) >= reconstruct_time(n - mid, scheme, cost, slice_len, failed):
            hi = mid
        else:
            lo = mid + 1
    best = lo
    if lo > 0 and cost_at(lo - 1) <= cost_at(lo):
        best = lo - 1
    # the objective is flat once the recompute lane dominates from r = 0
    while best > 0 and cost_at(best - 1) <= cost_at(best):
        best -= 1
    return best


def plan_recovery(failure: FailureEvent, scheme: CodingScheme, m: int, cost: CostModel,
                  slice_len: int, parity_ok: bool = True) -> RecoveryPlan:
    n = failure.at_chunk
    if len(failure.failed_workers) > max_tolerance(scheme) or not parity_ok:
        return RecoveryPlan(n, n, RecoveryMode.FALLBACK)
    r = get_recompute_units(n, m, scheme, cost, slice_len, len(failure.failed_workers))
    return RecoveryPlan(r, n, RecoveryMode.PURE_RECOMPUTE if r >= n else RecoveryMode.HYBRID)


def recovery_events(
    plan: RecoveryPlan, failure: FailureEvent, config: CheckpointConfig, start: float,
    chunk_tokens: Optional[Sequence[int]] = None,
) -> list[Event]:
    """Timeline of one recovery episode.

    Lane 1 restarts the failed workers and recomputes ``plan.recompute_ids``;
    lane 2 starts at once and, per chunk, pulls the parity over the host link,
    gathers the survivors and decodes. In-flight tokens are recomputed after
    the join, then serving resumes.
    """
    cost, scheme, m = config.cost, config.scheme, config.chunk_size
    slice_len = config.slice_len
    toks = list(chunk_tokens) if chunk_tokens is not None else [m] * plan.n
    if len(toks) < plan.n:
        raise ShardError(f"token counts given for {len(toks)} chunks, plan covers {plan.n}")
    failed = sorted(failure.failed_workers)
    rid = failure.request_id
    target = failed[0]
    ev = [Event("restart", start, cost.restart_overhead, ENGINE, -1, rid)]
    t = start + cost.restart_overhead
    for cid in plan.recompute_ids:
        d = cost.compute(toks[cid])
        ev.append(Event("recompute", t, d, ENGINE, cid, rid))
        t += d
    lane2 = start
    for cid in plan.reconstruct_ids:
        for kind, d in (
            ("parity_fetch", cost.host_transfer(scheme.k * slice_len)),
            ("recovery_gather", cost.gather(scheme.n - len(failed), slice_len)),
            ("reconstruct", cost.reconstruct(scheme, slice_len)),
        ):
            ev.append(Event(kind, lane2, d, target, cid, rid))
            lane2 += d
    t = max(t, lane2)
    if failure.inflight_tokens:
        d = cost.compute(failure.inflight_tokens)
        ev.append(Event("recompute", t, d, ENGINE, plan.n, rid))
        t += d
    ev.append(Event("recovery", start, t - start, ENGINE, -1, rid))
    ev.append(Event("resume", t, 0.0, ENGINE, -1, rid))
    return ev


def reconstruct_chunk(
    chunk_id: int, surviving: Mapping[int, np.ndarray], parity: ParityChunk, failed,
    model: Optional[ModelConfig] = None, chunk_size: Optional[int] = None,
) -> dict[int, np.ndarray]:
    """Rebuild the failed workers' slices of one chunk.

    Workers are data shards ``0..N-1`` and parity buffers are shards
    ``N..N+k-1``. With ``model`` and ``chunk_size`` the result is re-masked
    beyond ``valid_tokens``.
    """
    if parity.chunk_id != chunk_id:
        raise ShardError(f"parity is for chunk {parity.chunk_id}, not {chunk_id}")
    if not parity.materialized:
        raise ShardError("sized parity entries carry no bytes to reconstruct from")
    if not parity.verify():
        raise ParityIntegrityError(f"checksum mismatch for chunk {chunk_id}")
    scheme = parity.scheme
    failed = set(failed)
    have = {w: np.asarray(b, dtype=np.uint8) for w, b in surviving.items() if w not in failed}
    for i, buf in enumerate(parity.parity):
        have[scheme.n + i] = buf
    out = reconstruct(scheme, have, failed)
    rebuilt = {w: out[w] for w in sorted(failed)}
    if model is not None and chunk_size is not None:
        rebuilt = {
            w: pad_partial(KvChunkSlice(parity.request_id, chunk_id, w, b, parity.valid_tokens),
                           chunk_size, model).data
            for w, b in rebuilt.items()
        }
    return rebuilt


def verify_recovery(recovered, ground_truth) -> bool:
    """True iff byte-identical; mappings are compared key by key."""
    if isinstance(recovered, Mapping) or isinstance(ground_truth, Mapping):
        if not (isinstance(recovered, Mapping) and isinstance(ground_truth, Mapping)):
            return False
        if set(recovered) != set(ground_truth):
            return False
        return all(verify_recovery(recovered[k], ground_truth[k]) for k in recovered)
    a = recovered.data if isinstance(recovered, KvChunkSlice) else np.asarray(recovered)
    b = ground_truth.data if isinstance(ground_truth, KvChunkSlice) else np.asarray(ground_truth)
    return a.shape == b.shape and a.dtype == b.dtype and bool(np.array_equal(a, b))


Oracle = Callable[[int, int], np.ndarray]  # (chunk_id, worker) -> slice bytes


@dataclass
class RecoveryResult:
    recovered: dict          # chunk_id -> {worker: bytes}
    timeline: list
    plan: RecoveryPlan
    duration: float
    reconstructed: int = 0   # chunks rebuilt from parity
    recomputed: int = 0
    parity_bytes_read: int = 0
    notes: list = field(default_factory=list)


def _parity_ok(store: ParityStore, request_id: int, ids) -> tuple[bool, list]:
    notes = []
    for cid in ids:
        try:
            store.get(request_id, cid)
        except ParityIntegrityError as exc:  # covers missing entries too
            notes.append(str(exc))
    return not notes, notes


def recover(
    failure: FailureEvent, store: ParityStore,
    surviving: Optional[Mapping[int, Mapping[int, np.ndarray]]], config: CheckpointConfig,
    oracle: Optional[Oracle] = None, start: Optional[float] = None,
    chunk_tokens: Optional[Sequence[int]] = None,
) -> RecoveryResult:
    """Recover the failed workers' KV for chunks ``[0, failure.at_chunk)``.

    ``surviving`` maps chunk id to the non-failed workers' slices; pass None
    for a timing-only run. ``oracle`` regenerates a slice as recomputation
    would; without it any chunk that needs recomputing is a hard failure.
    """
    scheme, m = config.scheme, config.chunk_size
    t0 = failure.at_time if start is None else start
    n = failure.at_chunk
    failed = sorted(failure.failed_workers)
    if any(not 0 <= w < config.n_workers for w in failed):
        raise ShardError(f"failed workers {failed} outside [0, {config.n_workers})")

    plan = plan_recovery(failure, scheme, m, config.cost, config.slice_len)
    notes = []
    if plan.mode is RecoveryMode.HYBRID:
        ok, notes = _parity_ok(store, failure.request_id, plan.reconstruct_ids)
        if not ok:
            plan = RecoveryPlan(n, n, RecoveryMode.FALLBACK)
    elif plan.mode is RecoveryMode.FALLBACK:
        notes.append(f"{len(failed)} failed workers exceed tolerance {max_tolerance(scheme)}")

    if chunk_tokens is None:
        chunk_tokens = [store.entries[(failure.request_id, c)].valid_tokens
                        if (failure.request_id, c) in store else m for c in range(n)]
    timeline = recovery_events(plan, failure, config, t0, chunk_tokens)
    duration = next(e for e in timeline if e.kind == "recovery").duration

    recovered: dict = {}
    read = 0
    if surviving is not None:
        if plan.recompute_ids and oracle is None:
            raise UnrecoverableError(
                f"request {failure.request_id}: {len(plan.recompute_ids)} chunks need "
                "recomputation and no recompute source was given"
            )
        for cid in plan.recompute_ids:
            recovered[cid] = {w: np.asarray(oracle(cid, w), dtype=np.uint8) for w in failed}
        for cid in plan.reconstruct_ids:
            parity = store.get(failure.request_id, cid)
            recovered[cid] = reconstruct_chunk(cid, surviving[cid], parity, failed,
                                               config.model, m)
            read += parity.payload_bytes
    else:
        read = sum(store.entries[(failure.request_id, c)].payload_bytes
                   for c in plan.reconstruct_ids)
    return RecoveryResult(recovered, timeline, plan, duration,
                          len(plan.reconstruct_ids), len(plan.recompute_ids), read, notes)


__all__ = [
    "FailureEvent", "RecoveryMode", "RecoveryPlan", "RecoveryResult",
    "get_recompute_units", "plan_recovery", "reconstruct_chunk", "reconstruct_time",
    "recompute_time", "recover", "recovery_events", "recovery_time", "verify_recovery",
]
