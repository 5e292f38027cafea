"""Discrete-event simulation of one tensor-parallel group serving a trace.

The engine runs iteration-level continuous batching: each iteration computes
at most one prefill chunk (oldest admitted request first) and then one decode
step for every request already decoding. Stretches with no prefill work are
coalesced into a single decode event up to the next interesting point
(a finish, a decode chunk boundary, a failure or an arrival that could be
admitted). All times are virtual seconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .checkpoint import AssignmentState, CheckpointConfig, checkpoint_chunk, chunk_events
from .codes import CodingScheme
from .errors import BackPressure, ConfigError, SimulationError, UnrecoverableError
from .events import ENGINE, Event, busy_time, inference_time
from .kv import chunk_count, ground_truth_slice
from .recovery import FailureEvent, RecoveryMode, recover, verify_recovery
from .store import ParityChunk, ParityStore
from .trace import PlannedFailure, TraceRequest


class StrategyKind(str, Enum):
    RECOMPUTE_ONLY = "recompute_only"
    REPLICATE_HOST = "replicate_host"
    REPLICATE_DISK = "replicate_disk"
    GHOSTSERVE = "ghostserve"  # parity checkpointing with hybrid recovery


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    scheme: Optional[CodingScheme] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.kind is StrategyKind.GHOSTSERVE and self.scheme is None:
            raise ConfigError("the parity strategy needs a coding scheme")
        if self.kind is not StrategyKind.GHOSTSERVE and self.scheme is not None:
            raise ConfigError(f"{self.kind.value} takes no coding scheme")

    @property
    def replicates(self) -> bool:
        return self.kind in (StrategyKind.REPLICATE_HOST, StrategyKind.REPLICATE_DISK)

    def __str__(self) -> str:
        return self.kind.value if self.scheme is None else f"{self.kind.value}:{self.scheme}"


@dataclass(frozen=True)
class SimOptions:
    max_batch: int = 16
    store_capacity: int = 1 << 40
    verify: bool = False        # materialise KV and parity; check every recovery bit for bit
    retain_parity: bool = False  # keep entries after a request finishes
    seed: int = 0               # ground-truth KV seed (verify mode)

    def __post_init__(self):
        if self.max_batch < 1:
            raise ConfigError("max_batch must be at least 1")
        if self.store_capacity < 1:
            raise ConfigError("store_capacity must be positive")


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile; 0 for an empty sample."""
    if not 0 < q <= 100:
        raise ValueError("percentile rank must lie in (0, 100]")
    if not values:
        return 0.0
    ordered = sorted(values)
    return ordered[max(1, math.ceil(q / 100 * len(ordered))) - 1]


def compute_eitr(timeline: Sequence[Event]) -> float:
    total = busy_time(timeline)
    return 1.0 if total == 0 else inference_time(timeline) / total


def compute_mttr(recovery_events: Sequence) -> float:
    """Mean recovery duration. Accepts events (only ``recovery`` ones count) or plain numbers."""
    durs = [e.duration for e in recovery_events if e.kind == "recovery"] \
        if recovery_events and isinstance(recovery_events[0], Event) else list(recovery_events)
    return sum(durs) / len(durs) if durs else 0.0


@dataclass
class MetricsReport:
    prefill_latency: list
    decode_latency: list
    recovery_latency: list
    p50: float
    p99: float
    eitr: float
    mttr: float
    io_bytes_checkpoint: int
    io_bytes_recovery: int
    parity_store_peak_bytes: int
    strategy: str = ""
    requests: int = 0
    failures: int = 0
    fallbacks: int = 0
    verified_recoveries: int = 0
    makespan: float = 0.0
    checkpoint_stall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


@dataclass
class SimResult:
    report: MetricsReport
    timeline: list
    store: Optional[ParityStore] = None


def truth_lookup(truth: dict):
    """Recompute oracle backed by the known ground-truth slices."""
    return lambda cid, worker: truth[cid][worker]


@dataclass
class _Req:
    request: TraceRequest
    n_prompt: int
    next_chunk: int = 0
    generated: int = 0
    prefill_end: Optional[float] = None
    finish: Optional[float] = None
    failure: Optional[PlannedFailure] = None
    recovery: float = 0.0
    blocked: Optional[ParityChunk] = None
    state: AssignmentState = field(default_factory=AssignmentState)

    @property
    def decoding(self) -> bool:
        return self.next_chunk >= self.n_prompt

    def steps_to_failure(self) -> Optional[int]:
        """Decode steps left before a pending decode-phase failure strikes."""
        if self.failure is None or self.failure.token < self.request.input_len:
            return None
        return self.failure.token - self.request.input_len - self.generated


class _Engine:
    def __init__(self, trace, strategy, config, failures, options):
        self.strategy = strategy
        self.config = config
        self.opts = options
        self.cost = config.cost
        self.m = config.chunk_size
        self.N = config.n_workers
        self.slice_len = config.slice_len
        self.store = ParityStore(options.store_capacity)
        self.timeline: list[Event] = []
        self.t = 0.0
        self.link_free = 0.0
        self.io_ckpt = 0
        self.io_rec = 0
        self.stall = 0.0
        self.fallbacks = 0
        self.verified = 0
        by_id = {}
        for f in failures:
            if f.request_id in by_id:
                raise ConfigError(f"request {f.request_id} has more than one planned failure")
            by_id[f.request_id] = f
        self.reqs = [_Req(r, chunk_count(r.input_len, self.m), failure=by_id.get(r.id))
                     for r in sorted(trace, key=lambda r: (r.arrival, r.id))]
        known = {r.id for r in trace}
        stray = set(by_id) - known
        if stray:
            raise ConfigError(f"failures planned for unknown requests {sorted(stray)}")
        self.pending = list(self.reqs)
        self.active: list[_Req] = []

    # -- helpers ------------------------------------------------------------

    def emit(self, ev):
        self.timeline.append(ev)

    def _chunk_tokens(self, req: _Req, cid: int) -> int:
        if cid < req.n_prompt:
            return min(self.m, req.request.input_len - cid * self.m)
        first = (cid - req.n_prompt) * self.m
        return min(self.m, req.request.output_len - first)

    def _slices(self, req: _Req, cid: int):
        valid = self._chunk_tokens(req, cid)
        return [ground_truth_slice(self.opts.seed, req.request.id, cid, w, self.config.model, self.m, valid)
                for w in range(self.N)]

    def _put(self, req: _Req, p: ParityChunk) -> None:
        try:
            self.store.put(p)
        except BackPressure:
            req.blocked = p

    # -- checkpointing -------------------------------------------------------

    def checkpoint(self, req: _Req, cid: int) -> None:
        kind = self.strategy.kind
        valid = self._chunk_tokens(req, cid)
        if kind is StrategyKind.RECOMPUTE_ONLY:
            return
        if self.strategy.replicates:
            nbytes = self.N * self.slice_len
            bw = self.cost.host_bw if kind is StrategyKind.REPLICATE_HOST else self.cost.disk_bw
            d = nbytes / bw
            self.emit(Event("replicate", self.t, d, ENGINE, cid, req.request.id))
            self.t += d
            self.stall += d
            self.io_ckpt += nbytes
            self._put(req, ParityChunk.sized(req.request.id, cid, None, self.slice_len, self.N, valid))
            return
        if self.opts.verify:
            p, ev, req.state = checkpoint_chunk(self._slices(req, cid), self.config, req.state,
                                                self.t, self.link_free, compute=False)
        else:
            w = req.state.next_worker % self.N
            req.state = AssignmentState((w + 1) % self.N)
            ev = chunk_events(self.config, req.request.id, cid, w, self.t, 0, self.slice_len, self.link_free)
            p = ParityChunk.sized(req.request.id, cid, self.strategy.scheme, self.slice_len,
                                  self.strategy.scheme.k, valid)
        self.timeline += ev
        barrier = next(e for e in ev if e.kind == "barrier")
        self.stall += barrier.start - self.t
        self.t = barrier.start
        self.link_free = ev[-1].end
        self.io_ckpt += p.payload_bytes
        self._put(req, p)

    # -- failures --------------------------------------------------------------

    def fail(self, req: _Req) -> None:
        f, req.failure = req.failure, None
        ckpt_decode = self.config.checkpoint_decode or self.strategy.kind is not StrategyKind.GHOSTSERVE
        s = req.request.input_len
        if f.token < s:
            n, inflight = f.token // self.m, 0
        else:
            done = f.token - s
            full = done // self.m if ckpt_decode else 0
            n, inflight = req.n_prompt + full, done - full * self.m
        event = FailureEvent(req.request.id, f.failed_workers, n, self.t,
                             "prefill" if f.token < s else "decode", inflight)
        start = self.t
        kind = self.strategy.kind
        tokens = [self._chunk_tokens(req, c) for c in range(n)]
        if kind is StrategyKind.GHOSTSERVE:
            self._recover_parity(req, event, tokens)
        else:
            ev = [Event("restart", start, self.cost.restart_overhead, ENGINE, -1, req.request.id)]
            if kind is StrategyKind.RECOMPUTE_ONLY:
                d = self.cost.compute(sum(tokens))
                ev.append(Event("recompute", start + self.cost.restart_overhead, d, ENGINE, -1, req.request.id))
                end = ev[-1].end
            else:
                # the whole request's KV comes back from the replica while the group restarts
                nbytes = n * self.N * self.slice_len
                bw = self.cost.host_bw if kind is StrategyKind.REPLICATE_HOST else self.cost.disk_bw
                ev.append(Event("kv_restore", start, nbytes / bw, ENGINE, -1, req.request.id))
                self.io_rec += nbytes
                end = max(ev[0].end, ev[1].end)
            if inflight:
                ev.append(Event("recompute", end, self.cost.compute(inflight), ENGINE, n, req.request.id))
                end = ev[-1].end
            ev.append(Event("recovery", start, end - start, ENGINE, -1, req.request.id))
            ev.append(Event("resume", end, 0.0, ENGINE, -1, req.request.id))
            self.timeline += ev
            self.t = end
        req.recovery += self.t - start

    def _recover_parity(self, req: _Req, event: FailureEvent, tokens) -> None:
        surviving = None
        truth = {}
        if self.opts.verify:
            for cid in range(event.at_chunk):
                truth[cid] = {s.worker: s.data for s in self._slices(req, cid)}
            surviving = {c: {w: b for w, b in ws.items() if w not in event.failed_workers}
                         for c, ws in truth.items()}
        oracle = truth_lookup(truth) if self.opts.verify else None
        try:
            res = recover(event, self.store, surviving, self.config, oracle, self.t, tokens)
        except UnrecoverableError as exc:
            raise SimulationError(f"request {req.request.id}: {exc}") from exc
        if self.opts.verify:
            want = {c: {w: truth[c][w] for w in event.failed_workers} for c in range(event.at_chunk)}
            if not verify_recovery(res.recovered, want):
                raise SimulationError(f"request {req.request.id}: recovered KV differs from the original")
            self.verified += 1
        if res.plan.mode is RecoveryMode.FALLBACK:
            self.fallbacks += 1
        self.io_rec += res.parity_bytes_read
        self.timeline += res.timeline
        self.t += res.duration

    # -- main loop -------------------------------------------------------------

    def admit(self) -> None:
        while self.pending and len(self.active) < self.opts.max_batch \
                and self.pending[0].request.arrival <= self.t:
            self.active.append(self.pending.pop(0))

    def complete(self, req: _Req) -> None:
        req.finish = self.t
        self.active.remove(req)
        if not self.opts.retain_parity:
            self.store.evict_request(req.request.id)

    def run(self) -> None:
        while self.pending or self.active:
            self.admit()
            if not self.active:
                self.t = max(self.t, self.pending[0].request.arrival)
                continue
            for req in self.active:
                if req.blocked is not None:
                    try:
                        self.store.put(req.blocked)
                        req.blocked = None
                    except BackPressure:
                        pass
            runnable = [r for r in self.active if r.blocked is None]
            if not runnable:
                if self.pending and len(self.active) < self.opts.max_batch:
                    self.t = max(self.t, self.pending[0].request.arrival)
                    continue
                raise SimulationError(
                    f"parity store deadlock at t={self.t:.3f}s: every running request is "
                    f"waiting for space ({self.store.used_bytes} of {self.store.capacity_bytes} bytes used)"
                )
            self.iterate(runnable)

    def iterate(self, runnable: list) -> None:
        pre = next((r for r in runnable if not r.decoding), None)
        decoders = [r for r in runnable if r.decoding]
        for r in decoders:
            if r.steps_to_failure() == 0:
                self.fail(r)

        if pre is not None:
            cid = pre.next_chunk
            valid = self._chunk_tokens(pre, cid)
            f = pre.failure
            if f is not None and cid * self.m <= f.token < cid * self.m + valid:
                lost = self.cost.compute(f.token - cid * self.m)
                if lost:
                    self.emit(Event("lost_work", self.t, lost, ENGINE, cid, pre.request.id))
                    self.t += lost
                self.fail(pre)
            d = self.cost.compute(valid)
            for w in range(self.N):
                self.emit(Event("compute_chunk", self.t, d, w, cid, pre.request.id))
            self.t += d
            pre.next_chunk += 1
            self.checkpoint(pre, cid)
            if pre.decoding:
                pre.prefill_end = self.t

        if not decoders:
            return
        steps = self._decode_span(decoders, pre is not None)
        dur = steps * self.cost.decode_step_time
        self.emit(Event("decode_step", self.t, dur, ENGINE, -1, -1))
        self.t += dur
        for r in decoders:
            r.generated += steps
            boundary = r.generated % self.m == 0 or r.generated == r.request.output_len
            if boundary and (self.config.checkpoint_decode or self.strategy.kind is not StrategyKind.GHOSTSERVE):
                self.checkpoint(r, r.n_prompt + (r.generated - 1) // self.m)
            if r.generated == r.request.output_len:
                self.complete(r)

    def _decode_span(self, decoders, had_prefill: bool) -> int:
        if had_prefill:
            return 1
        k = min(
            min(r.request.output_len - r.generated, self.m - r.generated % self.m) for r in decoders
        )
        for r in decoders:
            s = r.steps_to_failure()
            if s is not None and s > 0:
                k = min(k, s)
        if any(not r.decoding for r in self.active):
            k = 1  # a blocked prefill may resume next iteration
        if self.pending and len(self.active) < self.opts.max_batch:
            gap = self.pending[0].request.arrival - self.t
            k = min(k, max(1, math.ceil(gap / self.cost.decode_step_time)))
        return max(1, k)

    def report(self) -> MetricsReport:
        unfinished = [r.request.id for r in self.reqs if r.generated != r.request.output_len]
        if unfinished:
            raise SimulationError(f"requests {unfinished[:5]} ended without their full output")
        e2e = [r.finish - r.request.arrival for r in self.reqs]
        recoveries = [e for e in self.timeline if e.kind == "recovery"]
        peak = self.store.peak_payload_bytes
        return MetricsReport(
            prefill_latency=[r.prefill_end - r.request.arrival for r in self.reqs],
            decode_latency=[r.finish - r.prefill_end for r in self.reqs],
            recovery_latency=[r.recovery for r in self.reqs],
            p50=percentile(e2e, 50), p99=percentile(e2e, 99),
            eitr=compute_eitr(self.timeline), mttr=compute_mttr(recoveries),
            io_bytes_checkpoint=self.io_ckpt, io_bytes_recovery=self.io_rec,
            parity_store_peak_bytes=peak, strategy=str(self.strategy),
            requests=len(self.reqs), failures=len(recoveries), fallbacks=self.fallbacks,
            verified_recoveries=self.verified, makespan=self.t, checkpoint_stall_time=self.stall,
        )


def simulate(
    trace: Sequence[TraceRequest], strategy: Strategy, config: CheckpointConfig,
    failures: Sequence[PlannedFailure] = (), options: SimOptions = SimOptions(),
) -> SimResult:
    if strategy.kind is StrategyKind.GHOSTSERVE and strategy.scheme != config.scheme:
        raise ConfigError(f"strategy scheme {strategy.scheme} differs from checkpoint scheme {config.scheme}")
    if not trace:
        raise ConfigError("empty trace")
    for f in failures:
        if any(not 0 <= w < config.n_workers for w in f.failed_workers):
            raise ConfigError(f"request {f.request_id}: failed workers outside [0, {config.n_workers})")
    eng = _Engine(trace, strategy, config, failures, options)
    eng.run()
    return SimResult(eng.report(), eng.timeline, eng.store)


def checkpoint_overhead(input_len: int, strategy: Strategy, config: CheckpointConfig) -> float:
    """Prefill time checkpointing adds to one request running alone.

    Measured until the last prompt checkpoint byte has left the GPU, so the
    final parity offload, which nothing overlaps, is included.
    """
    res = simulate([TraceRequest(0, 0.0, input_len, 1)], strategy, config)
    n_prompt = chunk_count(input_len, config.chunk_size)
    done = max([res.report.prefill_latency[0]] + [
        e.end for e in res.timeline if e.kind == "offload" and e.chunk_id < n_prompt])
    return done - config.cost.compute(input_len)


__all__ = [
    "MetricsReport", "SimOptions", "SimResult", "Strategy", "StrategyKind",
    "checkpoint_overhead", "compute_eitr", "compute_mttr", "percentile", "simulate",
]
