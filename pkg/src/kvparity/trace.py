"""Synthetic request traces and failure injection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .recovery import FailureEvent

LONG_IN = "long_in_short_out"
SHORT_IN = "short_in_long_out"


@dataclass(frozen=True)
class TraceRequest:
    id: int
    arrival: float
    input_len: int
    output_len: int
    cls: str = LONG_IN

    def __post_init__(self):
        if self.input_len < 1 or self.output_len < 1:
            raise ConfigError(f"request {self.id}: lengths must be at least 1")

    @property
    def total_tokens(self) -> int:
        return self.input_len + self.output_len


@dataclass(frozen=True)
class TraceRanges:
    """Inclusive token-length ranges per request class."""

    long_input: tuple = (16_384, 65_536)
    long_output: tuple = (128, 512)
    short_input: tuple = (128, 1_024)
    short_output: tuple = (2_048, 8_192)

    def __post_init__(self):
        for name in ("long_input", "long_output", "short_input", "short_output"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ConfigError(f"trace range {name} = [{lo}, {hi}] is empty or non-positive")


def generate_trace(seed: int, count: int, rate: float, mix: float = 0.5,
                   ranges: TraceRanges = TraceRanges()) -> list[TraceRequest]:
    """Poisson arrivals at ``rate`` per second; ``mix`` is the long-input fraction."""
    if count < 1:
        raise ConfigError("trace count must be at least 1")
    if not rate > 0:
        raise ConfigError("arrival rate must be positive")
    if not 0.0 <= mix <= 1.0:
        raise ConfigError("mix must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(1.0 / rate, count))
    is_long = rng.random(count) < mix
    out = []
    for i in range(count):
        if is_long[i]:
            s = rng.integers(ranges.long_input[0], ranges.long_input[1] + 1)
            o = rng.integers(ranges.long_output[0], ranges.long_output[1] + 1)
        else:
            s = rng.integers(ranges.short_input[0], ranges.short_input[1] + 1)
            o = rng.integers(ranges.short_output[0], ranges.short_output[1] + 1)
        out.append(TraceRequest(i, float(arrivals[i]), int(s), int(o),
                                LONG_IN if is_long[i] else SHORT_IN))
    return out


@dataclass(frozen=True)
class FailureInjectorConfig:
    rate: float = 0.1
    seed: int = 0
    workers_per_failure: int = 1

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError("failure rate must lie in [0, 1]")
        if self.workers_per_failure < 1:
            raise ConfigError("workers_per_failure must be at least 1")


@dataclass(frozen=True)
class PlannedFailure:
    """Where in a request's life a failure strikes.

    ``token`` is the number of the request's tokens already processed (prompt
    tokens first, then generated ones); the simulator turns it into a chunk
    count and a time.
    """

    request_id: int
    token: int
    failed_workers: frozenset

    def phase(self, input_len: int) -> str:
        return "prefill" if self.token < input_len else "decode"

    def to_event(self, input_len: int, chunk_size: int, at_time: float = 0.0) -> FailureEvent:
        done, inflight = failure_position(self.token, input_len, chunk_size)
        return FailureEvent(self.request_id, self.failed_workers, done, at_time,
                            self.phase(input_len), inflight)


def failure_position(token: int, input_len: int, chunk_size: int) -> tuple[int, int]:
    """(completed chunks, uncheckpointed tokens) for a failure after ``token`` tokens.

    Prefill work inside an unfinished chunk is lost outright and redone by the
    normal prefill path, so it does not count as in-flight. Decode tokens
    since the last full decode chunk must be recomputed during recovery.
    """
    if token < input_len:
        return (token // chunk_size, 0)
    prompt_chunks = math.ceil(input_len / chunk_size)
    done = token - input_len
    return (prompt_chunks + done // chunk_size, done % chunk_size)


def inject_failures(trace, cfg: FailureInjectorConfig, n_workers: int) -> list[PlannedFailure]:
    """Pick failing requests independently, each with one uniform strike point.

    Each request draws from its own seeded stream, so adding or removing
    requests does not move the failures of the others.
    """
    if cfg.workers_per_failure > n_workers:
        raise ConfigError(f"workers_per_failure {cfg.workers_per_failure} exceeds {n_workers} workers")
    out = []
    for req in trace:
        rng = np.random.default_rng([cfg.seed, req.id])
        if rng.random() >= cfg.rate:
            continue
        token = int(rng.integers(0, req.total_tokens))
        workers = rng.choice(n_workers, cfg.workers_per_failure, replace=False)
        out.append(PlannedFailure(req.id, token, frozenset(int(w) for w in workers)))
    return out


__all__ = [
    "FailureInjectorConfig", "LONG_IN", "PlannedFailure", "SHORT_IN", "TraceRanges",
    "TraceRequest", "failure_position", "generate_trace", "inject_failures",
]
