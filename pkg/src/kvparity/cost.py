"""Analytic timing for compute, collectives and host/disk transfers.

Defaults are calibrated for a 70B-class GQA model at TP=8 with a 2048-token
chunk: one chunk computes in 120 ms, the host link moves 32 GB/s and the
intra-node fabric 400 GB/s.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .codes import CodingScheme
from .errors import ConfigError


@dataclass(frozen=True)
class CostModel:
    compute_per_token: float = 0.120 / 2048  # s/token for the TP group's prefill
    decode_step_time: float = 0.025          # s per batched decode iteration
    intra_bw: float = 400e9                  # B/s, worker <-> worker
    host_bw: float = 32e9                    # B/s, GPU <-> host memory (shared link)
    disk_bw: float = 6e9                     # B/s, GPU <-> local SSD
    encode_rate: float = 300e9               # B/s of data shards consumed by encode
    reconstruct_rate: float = 300e9          # B/s of shards consumed by reconstruct
    fixed_collective_latency: float = 1e-3   # s per gather
    restart_overhead: float = 2.0            # s: process restart, NCCL re-init, warmup

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("fixed_collective_latency", "restart_overhead"):
                if v < 0:
                    raise ConfigError(f"cost.{f.name} must be non-negative")
            elif not v > 0:
                raise ConfigError(f"cost.{f.name} must be positive")
        if self.host_bw > self.intra_bw:
            raise ConfigError("cost.host_bw must not exceed cost.intra_bw")

    def as_dict(self) -> dict:
        return asdict(self)

    # -- primitive costs --------------------------------------------------

    def compute(self, tokens: int) -> float:
        return tokens * self.compute_per_token

    def gather(self, senders: int, slice_len: int) -> float:
        """Many-to-one gather of ``senders`` slices onto one worker."""
        return senders * slice_len / self.intra_bw + self.fixed_collective_latency

    def encode(self, scheme: CodingScheme, slice_len: int) -> float:
        return scheme.n * slice_len / self.encode_rate

    def reconstruct(self, scheme: CodingScheme, slice_len: int) -> float:
        # decoding reads n shards: the survivors plus enough parity
        return scheme.n * slice_len / self.reconstruct_rate

    def host_transfer(self, nbytes: int) -> float:
        return nbytes / self.host_bw

    def disk_transfer(self, nbytes: int) -> float:
        return nbytes / self.disk_bw

    # -- composite costs --------------------------------------------------

    def checkpoint_stall(self, scheme: CodingScheme, slice_len: int) -> float:
        """Non-overlapped part of one chunk checkpoint: gather + encode."""
        return self.gather(scheme.n - 1, slice_len) + self.encode(scheme, slice_len)

    def parity_offload(self, scheme: CodingScheme, slice_len: int) -> float:
        return self.host_transfer(scheme.k * slice_len)

    def reconstruct_chunk(self, scheme: CodingScheme, slice_len: int, failed: int = 1) -> float:
        """Fetch one parity chunk, gather the survivors and decode."""
        return (
            self.host_transfer(scheme.k * slice_len)
            + self.gather(scheme.n - failed, slice_len)
            + self.reconstruct(scheme, slice_len)
        )
