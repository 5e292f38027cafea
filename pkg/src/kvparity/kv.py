"""Chunked KV-cache state held as per-worker byte slices.

Slice layout (fixed so ground-truth comparison is deterministic): a
``(2, layers, m, row_bytes)`` array flattened in C order, i.e. all K rows for
layer 0 tokens ``0..m``, then layer 1, ..., followed by the V tensor in the same
order. ``row_bytes`` is one token's share of one layer on one worker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

BYTES_PER_ELEM = 2  # FP16


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    kv_heads: int
    head_dim: int
    tp_degree: int
    bytes_per_elem: int = BYTES_PER_ELEM

    def __post_init__(self):
        for name in ("layers", "kv_heads", "head_dim", "tp_degree", "bytes_per_elem"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if (self.kv_heads * self.head_dim) % self.tp_degree:
            raise ConfigError(
                f"kv_heads*head_dim = {self.kv_heads * self.head_dim} "
                f"is not divisible by tp_degree = {self.tp_degree}"
            )

    @property
    def row_bytes(self) -> int:
        return self.kv_heads * self.head_dim // self.tp_degree * self.bytes_per_elem

    @property
    def token_bytes(self) -> int:
        """KV bytes one token occupies on one worker."""
        return 2 * self.layers * self.row_bytes


# 80 layers, 8 KV heads of 128 (grouped-query attention), TP=8
LLAMA_70B = ModelConfig(layers=80, kv_heads=8, head_dim=128, tp_degree=8)
# same depth and width, full multi-head attention: 8x the KV bytes per token
LLAMA_65B_MHA = ModelConfig(layers=80, kv_heads=64, head_dim=128, tp_degree=8)


def fp16_to_bits(x) -> np.ndarray | int:
    """Reinterpret FP16 values as their uint16 bit patterns (no rounding)."""
    if isinstance(x, np.ndarray):
        return np.ascontiguousarray(x, dtype=np.float16).view(np.uint16)
    return int(np.float16(x).view(np.uint16))


def bits_to_fp16(w) -> np.ndarray | np.float16:
    if isinstance(w, np.ndarray):
        return np.ascontiguousarray(w, dtype=np.uint16).view(np.float16)
    return np.uint16(w).view(np.float16)


def chunk_count(s: int, m: int) -> int:
    if m < 1:
        raise ConfigError("chunk size must be positive")
    if s < 1:
        raise ConfigError("token count must be positive")
    return -(-s // m)


def slice_bytes(config: ModelConfig, m: int) -> int:
    if m < 1:
        raise ConfigError("chunk size must be positive")
    return m * config.token_bytes


@dataclass
class KvChunkSlice:
    request_id: int
    chunk_id: int
    worker: int
    data: np.ndarray
    valid_tokens: int

    def __len__(self) -> int:
        return self.data.size


def pad_partial(slc: KvChunkSlice, m: int, config: ModelConfig) -> KvChunkSlice:
    """Zero every token position at or beyond ``valid_tokens``."""
    if not 0 <= slc.valid_tokens <= m:
        raise ConfigError(f"valid_tokens {slc.valid_tokens} outside [0, {m}]")
    if slc.valid_tokens == m:
        return slc
    view = slc.data.reshape(2, config.layers, m, config.row_bytes).copy()
    view[:, :, slc.valid_tokens:, :] = 0
    return replace(slc, data=view.reshape(-1))


def ground_truth_slice(
    seed: int, request_id: int, chunk_id: int, worker: int,
    config: ModelConfig, m: int, valid_tokens: int | None = None,
) -> KvChunkSlice:
    """Deterministic stand-in for the KV bytes a forward pass would produce."""
    valid = m if valid_tokens is None else valid_tokens
    rng = np.random.default_rng([seed, request_id, chunk_id, worker])
    data = rng.integers(0, 256, slice_bytes(config, m), dtype=np.uint8)
    return pad_partial(KvChunkSlice(request_id, chunk_id, worker, data, valid), m, config)


def token_kv(chunk: KvChunkSlice, t: int, m: int, config: ModelConfig) -> np.ndarray:
    """The ``(2, layers, row_bytes)`` block belonging to token ``t`` of a slice."""
    return chunk.data.reshape(2, config.layers, m, config.row_bytes)[:, :, t, :].copy()


def total_kv_bytes(config: ModelConfig, s: int, m: int) -> int:
    """KV bytes of a request of ``s`` tokens summed over all workers, padding included."""
    return slice_bytes(config, m) * config.tp_degree * chunk_count(s, m)


def memory_overhead_ratio(scheme) -> float:
    """Parity bytes as a fraction of what full replication would store."""
    return scheme.k / scheme.n


def describe_bytes(n: float) -> str:
    if n <= 0:
        return "0 B"
    units = ["B", "KiB", "MiB", "GiB", "TiB"]
    i = min(int(math.log(n, 1024)), len(units) - 1)
    return f"{n / 1024 ** i:.1f} {units[i]}"
