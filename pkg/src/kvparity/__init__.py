"""Erasure-coded checkpointing of tensor-parallel KV caches, with a serving simulator."""

from .checkpoint import (
    AssignmentState, CheckpointConfig, DecodeCheckpointer, checkpoint_chunk,
    checkpoint_decode_step, next_parity_worker, run_prefill_with_checkpointing,
)
from .codes import CodingScheme, ErasurePattern, Kind, encode, max_tolerance, reconstruct
from .cost import CostModel
from .errors import (
    BackPressure, ConfigError, MissingParityError, ParityIntegrityError, ShardError,
    SimulationError, UnrecoverableError,
)
from .kv import (
    LLAMA_65B_MHA, LLAMA_70B, KvChunkSlice, ModelConfig, bits_to_fp16, chunk_count,
    fp16_to_bits, ground_truth_slice, pad_partial, slice_bytes,
)
from .recovery import (
    FailureEvent, RecoveryMode, RecoveryPlan, get_recompute_units, reconstruct_chunk,
    recover, verify_recovery,
)
from .sim import MetricsReport, SimOptions, Strategy, StrategyKind, compute_eitr, compute_mttr, simulate
from .store import ParityChunk, ParityStore, load_store, save_store
from .trace import FailureInjectorConfig, TraceRequest, generate_trace, inject_failures

__version__ = "0.1.0"

__all__ = [
    "AssignmentState",
    "BackPressure",
    "CheckpointConfig",
    "CodingScheme",
    "ConfigError",
    "CostModel",
    "DecodeCheckpointer",
    "ErasurePattern",
    "FailureEvent",
    "FailureInjectorConfig",
    "Kind",
    "KvChunkSlice",
    "LLAMA_65B_MHA",
    "LLAMA_70B",
    "MetricsReport",
    "MissingParityError",
    "ModelConfig",
    "ParityChunk",
    "ParityIntegrityError",
    "ParityStore",
    "RecoveryMode",
    "RecoveryPlan",
    "ShardError",
    "SimOptions",
    "SimulationError",
    "Strategy",
    "StrategyKind",
    "TraceRequest",
    "UnrecoverableError",
    "__version__",
    "bits_to_fp16",
    "checkpoint_chunk",
    "checkpoint_decode_step",
    "chunk_count",
    "compute_eitr",
    "compute_mttr",
    "encode",
    "fp16_to_bits",
    "generate_trace",
    "get_recompute_units",
    "ground_truth_slice",
    "inject_failures",
    "load_store",
    "max_tolerance",
    "next_parity_worker",
    "pad_partial",
    "reconstruct",
    "reconstruct_chunk",
    "recover",
    "run_prefill_with_checkpointing",
    "save_store",
    "simulate",
    "slice_bytes",
    "verify_recovery",
]
