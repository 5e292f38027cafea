"""Acceptance checks. Each test records one PASS/FAIL line; the lines are
printed at the end of the pytest run, or directly when this file is run as a
script (``python tests/test_acceptance.py``).
"""

import itertools
import json
import random
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from kvparity import gf
from kvparity.checkpoint import AssignmentState, CheckpointConfig, next_parity_worker, sized_checkpoint
from kvparity.cli import main as cli_main
from kvparity.codes import CodingScheme, encode, reconstruct
from kvparity.config import RunConfig
from kvparity.cost import CostModel
from kvparity.events import ENGINE, Event
from kvparity.kv import LLAMA_65B_MHA, LLAMA_70B, bits_to_fp16, fp16_to_bits, slice_bytes
from kvparity.recovery import get_recompute_units, recovery_time
from kvparity.sim import (
    Strategy, StrategyKind, checkpoint_overhead, compute_eitr, compute_mttr, simulate,
)
from kvparity.trace import inject_failures

RESULTS: dict[int, str] = {}


def record(num: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[num] = f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2}: {title} ({detail})"
    assert ok, RESULTS[num]


def summary_lines() -> list[str]:
    return [RESULTS[k] for k in sorted(RESULTS)]


# -- 1 ----------------------------------------------------------------------------

def test_criterion_01_coding_round_trip():
    schemes = [CodingScheme.xor(n) for n in (2, 4, 8)] + [CodingScheme.rdp(n) for n in (4, 6)] + [
        CodingScheme.rs(n, k) for n, k in ((4, 1), (4, 2), (8, 2), (8, 3))]
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    patterns = failures = 0
    for scheme in schemes:
        for length in (1, 17, 4096, 1 << 20):
            data = [rng.integers(0, 256, length, dtype=np.uint8) for _ in range(scheme.n)]
            shards = data + encode(scheme, data)
            for t in range(1, scheme.k + 1):
                for lost in itertools.combinations(range(scheme.width), t):
                    out = reconstruct(scheme, {i: s for i, s in enumerate(shards) if i not in lost}, lost)
                    patterns += 1
                    failures += not all(np.array_equal(out[i], shards[i]) for i in lost)
    dt = time.perf_counter() - t0
    record(1, "coding round-trip", failures == 0 and dt < 120,
           f"{patterns} erasure patterns, {failures} mismatches, {dt:.1f}s")


# -- 2 ----------------------------------------------------------------------------

def _schoolbook(a: int, b: int) -> int:
    prod = 0
    for i in range(8):
        if b >> i & 1:
            prod ^= a << i
    for bit in range(14, 7, -1):
        if prod >> bit & 1:
            prod ^= 0x11D << (bit - 8)
    return prod


def test_criterion_02_gf_oracle():
    bad_mul = sum(gf.gf_mul(a, b) != _schoolbook(a, b) for a in range(256) for b in range(256))
    bad_inv = sum(_schoolbook(a, gf.gf_inv(a)) != 1 for a in range(1, 256))
    record(2, "GF(2^8) oracle equivalence", bad_mul == 0 and bad_inv == 0,
           f"65536 products, {bad_mul} mismatches; 255 inverses, {bad_inv} bad")


# -- 3 ----------------------------------------------------------------------------

def test_criterion_03_memory_ratio():
    # a burst of 16 requests admitted together, so both strategies run the same schedule
    cfg = RunConfig.from_mapping({"trace.count": 16, "trace.rate": 1e6, "trace.seed": 3})
    trace = cfg.trace()
    ckpt = cfg.checkpoint_config()
    g = simulate(trace, Strategy(StrategyKind.GHOSTSERVE, CodingScheme.rs(8, 2)), ckpt).report
    h = simulate(trace, Strategy(StrategyKind.REPLICATE_HOST), ckpt).report
    ratio = g.parity_store_peak_bytes / h.parity_store_peak_bytes
    record(3, "memory ratio RS(8,2) vs replication", ratio == 0.25,
           f"peak {g.parity_store_peak_bytes} / {h.parity_store_peak_bytes} = {ratio}")


# -- 4 ----------------------------------------------------------------------------

def test_criterion_04_checkpoint_latency_band():
    ckpt = CheckpointConfig(CodingScheme.rs(8, 2), 2048, LLAMA_70B)
    g = checkpoint_overhead(65_536, Strategy(StrategyKind.GHOSTSERVE, ckpt.scheme), ckpt)
    h = checkpoint_overhead(65_536, Strategy(StrategyKind.REPLICATE_HOST), ckpt)
    reduction = 1 - g / h
    record(4, "64K-token checkpoint overhead reduction in [63%, 83%]", 0.63 <= reduction <= 0.83,
           f"parity {g * 1e3:.1f} ms vs replicate {h * 1e3:.1f} ms, {reduction:.1%} lower")


# -- 5 ----------------------------------------------------------------------------

def test_criterion_05_stall_bound():
    ckpt = CheckpointConfig(CodingScheme.rs(8, 2), 2048, LLAMA_70B)
    _, events, _ = sized_checkpoint(ckpt, 0, 0, 2048, AssignmentState())
    compute_end = max(e.end for e in events if e.kind == "compute_chunk")
    barrier = next(e for e in events if e.kind == "barrier")
    stall = barrier.start - compute_end
    frac = stall / ckpt.cost.compute(2048)
    record(5, "per-chunk stall < 5% of chunk compute", frac < 0.05,
           f"{stall * 1e3:.3f} ms of {ckpt.cost.compute(2048) * 1e3:.1f} ms = {frac:.2%}")


# -- 6 ----------------------------------------------------------------------------

def _sweep(n, m, scheme, cost, slice_len):
    costs = [recovery_time(r, n, m, scheme, cost, slice_len) for r in range(n + 1)]
    return costs.index(min(costs))


def test_criterion_06_hybrid_recovery():
    rnd = random.Random(6)
    mismatches = 0
    for _ in range(1000):
        n = rnd.randint(0, 400)
        m = rnd.choice([256, 512, 1024, 2048, 4096])
        scheme = rnd.choice([CodingScheme.xor(8), CodingScheme.rdp(8), CodingScheme.rs(8, 2), CodingScheme.rs(8, 3)])
        host = 10 ** rnd.uniform(9, 11)
        cost = CostModel(
            compute_per_token=10 ** rnd.uniform(-6, -3.5),
            host_bw=host, intra_bw=host * rnd.uniform(1, 40),
            encode_rate=10 ** rnd.uniform(10, 12), reconstruct_rate=10 ** rnd.uniform(10, 12),
            fixed_collective_latency=rnd.uniform(0, 5e-3), restart_overhead=rnd.uniform(0, 10),
        )
        slice_len = rnd.randint(1 << 16, 1 << 30)
        mismatches += get_recompute_units(n, m, scheme, cost, slice_len) != _sweep(n, m, scheme, cost, slice_len)

    # full multi-head attention KV, RS(8,3), a 512K-token context, default cost model
    cost = CostModel()
    scheme = CodingScheme.rs(8, 3)
    sl = slice_bytes(LLAMA_65B_MHA, 2048)
    n = 256
    r = get_recompute_units(n, 2048, scheme, cost, sl)
    hybrid = recovery_time(r, n, 2048, scheme, cost, sl)
    pure = recovery_time(0, n, 2048, scheme, cost, sl)
    gain = 1 - hybrid / pure
    record(6, "recompute split matches sweep; hybrid >= 35% faster somewhere",
           mismatches == 0 and gain >= 0.35,
           f"{mismatches}/1000 mismatches; MHA RS(8,3) n={n}: r={r}, {hybrid:.2f}s vs {pure:.2f}s, {gain:.1%} lower")


# -- 7 ----------------------------------------------------------------------------

def test_criterion_07_round_robin_fairness():
    rnd = random.Random(7)
    worst = 0
    for _ in range(1000):
        c, n = rnd.randint(0, 2000), rnd.randint(1, 64)
        counts = [0] * n
        state = AssignmentState()
        for _ in range(c):
            w, state = next_parity_worker(state, n)
            counts[w] += 1
        worst = max(worst, max(counts) - min(counts))
    record(7, "round-robin assignment counts differ by <= 1", worst <= 1,
           f"1000 random (c, N), worst spread {worst}")


# -- 8 ----------------------------------------------------------------------------

def test_criterion_08_metric_fixtures():
    timeline = [
        Event("compute_chunk", 0.0, 4.0, 0, 0, 0),
        Event("compute_chunk", 0.0, 4.0, 1, 0, 0),
        Event("gather", 4.0, 1.0, 0, 0, 0),
        Event("encode", 5.0, 0.5, 0, 0, 0),
        Event("offload", 5.5, 1.5, 0, 0, 0, overlappable=True),
        Event("decode_step", 5.5, 4.0, ENGINE),
        Event("recovery", 9.5, 2.0, ENGINE, -1, 0),
        Event("decode_step", 11.5, 0.5, ENGINE),
        Event("recovery", 12.0, 4.0, ENGINE, -1, 1),
    ]
    # inference: [0,4] + [5.5,9.5] + [11.5,12] = 8.5; runtime without offload: [0,16] = 16
    eitr = compute_eitr(timeline)
    mttr = compute_mttr([e for e in timeline if e.kind == "recovery"])
    simple = compute_eitr([Event("compute_chunk", 0, 90.0), Event("recovery", 90.0, 10.0)])
    ok = eitr == 8.5 / 16 and mttr == 3.0 and simple == 0.9 and compute_mttr([]) == 0.0
    record(8, "EITR and MTTR fixtures", ok, f"eitr={eitr} (want {8.5 / 16}), mttr={mttr} (want 3.0)")


# -- 9 ----------------------------------------------------------------------------

def test_criterion_09_end_to_end_trends():
    cfg = RunConfig.from_mapping({})  # 200 requests, defaults
    trace = cfg.trace()
    ckpt = cfg.checkpoint_config()
    rows, ok = [], len(trace) == 200
    for rate in (0.05, 0.10, 0.15):
        failures = inject_failures(trace, cfg.injector(rate), ckpt.n_workers)
        g = simulate(trace, Strategy(StrategyKind.GHOSTSERVE, ckpt.scheme), ckpt, failures).report
        h = simulate(trace, Strategy(StrategyKind.REPLICATE_HOST), ckpt, failures).report
        ok &= g.eitr >= h.eitr and g.mttr <= h.mttr
        if rate == 0.15:
            ok &= g.eitr > 0.90
        rows.append(f"{rate:.0%}: eitr {g.eitr:.3f} vs {h.eitr:.3f}, mttr {g.mttr:.2f}s vs {h.mttr:.2f}s")
    record(9, "EITR/MTTR trends vs host replication", ok, "; ".join(rows))


# -- 10 ---------------------------------------------------------------------------

def test_criterion_10_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp, "a"), Path(tmp, "b")
        codes = [cli_main(["simulate", "--seed", "17", "--out", str(d)]) for d in (a, b)]
        names = sorted(p.name for p in a.glob("report_*.json"))
        same = names and all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
        json.loads((a / names[0]).read_text())
    record(10, "identical seeds give byte-identical reports", codes == [0, 0] and bool(same),
           f"{len(names)} report files compared")


# -- 11 ---------------------------------------------------------------------------

def test_criterion_11_fp16_bijection():
    bits = np.arange(1 << 16, dtype=np.uint16)
    values = bits_to_fp16(bits)
    back = fp16_to_bits(values)
    nans = int(np.isnan(values).sum())
    ok = np.array_equal(back, bits) and fp16_to_bits(-0.0) == 0x8000 and nans == 2046
    record(11, "FP16 bit reinterpretation is a bijection", ok,
           f"65536 patterns round-trip, {nans} NaN payloads preserved, -0.0 -> 0x{fp16_to_bits(-0.0):04X}")


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]
    failed = 0
    for num, fn in enumerate(tests, 1):
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - report every criterion, even after a crash
            failed += 1
            RESULTS.setdefault(num, f"[FAIL] criterion {num:>2}: {fn.__name__} raised {exc!r}")
    for line in summary_lines():
        print(line)
    sys.exit(1 if failed else 0)
