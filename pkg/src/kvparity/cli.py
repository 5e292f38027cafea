"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
integrity error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from .codes import CodingScheme, encode, max_tolerance, reconstruct
from .config import RunConfig, parse_scheme
from .errors import (
    ConfigError, ParityIntegrityError, ShardError, SimulationError, UnrecoverableError,
)
from .events import write_csv
from .sim import simulate
from .store import fnv1a64, load_store, save_store
from .trace import inject_failures

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MANIFEST = "manifest.json"

SUMMARY_COLUMNS = (
    "strategy", "failure_rate", "eitr", "mttr", "p50", "p99", "failures", "fallbacks",
    "io_bytes_checkpoint", "io_bytes_recovery", "parity_store_peak_bytes", "report",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _checksum_file(path: Path) -> int:
    return fnv1a64(path.read_bytes())


def _read_shards(paths) -> list[np.ndarray]:
    out = []
    for p in paths:
        try:
            out.append(np.fromfile(p, dtype=np.uint8))
        except OSError as exc:
            raise ConfigError(f"cannot read {p}: {exc}") from exc
    return out


# -- encode / reconstruct ----------------------------------------------------

def cmd_encode(args) -> int:
    files = [Path(f) for f in args.inputs]
    scheme = parse_scheme(args.scheme, n=len(files))
    if len(files) != scheme.n:
        raise ConfigError(f"{scheme} needs {scheme.n} input files, got {len(files)}")
    data = _read_shards(files)
    lengths = sorted({d.size for d in data})
    if len(lengths) != 1:
        raise ShardError(f"input files have unequal lengths {lengths}")
    if lengths[0] == 0:
        raise ShardError("input files are empty")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    parity = encode(scheme, data)
    parity_files = []
    for i, buf in enumerate(parity):
        path = out / f"parity_{i}.bin"
        buf.tofile(path)
        parity_files.append({"file": path.name, "checksum": fnv1a64(buf)})
    manifest = {
        "scheme": scheme.kind.value, "n": scheme.n, "k": scheme.k, "length": lengths[0],
        "data": [{"file": str(f.resolve()), "checksum": fnv1a64(d)} for f, d in zip(files, data)],
        "parity": parity_files,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(parity)} parity file(s) and {MANIFEST} to {out}")
    return EXIT_OK


def _parse_indices(text: str) -> list[int]:
    try:
        return sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError as exc:
        raise ConfigError(f"cannot parse shard indices {text!r}") from exc


def cmd_reconstruct(args) -> int:
    mpath = Path(args.manifest)
    try:
        manifest = json.loads(mpath.read_text())
        scheme = CodingScheme(manifest["scheme"], manifest["n"], manifest["k"])
        entries = manifest["data"] + [
            {**p, "file": str(mpath.parent / p["file"])} for p in manifest["parity"]
        ]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad manifest {mpath}: {exc}") from exc
    lost = _parse_indices(args.lost)
    if len(lost) > max_tolerance(scheme):
        raise UnrecoverableError(
            f"{len(lost)} lost shards exceed the {scheme} limit of {max_tolerance(scheme)}"
        )
    overrides = {}
    for item in args.shard or []:
        idx, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--shard {item!r} is not INDEX=PATH")
        overrides[int(idx)] = path
    surviving = {}
    for i, entry in enumerate(entries):
        if i in lost:
            continue
        path = Path(overrides.get(i, entry["file"]))
        (buf,) = _read_shards([path])
        if fnv1a64(buf) != entry["checksum"]:
            raise ParityIntegrityError(f"checksum mismatch for shard {i} ({path})")
        surviving[i] = buf
    rebuilt = reconstruct(scheme, surviving, lost)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for i in lost:
        if fnv1a64(rebuilt[i]) != entries[i]["checksum"]:
            raise ParityIntegrityError(f"rebuilt shard {i} does not match its recorded checksum")
        rebuilt[i].tofile(out / f"shard_{i}.bin")
    print(f"rebuilt shard(s) {lost} into {out}")
    return EXIT_OK


# -- simulate ------------------------------------------------------------------

def _cell_name(strategy, rate: float) -> str:
    return f"{strategy.kind.value}_rate{rate:.4f}".replace(".", "p")


def run_cells(cfg: RunConfig, out: Path, fmt: str = "json") -> list[dict]:
    """Run every (strategy, failure rate) cell and write its report."""
    out.mkdir(parents=True, exist_ok=True)
    trace = cfg.trace()
    ckpt = cfg.checkpoint_config()
    opts = cfg.sim_options()
    rows = []
    for strategy in cfg.strategies():
        for rate in cfg["failure.rates"]:
            failures = inject_failures(trace, cfg.injector(rate), ckpt.n_workers)
            res = simulate(trace, strategy, ckpt, failures, opts)
            name = _cell_name(strategy, rate)
            body = res.report.to_dict()
            body.update(failure_rate=float(rate), seeds={
                "trace": cfg["trace.seed"], "failure": cfg["failure.seed"], "kv": cfg["sim.seed"]})
            (out / f"report_{name}.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
            if fmt == "csv":
                with open(out / f"timeline_{name}.csv", "w", newline="") as fh:
                    write_csv(res.timeline, fh)
            if opts.retain_parity and opts.verify and strategy.scheme is not None and len(res.store):
                save_store(res.store, out / f"parity_{name}.gsrv")
            rows.append({**{k: body[k] for k in SUMMARY_COLUMNS[:-1]}, "report": f"report_{name}.json"})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / "config.yaml").write_text(cfg.dump())
    return rows


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.set or [])
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or "results")
    rows = run_cells(cfg, out, args.format or "json")
    for r in rows:
        print(f"{r['strategy']:<22} rate={r['failure_rate']:.2f} eitr={r['eitr']:.4f} "
              f"mttr={r['mttr']:.3f}s p99={r['p99']:.1f}s")
    print(f"wrote {len(rows)} report(s) to {out}")
    return EXIT_OK


# -- bench ---------------------------------------------------------------------

def bench(schemes, sizes, reps: int, seed: int = 0) -> list[dict]:
    """Wall-clock encode/reconstruct throughput in bytes of data per second."""
    if reps < 1:
        raise ConfigError("repetitions must be at least 1")
    if any(s < 1 for s in sizes):
        raise ConfigError("shard sizes must be positive")
    rng = np.random.default_rng(seed)
    rows = []
    for scheme in schemes:
        for size in sizes:
            data = [rng.integers(0, 256, size, dtype=np.uint8) for _ in range(scheme.n)]
            parity = encode(scheme, data)
            lost = list(range(scheme.k))
            have = {i: d for i, d in enumerate(data) if i not in lost}
            have.update({scheme.n + i: p for i, p in enumerate(parity)})
            for rep in range(reps):
                for op, fn in (("encode", lambda: encode(scheme, data)),
                               ("reconstruct", lambda: reconstruct(scheme, have, lost))):
                    t0 = time.perf_counter()
                    fn()
                    dt = time.perf_counter() - t0
                    rows.append({"scheme": str(scheme), "shard_bytes": size, "op": op, "rep": rep,
                                 "seconds": dt, "throughput": scheme.n * size / dt})
    return rows


def cmd_bench(args) -> int:
    schemes = [parse_scheme(s) for s in args.schemes.split(",")]
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError as exc:
        raise ConfigError(f"cannot parse sizes {args.sizes!r}") from exc
    rows = bench(schemes, sizes, args.reps, args.seed or 0)
    if (args.format or "csv") == "json":
        text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["scheme", "shard_bytes", "op", "rep", "seconds", "throughput"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- report --------------------------------------------------------------------

def cmd_report(args) -> int:
    if args.parity:
        store = load_store(args.parity)
        bad = [(p.request_id, p.chunk_id) for p in store if not p.verify()]
        print(f"{len(store)} parity entries, {store.payload_bytes} payload bytes")
        if bad:
            raise ParityIntegrityError(f"{len(bad)} entries fail their checksum, first {bad[0]}")
        return EXIT_OK
    src = Path(args.out or "results")
    reports = sorted(src.glob("report_*.json"))
    if not reports:
        raise ConfigError(f"no report_*.json files in {src}")
    rows = []
    for path in reports:
        body = json.loads(path.read_text())
        rows.append({**{k: body.get(k) for k in SUMMARY_COLUMNS[:-1]}, "report": path.name})
    if (args.format or "csv") == "json":
        sys.stdout.write(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    else:
        w = csv.DictWriter(sys.stdout, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# -- wiring --------------------------------------------------------------------

def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML file of dotted keys")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
    common.add_argument("--seed", type=_seed, help="seed for trace, failures and KV contents")
    common.add_argument("--out", metavar="DIR", help="output directory (file for bench)")
    common.add_argument("--format", choices=("json", "csv"),
                        help="simulate: csv adds timelines; bench, report: output format (default csv)")

    p = _Parser(prog="kvparity", description="Parity checkpointing for KV caches: codec tools and a serving simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("encode", parents=[common], help="write parity files for n shard files")
    e.add_argument("--scheme", required=True, help="xor:N, rdp:N or rs:N:K")
    e.add_argument("inputs", nargs="+")
    e.set_defaults(func=cmd_encode)

    r = sub.add_parser("reconstruct", parents=[common], help="rebuild lost shards from a manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--lost", required=True, help="comma-separated shard indices (parity is n..n+k-1)")
    r.add_argument("--shard", action="append", metavar="INDEX=PATH", help="read a shard from another path")
    r.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("simulate", parents=[common], help="run every strategy x failure-rate cell")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", parents=[common], help="measure codec throughput")
    b.add_argument("--schemes", default="xor:8,rdp:8,rs:8:2")
    b.add_argument("--sizes", default="4096,1048576")
    b.add_argument("--reps", type=int, default=5)
    b.set_defaults(func=cmd_bench)

    rp = sub.add_parser("report", parents=[common], help="tabulate reports in --out, or audit a parity file")
    rp.add_argument("--parity", metavar="FILE", help="saved parity store to verify")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, ShardError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UnrecoverableError, ParityIntegrityError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
