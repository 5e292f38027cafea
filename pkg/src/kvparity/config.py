"""Run configuration: a YAML mapping of flat dotted keys.

Every key has a default; a config file only lists what it changes::

    scheme.kind: rs
    scheme.k: 2
    cost.host_bw: 32.0e+9
    failure.rates: [0.05, 0.10, 0.15]
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .checkpoint import CheckpointConfig
from .codes import CodingScheme, Kind
from .cost import CostModel
from .errors import ConfigError
from .kv import ModelConfig
from .sim import SimOptions, Strategy, StrategyKind
from .trace import FailureInjectorConfig, TraceRanges, generate_trace

_COST = {f"cost.{f.name}": f.default for f in fields(CostModel)}

DEFAULTS: dict[str, Any] = {
    "scheme.kind": "rs",
    "scheme.k": 2,
    "model.layers": 80,
    "model.kv_heads": 8,
    "model.head_dim": 128,
    "model.tp_degree": 8,
    "model.bytes_per_elem": 2,
    "chunk_size": 2048,
    "checkpoint_decode": True,
    **_COST,
    "trace.seed": 0,
    "trace.count": 200,
    "trace.rate": 0.1,
    "trace.mix": 0.5,
    "trace.long_input": [16_384, 65_536],
    "trace.long_output": [128, 512],
    "trace.short_input": [128, 1_024],
    "trace.short_output": [2_048, 8_192],
    "failure.rates": [0.05, 0.10, 0.15],
    "failure.seed": 1,
    "failure.workers_per_failure": 1,
    "strategies": ["ghostserve", "replicate_host", "replicate_disk", "recompute_only"],
    "sim.max_batch": 16,
    "sim.store_capacity": 1 << 40,
    "sim.verify": False,
    "sim.retain_parity": False,
    "sim.seed": 0,
}


def parse_scheme(text: str, n: int | None = None) -> CodingScheme:
    """Parse ``xor:4``, ``rdp:6``, ``rs:8:2`` or the printed form ``rs(8,2)``."""
    t = text.strip().lower().replace("(", ":").replace(")", "").replace(",", ":")
    parts = [p for p in t.split(":") if p]
    if not parts:
        raise ConfigError("empty scheme")
    try:
        kind = Kind(parts[0])
        nums = [int(p) for p in parts[1:]]
    except ValueError as exc:
        raise ConfigError(f"cannot parse scheme {text!r}") from exc
    if not nums:
        if n is None:
            raise ConfigError(f"scheme {text!r} needs a data shard count")
        nums = [n]
    if kind is Kind.RS:
        if len(nums) != 2:
            raise ConfigError(f"rs scheme needs n and k, got {text!r}")
        return CodingScheme.rs(*nums)
    if kind is Kind.XOR:
        return CodingScheme.xor(nums[0]) if len(nums) == 1 or nums[1] == 1 else CodingScheme(kind, *nums)
    return CodingScheme.rdp(nums[0]) if len(nums) == 1 or nums[1] == 2 else CodingScheme(kind, *nums)


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            value = [value]
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None = None) -> "RunConfig":
        merged = dict(DEFAULTS)
        for key, value in (data or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value)
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Iterable[str] = ()) -> "RunConfig":
        data: dict = {}
        if path is not None:
            try:
                loaded = yaml.safe_load(Path(path).read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
            if loaded is not None and not isinstance(loaded, dict):
                raise ConfigError(f"config {path} must be a mapping of dotted keys")
            data.update(loaded or {})
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not KEY=VALUE")
            data[key.strip()] = yaml.safe_load(raw)
        return cls.from_mapping(data)

    def with_seed(self, seed: int) -> "RunConfig":
        """One seed for the trace, the failures and the ground-truth KV."""
        if seed < 0 or seed >= 1 << 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return RunConfig.from_mapping({**self.values, "trace.seed": seed,
                                       "failure.seed": seed, "sim.seed": seed})

    def dump(self) -> str:
        return yaml.safe_dump(dict(sorted(self.values.items())), sort_keys=True)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    # -- builders --------------------------------------------------------

    def validate(self) -> None:
        self.checkpoint_config()
        self.trace_ranges()
        self.sim_options()
        self.strategies()
        for r in self["failure.rates"]:
            self.injector(r)
        if self["trace.count"] < 1:
            raise ConfigError("trace.count must be at least 1")
        if not self["trace.rate"] > 0:
            raise ConfigError("trace.rate must be positive")
        if not 0.0 <= self["trace.mix"] <= 1.0:
            raise ConfigError("trace.mix must lie in [0, 1]")
        if self["failure.workers_per_failure"] > self["model.tp_degree"]:
            raise ConfigError("failure.workers_per_failure exceeds model.tp_degree")

    def model(self) -> ModelConfig:
        return ModelConfig(**{k: self[f"model.{k}"] for k in
                              ("layers", "kv_heads", "head_dim", "tp_degree", "bytes_per_elem")})

    def scheme(self) -> CodingScheme:
        n = self["model.tp_degree"]
        kind = self["scheme.kind"]
        try:
            Kind(kind)
        except ValueError as exc:
            raise ConfigError(f"scheme.kind must be one of xor, rdp, rs; got {kind!r}") from exc
        # xor and rdp fix their own parity count; scheme.k only applies to rs
        return parse_scheme(f"{kind}:{n}:{self['scheme.k']}" if kind == "rs" else f"{kind}:{n}")

    def cost(self) -> CostModel:
        return CostModel(**{k.split(".", 1)[1]: self[k] for k in _COST})

    def checkpoint_config(self) -> CheckpointConfig:
        return CheckpointConfig(self.scheme(), self["chunk_size"], self.model(), self.cost(),
                                self["checkpoint_decode"])

    def trace_ranges(self) -> TraceRanges:
        def pair(key):
            v = self[key]
            if len(v) != 2 or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
                raise ConfigError(f"{key} must be a [min, max] pair of integers")
            return tuple(v)
        return TraceRanges(*(pair(f"trace.{name}") for name in
                             ("long_input", "long_output", "short_input", "short_output")))

    def trace(self):
        return generate_trace(self["trace.seed"], self["trace.count"], self["trace.rate"],
                              self["trace.mix"], self.trace_ranges())

    def strategies(self) -> list[Strategy]:
        names = self["strategies"]
        if not names:
            raise ConfigError("strategies must name at least one strategy")
        out = []
        for name in names:
            try:
                kind = StrategyKind(name)
            except ValueError as exc:
                valid = ", ".join(k.value for k in StrategyKind)
                raise ConfigError(f"unknown strategy {name!r}; expected one of {valid}") from exc
            out.append(Strategy(kind, self.scheme() if kind is StrategyKind.GHOSTSERVE else None))
        return out

    def injector(self, rate: float) -> FailureInjectorConfig:
        if isinstance(rate, bool) or not isinstance(rate, (int, float)):
            raise ConfigError(f"failure rate {rate!r} is not a number")
        return FailureInjectorConfig(float(rate), self["failure.seed"], self["failure.workers_per_failure"])

    def sim_options(self) -> SimOptions:
        return SimOptions(self["sim.max_batch"], self["sim.store_capacity"], self["sim.verify"],
                          self["sim.retain_parity"], self["sim.seed"])


__all__ = ["DEFAULTS", "RunConfig", "parse_scheme"]
