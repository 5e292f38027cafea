class ConfigError(ValueError):
    """Invalid scheme, model or run configuration."""


class ShardError(ValueError):
    """Malformed coding input: wrong shard count, unequal lengths, missing survivors."""


class UnrecoverableError(RuntimeError):
    """More erasures than the scheme tolerates."""


class ParityIntegrityError(RuntimeError):
    """Stored parity is missing or fails its checksum."""


class MissingParityError(ParityIntegrityError, KeyError):
    pass


class BackPressure(RuntimeError):
    """The host parity store has no room for another entry."""


class SimulationError(RuntimeError):
    pass
