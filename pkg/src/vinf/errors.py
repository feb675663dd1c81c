"""Exception hierarchy shared by every layer of the runtime."""


class VinfError(Exception):
    """Base class for all runtime errors."""


class ShapeError(VinfError):
    pass


class FrameRangeError(VinfError):
    pass


class ConfigError(VinfError):
    pass


class PartitionError(ConfigError):
    pass


class TransportError(VinfError):
    """A peer disconnected, timed out, or aborted.

    ``worker`` and ``stage`` locate the failure when known.
    """

    def __init__(self, message: str, worker: int | None = None, stage: str | None = None):
        self.worker = worker
        self.stage = stage
        where = []
        if worker is not None:
            where.append(f"worker {worker}")
        if stage is not None:
            where.append(f"stage {stage}")
        super().__init__(f"[{', '.join(where)}] {message}" if where else message)


class ProtocolError(TransportError):
    """Message stream violated the SPMD contract (tag, type or size mismatch)."""
