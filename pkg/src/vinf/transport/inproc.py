"""Thread-backed transport: one rendezvous slot per ordered worker pair."""

from __future__ import annotations

import threading

from ..errors import TransportError
from ..metrics import WorkerStats
from .base import ChannelConstraint, Endpoint
from .envelope import Envelope


class _Channel:
    def __init__(self, abort: threading.Event):
        self.cv = threading.Condition()
        self.slot: Envelope | None = None
        self.abort = abort


class InProcFabric:
    """Creates the N endpoints of an in-process world.

    ``timeout`` bounds every blocking wait so a broken schedule surfaces as a
    :class:`TransportError` instead of a hang; :meth:`abort` wakes everyone.
    """

    def __init__(self, n: int, timeout: float = 60.0, validating: bool = False):
        self.n = n
        self.timeout = timeout
        self._abort = threading.Event()
        self.constraint = ChannelConstraint(n) if validating else None
        self._channels = {(s, d): _Channel(self._abort)
                          for s in range(n) for d in range(n) if s != d}
        self.endpoints = [InProcEndpoint(self, r, validating) for r in range(n)]

    def abort(self) -> None:
        self._abort.set()
        for ch in self._channels.values():
            with ch.cv:
                ch.cv.notify_all()

    def channel(self, src: int, dst: int) -> _Channel:
        return self._channels[(src, dst)]


class InProcEndpoint(Endpoint):
    def __init__(self, fabric: InProcFabric, rank: int, validating: bool):
        super().__init__(rank, fabric.n, WorkerStats(worker=rank), fabric.constraint,
                         record_trace=validating)
        self.fabric = fabric

    def _wait(self, ch: _Channel, pred, what: str) -> None:
        ok = ch.cv.wait_for(lambda: pred() or ch.abort.is_set(), self.fabric.timeout)
        if ch.abort.is_set():
            raise TransportError(f"aborted while {what}", self.rank)
        if not ok:
            raise TransportError(f"timed out after {self.fabric.timeout}s while {what}", self.rank)

    def _post_send(self, dst: int, env: Envelope) -> None:
        ch = self.fabric.channel(self.rank, dst)
        with ch.cv:
            self._wait(ch, lambda: ch.slot is None, f"sending to {dst}")
            ch.slot = env
            ch.cv.notify_all()
            # rendezvous: return only once the receiver has taken it
            self._wait(ch, lambda: ch.slot is not env, f"waiting for {dst} to accept")

    def _post_recv(self, src: int) -> Envelope:
        ch = self.fabric.channel(src, self.rank)
        with ch.cv:
            self._wait(ch, lambda: ch.slot is not None, f"receiving from {src}")
            env = ch.slot
            ch.slot = None
            ch.cv.notify_all()
        return env
