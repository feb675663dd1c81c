from __future__ import annotations

import threading
from typing import Sequence

import numpy as np

from ..errors import ProtocolError, TransportError
from ..metrics import WorkerStats
from .envelope import Envelope, MsgType, make_tag
from .schedule import Op, ring_all_gather_program


class ChannelConstraint:
    """Shared busy flags enforcing one point-to-point transfer per worker."""

    def __init__(self, n: int):
        self._lock = threading.Lock()
        self._busy: list[Op | None] = [None] * n
        self.violations: list[str] = []

    def begin(self, worker: int, op: Op) -> None:
        with self._lock:
            if self._busy[worker] is not None:
                self.violations.append(
                    f"worker {worker} posted {op} while {self._busy[worker]} in flight")
            self._busy[worker] = op

    def end(self, worker: int) -> None:
        with self._lock:
            self._busy[worker] = None


class Endpoint:
    """One worker's view of the transport.

    Subclasses supply blocking rendezvous ``_post_send`` / ``_post_recv``.
    Collectives here are staged point-to-point calls driven by the programs in
    :mod:`vinf.transport.schedule`.
    """

    def __init__(self, rank: int, size: int, stats: WorkerStats | None = None,
                 constraint: ChannelConstraint | None = None, record_trace: bool = False):
        self.rank = rank
        self.size = size
        self.stats = stats if stats is not None else WorkerStats(worker=rank)
        self.constraint = constraint
        self.trace: list[Op] | None = [] if record_trace else None
        self._op_seq = 0

    def next_op_seq(self) -> int:
        self._op_seq += 1
        return self._op_seq

    # -- backend hooks ---------------------------------------------------

    def _post_send(self, dst: int, env: Envelope) -> None:
        raise NotImplementedError

    def _post_recv(self, src: int) -> Envelope:
        raise NotImplementedError

    def close(self) -> None:
        pass

    # -- point to point --------------------------------------------------

    def _check_peer(self, peer: int) -> None:
        if peer == self.rank:
            raise TransportError(f"invalid destination: self ({peer})", self.rank)
        if not 0 <= peer < self.size:
            raise TransportError(f"invalid peer {peer} for world size {self.size}", self.rank)

    def send(self, dst: int, env: Envelope, op: Op | None = None) -> None:
        self._check_peer(dst)
        op = op or Op("send", dst, "p2p", env.msg_type)
        if self.constraint is not None:
            self.constraint.begin(self.rank, op)
        try:
            self._post_send(dst, env)
        finally:
            if self.constraint is not None:
                self.constraint.end(self.rank)
        if self.trace is not None:
            self.trace.append(op)
        self.stats.count_sent(op.stage, env.payload_len)

    def recv(self, src: int, msg_type: MsgType, tag: int, op: Op | None = None) -> Envelope:
        self._check_peer(src)
        op = op or Op("recv", src, "p2p", msg_type)
        if self.constraint is not None:
            self.constraint.begin(self.rank, op)
        try:
            env = self._post_recv(src)
        finally:
            if self.constraint is not None:
                self.constraint.end(self.rank)
        if env.msg_type != msg_type or env.tag != tag:
            raise ProtocolError(
                f"from {src}: expected {msg_type.name} tag {tag:#018x}, "
                f"got {env.msg_type.name} tag {env.tag:#018x}", self.rank, op.stage)
        if env.src != src or env.dst != self.rank:
            raise ProtocolError(f"misrouted envelope {env.src}->{env.dst}", self.rank, op.stage)
        if self.trace is not None:
            self.trace.append(op)
        self.stats.count_recv(op.stage, env.payload_len)
        return env

    # -- collectives -----------------------------------------------------

    def all_gather(self, payload: np.ndarray, digest: int = 0,
                   stage: str = "T1") -> list[np.ndarray]:
        """Ring all-gather of flat float32 payloads; sizes may differ per rank."""
        n, i = self.size, self.rank
        parts: list[np.ndarray | None] = [None] * n
        parts[i] = np.asarray(payload, dtype=np.float32).ravel()
        seq = self.next_op_seq()
        for op in ring_all_gather_program(i, n, stage):
            tag = make_tag(seq, op.round, digest)
            try:
                if op.kind == "send":
                    origin = (i - op.round) % n
                    self.send(op.peer, Envelope.data(MsgType.GATHER, tag, i, op.peer,
                                                     parts[origin]), op)
                else:
                    origin = (i - 1 - op.round) % n
                    parts[origin] = self.recv(op.peer, MsgType.GATHER, tag, op).floats()
            except TransportError as exc:
                if exc.stage is None:
                    exc.stage = f"{stage} round {op.round}"
                raise
        return parts  # type: ignore[return-value]

    def exchange(self, program: Sequence[Op], outgoing: dict[int, np.ndarray],
                 digest: int = 0) -> dict[int, np.ndarray]:
        """Run a pairwise program; ``outgoing[peer]`` is what to send to ``peer``."""
        seq = self.next_op_seq()
        tag = make_tag(seq, 0, digest)
        incoming: dict[int, np.ndarray] = {}
        for op in program:
            if op.kind == "send":
                self.send(op.peer, Envelope.data(op.msg_type, tag, self.rank, op.peer,
                                                 outgoing[op.peer]), op)
            else:
                incoming[op.peer] = self.recv(op.peer, op.msg_type, tag, op).floats()
        return incoming
