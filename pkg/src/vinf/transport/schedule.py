"""Per-layer communication programs and a rendezvous schedule simulator.

A program is the ordered list of blocking point-to-point operations one
worker issues for one temporal layer. The runtime executes these exact lists,
so validating them validates what actually runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

from .envelope import MsgType


@dataclass(frozen=True)
class Op:
    kind: Literal["send", "recv"]
    peer: int
    stage: str
    msg_type: MsgType
    round: int = 0


def ring_all_gather_program(i: int, n: int, stage: str = "T1") -> list[Op]:
    """N-1 ring rounds; even ranks send first, odd ranks receive first."""
    ops: list[Op] = []
    if n == 1:
        return ops
    nxt, prv = (i + 1) % n, (i - 1) % n
    for r in range(n - 1):
        send = Op("send", nxt, stage, MsgType.GATHER, r)
        recv = Op("recv", prv, stage, MsgType.GATHER, r)
        ops += [send, recv] if i % 2 == 0 else [recv, send]
    return ops


def pair_exchange_program(i: int, n: int) -> list[Op]:
    """T2 pairs (i, i+1) with i even, T3 pairs with i odd.

    In each pair the lower rank sends then receives; the higher rank
    receives then sends.
    """
    ops: list[Op] = []
    for stage, parity in (("T2", 0), ("T3", 1)):
        if i % 2 == parity and i + 1 < n:
            ops += [Op("send", i + 1, stage, MsgType.HALO_FWD),
                    Op("recv", i + 1, stage, MsgType.HALO_BWD)]
        elif i % 2 != parity and i - 1 >= 0:
            ops += [Op("recv", i - 1, stage, MsgType.HALO_FWD),
                    Op("send", i - 1, stage, MsgType.HALO_BWD)]
    return ops


def layer_program(i: int, n: int, with_global: bool = True) -> list[Op]:
    head = ring_all_gather_program(i, n) if with_global else []
    return head + pair_exchange_program(i, n)


def literal_exchange_program(i: int, n: int) -> list[Op]:
    """Naive pair order in which every worker opens with a receive.

    With 1-based labels, odd ``i + 1`` receives from its successor first and
    even ``i + 1`` from its predecessor first. Both branches start with a
    receive, so under rendezvous the first pair waits on itself forever.
    """
    nxt = [Op("recv", i + 1, "T2", MsgType.HALO_BWD), Op("send", i + 1, "T2", MsgType.HALO_FWD)]
    prv = [Op("recv", i - 1, "T3", MsgType.HALO_FWD), Op("send", i - 1, "T3", MsgType.HALO_BWD)]
    if i + 1 >= n:
        nxt = []
    if i == 0:
        prv = []
    return nxt + prv if (i + 1) % 2 == 1 else prv + nxt


def literal_layer_program(i: int, n: int) -> list[Op]:
    return ring_all_gather_program(i, n) + literal_exchange_program(i, n)


@dataclass(frozen=True)
class Completed:
    steps: int
    transfers: int
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class Deadlock:
    cycle: tuple[tuple[int, int], ...]
    blocked: dict = field(default_factory=dict)
    steps: int = 0

    ok = False


def shipped_programs(n: int) -> list[list[Op]]:
    return [layer_program(i, n) for i in range(n)]


def literal_programs(n: int) -> list[list[Op]]:
    return [literal_layer_program(i, n) for i in range(n)]


def validate_schedule(n: int, programs: Sequence[Sequence[Op]] | None = None):
    """Simulate ``programs`` under strict rendezvous and channel exclusivity.

    Each step matches every worker whose head op is ``send(j)`` with a worker
    ``j`` whose head op is ``recv(i)``; matched pairs complete together. A
    worker has one posted op at a time, so it joins at most one transfer per
    step. Returns :class:`Completed` or :class:`Deadlock` with the wait-for
    cycle as ``(waiter, waited_on)`` edges.
    """
    if n < 1:
        raise ValueError("need at least one worker")
    progs = [list(p) for p in (programs if programs is not None else shipped_programs(n))]
    if len(progs) != n:
        raise ValueError(f"expected {n} programs, got {len(progs)}")
    violations = []
    for i, prog in enumerate(progs):
        for op in prog:
            if op.peer == i or not 0 <= op.peer < n:
                violations.append(f"worker {i}: invalid peer {op.peer} in {op}")
    if violations:
        return Completed(0, 0, tuple(violations))

    pc = [0] * n
    steps = transfers = 0
    while True:
        heads = [progs[i][pc[i]] if pc[i] < len(progs[i]) else None for i in range(n)]
        if all(h is None for h in heads):
            return Completed(steps, transfers)
        matched = []
        busy: set[int] = set()
        for i, op in enumerate(heads):
            if op is None or op.kind != "send":
                continue
            j = op.peer
            peer_op = heads[j]
            if peer_op is not None and peer_op.kind == "recv" and peer_op.peer == i:
                if peer_op.msg_type != op.msg_type:
                    violations.append(f"{i}->{j}: {op.msg_type.name} vs {peer_op.msg_type.name}")
                if i in busy or j in busy:
                    violations.append(f"step {steps}: worker in two transfers")
                busy |= {i, j}
                matched.append((i, j))
        if not matched:
            waits = {i: op.peer for i, op in enumerate(heads) if op is not None}
            return Deadlock(_find_cycle(waits), waits, steps)
        for i, j in matched:
            pc[i] += 1
            pc[j] += 1
        steps += 1
        transfers += len(matched)
        if violations:
            return Completed(steps, transfers, tuple(violations))


def _find_cycle(waits: dict[int, int]) -> tuple[tuple[int, int], ...]:
    for start in sorted(waits):
        seen: list[int] = []
        node = start
        while node in waits and node not in seen:
            seen.append(node)
            node = waits[node]
        if node in seen:
            cyc = seen[seen.index(node):]
            return tuple((a, waits[a]) for a in cyc)
    return ()
