"""TCP backend: a coordinator rendezvous plus a full worker mesh.

Bootstrap: each worker opens a mesh listener, dials the coordinator and sends
HELLO (protocol version, run-config digest, mesh port). Once N workers have
joined, the coordinator assigns ranks in connection order and sends each a
ROSTER. Worker ``i`` then dials every ``j > i`` and accepts every ``j < i``.

Point-to-point sends are rendezvous: the receiver answers every data envelope
with an ACK and the sender blocks for it.
"""

from __future__ import annotations

import json
import socket

from ..errors import ProtocolError, TransportError
from ..metrics import WorkerStats
from .base import Endpoint
from .envelope import (
    HEADER,
    PROTOCOL_VERSION,
    Control,
    Envelope,
    MsgType,
    check_header,
    hello_body,
    parse_hello,
)

COORDINATOR = 0xFFFFFFFF


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout as exc:
            raise TransportError("socket read timed out") from exc
        except OSError as exc:
            raise TransportError(f"socket error: {exc}") from exc
        if not chunk:
            raise TransportError("peer disconnected")
        buf += chunk
    return bytes(buf)


def read_envelope(sock: socket.socket) -> Envelope:
    head = _read_exact(sock, HEADER.size)
    magic, msg_type, tag, src, dst, n = HEADER.unpack(head)
    check_header(magic, msg_type, n)
    payload = _read_exact(sock, n) if n else b""
    return Envelope(MsgType(msg_type), tag, src, dst, payload, magic)


def write_envelope(sock: socket.socket, env: Envelope) -> None:
    try:
        sock.sendall(env.pack())
    except OSError as exc:
        raise TransportError(f"socket write failed: {exc}") from exc


class TcpEndpoint(Endpoint):
    def __init__(self, rank: int, size: int, peers: dict[int, socket.socket],
                 stats: WorkerStats | None = None, record_trace: bool = False):
        super().__init__(rank, size, stats or WorkerStats(worker=rank), None, record_trace)
        self.peers = peers

    def _post_send(self, dst: int, env: Envelope) -> None:
        sock = self.peers[dst]
        write_envelope(sock, env)
        try:
            reply = read_envelope(sock)
        except TransportError as exc:
            raise TransportError(f"no acceptance from {dst}: {exc}", self.rank) from exc
        if reply.msg_type != MsgType.CONTROL or reply.control_code != Control.ACK:
            # both ends of the pair were sending: a rendezvous deadlock
            raise ProtocolError(f"expected ACK from {dst}, got {reply.msg_type.name}", self.rank)
        if reply.tag != env.tag:
            raise ProtocolError(f"ACK tag {reply.tag:#x} != {env.tag:#x}", self.rank)

    def _post_recv(self, src: int) -> Envelope:
        sock = self.peers[src]
        try:
            env = read_envelope(sock)
        except TransportError as exc:
            raise TransportError(f"receiving from {src}: {exc}", self.rank) from exc
        write_envelope(sock, Envelope.control(Control.ACK, self.rank, src, tag=env.tag))
        return env

    def close(self) -> None:
        for s in self.peers.values():
            s.close()


class WorkerLink:
    """A worker's connection to the coordinator plus its mesh endpoint."""

    def __init__(self, address: str, digest: int, timeout: float = 120.0,
                 record_trace: bool = False):
        host, port = parse_address(address)
        self.coord = socket.create_connection((host, port), timeout=timeout)
        local_ip = self.coord.getsockname()[0]
        listener = socket.create_server((local_ip, 0))
        listener.settimeout(timeout)
        write_envelope(self.coord, Envelope.control(
            Control.HELLO, COORDINATOR, COORDINATOR,
            hello_body(digest, listener.getsockname()[1]), tag=digest))
        reply = read_envelope(self.coord)
        if reply.control_code == Control.REJECT:
            raise ProtocolError(f"coordinator rejected handshake: {reply.control_body.decode()}")
        if reply.control_code != Control.ROSTER:
            raise ProtocolError(f"expected ROSTER, got {reply.control_code.name}")
        roster = reply.control_json()
        self.rank, self.size = roster["rank"], roster["size"]
        peers: dict[int, socket.socket] = {}
        for j in range(self.rank + 1, self.size):
            s = socket.create_connection(tuple(roster["peers"][j]), timeout=timeout)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            write_envelope(s, Envelope.control(Control.PEER, self.rank, j))
            peers[j] = s
        for _ in range(self.rank):
            s, _ = listener.accept()
            s.settimeout(timeout)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = read_envelope(s)
            if hello.control_code != Control.PEER or hello.dst != self.rank:
                raise ProtocolError("bad mesh greeting", self.rank)
            peers[hello.src] = s
        listener.close()
        self.endpoint = TcpEndpoint(self.rank, self.size, peers, record_trace=record_trace)

    def send_control(self, code: Control, body: bytes = b"") -> None:
        write_envelope(self.coord, Envelope.control(code, self.rank, COORDINATOR, body))

    def recv_control(self, code: Control) -> Envelope:
        env = read_envelope(self.coord)
        if env.control_code != code:
            raise ProtocolError(f"expected {code.name}, got {env.control_code.name}", self.rank)
        return env

    def close(self) -> None:
        self.endpoint.close()
        self.coord.close()


class Coordinator:
    """Accepts N workers, checks their run digest and hands out ranks."""

    def __init__(self, address: str, n: int, digest: int, timeout: float = 120.0):
        self.n = n
        self.digest = digest
        self.timeout = timeout
        self.listener = socket.create_server(parse_address(address))
        self.listener.settimeout(timeout)
        self.workers: list[socket.socket] = []

    @property
    def address(self) -> str:
        host, port = self.listener.getsockname()[:2]
        return f"{host}:{port}"

    def accept_workers(self) -> None:
        mesh: list[tuple[str, int]] = []
        while len(self.workers) < self.n:
            try:
                sock, (host, _) = self.listener.accept()
            except socket.timeout as exc:
                raise TransportError(
                    f"only {len(self.workers)} of {self.n} workers joined", stage="handshake") from exc
            sock.settimeout(self.timeout)
            hello = read_envelope(sock)
            version, digest, port = parse_hello(hello.control_body)
            if version != PROTOCOL_VERSION or digest != self.digest:
                reason = (f"version {version} digest {digest:#018x}; expected "
                          f"version {PROTOCOL_VERSION} digest {self.digest:#018x}")
                write_envelope(sock, Envelope.control(Control.REJECT, COORDINATOR, COORDINATOR,
                                                      reason.encode()))
                sock.close()
                raise ProtocolError(f"worker handshake rejected: {reason}", stage="handshake")
            self.workers.append(sock)
            mesh.append((host, port))
        for rank, sock in enumerate(self.workers):
            body = json.dumps({"rank": rank, "size": self.n, "peers": mesh}).encode()
            write_envelope(sock, Envelope.control(Control.ROSTER, COORDINATOR, rank, body))

    def send(self, rank: int, code: Control, body: bytes = b"") -> None:
        write_envelope(self.workers[rank], Envelope.control(code, COORDINATOR, rank, body))

    def recv(self, rank: int) -> Envelope:
        try:
            return read_envelope(self.workers[rank])
        except TransportError as exc:
            raise TransportError(str(exc), worker=rank) from exc

    def close(self) -> None:
        for s in self.workers:
            s.close()
        self.listener.close()
