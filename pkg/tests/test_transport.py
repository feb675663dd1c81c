import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spmd import run_spmd
from vinf.errors import ProtocolError, TransportError
from vinf.transport.envelope import (
    HEADER,
    Control,
    Envelope,
    MsgType,
    make_tag,
    parse_hello,
    hello_body,
)
from vinf.transport.schedule import (
    Completed,
    Deadlock,
    Op,
    layer_program,
    literal_programs,
    validate_schedule,
)
from vinf.transport.tcp import Coordinator, WorkerLink

U32 = st.integers(0, 2**32 - 1)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(list(MsgType)), st.integers(0, 2**64 - 1), U32, U32,
       st.lists(st.floats(width=32, allow_nan=False), max_size=20))
def test_envelope_round_trip(msg_type, tag, src, dst, values):
    env = Envelope.data(msg_type, tag, src, dst, np.array(values, np.float32))
    raw = env.pack()
    assert len(raw) == HEADER.size + 4 * len(values)
    back = Envelope.unpack(raw)
    assert back == env
    assert back.floats().tolist() == np.array(values, np.float32).tolist()


def test_envelope_rejects_corruption():
    raw = bytearray(Envelope.data(MsgType.GATHER, 1, 0, 1, np.ones(2)).pack())
    with pytest.raises(ProtocolError):
        Envelope.unpack(bytes(raw[:-1]))
    raw[0] ^= 0xFF
    with pytest.raises(ProtocolError, match="magic"):
        Envelope.unpack(bytes(raw))


def test_control_and_hello():
    env = Envelope.control(Control.ROSTER, 9, 1, b'{"rank": 1}')
    assert env.control_code == Control.ROSTER and env.control_json() == {"rank": 1}
    assert parse_hello(hello_body(0xDEADBEEF, 4242)) == (1, 0xDEADBEEF, 4242)


def test_tag_layout():
    assert make_tag(3, 2, 0x1ABCDEF) == (3 << 32) | (2 << 24) | 0xABCDEF
    with pytest.raises(ValueError):
        make_tag(0, 256)


def test_self_send_rejected():
    def body(ep):
        with pytest.raises(TransportError, match="invalid destination"):
            ep.send(ep.rank, Envelope.data(MsgType.GATHER, 0, ep.rank, ep.rank, np.ones(1)))
        return True

    assert run_spmd(2, body)[0] == [True, True]


def test_tag_mismatch_names_both_tags():
    def body(ep):
        if ep.rank == 0:
            ep.send(1, Envelope.data(MsgType.HALO_FWD, 7, 0, 1, np.ones(1)))
        else:
            ep.recv(0, MsgType.HALO_FWD, 8)

    with pytest.raises(ProtocolError, match="0x0000000000000008.*0x0000000000000007"):
        run_spmd(2, body)


def test_pairwise_exchange_two_workers():
    def body(ep):
        peer = 1 - ep.rank
        got = ep.exchange(layer_program(ep.rank, 2, with_global=False),
                          {peer: np.full(3, ep.rank, np.float32)})
        return got[peer].tolist()

    res, fabric = run_spmd(2, body)
    assert res == [[1.0] * 3, [0.0] * 3]
    assert not fabric.constraint.violations
    assert validate_schedule(2, [ep.trace for ep in fabric.endpoints]).ok


def test_all_gather_single_worker():
    (parts,), fabric = run_spmd(1, lambda ep: ep.all_gather(np.array([5.0], np.float32)))
    assert [p.tolist() for p in parts] == [[5.0]]
    assert fabric.endpoints[0].stats.sent_messages == {}


def test_all_gather_ids():
    res, _ = run_spmd(4, lambda ep: ep.all_gather(np.array([ep.rank], np.float32)))
    for parts in res:
        assert np.concatenate(parts).tolist() == [0.0, 1.0, 2.0, 3.0]


def test_all_gather_uneven_payloads():
    res, _ = run_spmd(3, lambda ep: ep.all_gather(np.arange(ep.rank, dtype=np.float32)))
    for parts in res:
        assert [len(p) for p in parts] == [0, 1, 2]


def test_ring_transfer_count():
    n = 8
    _, fabric = run_spmd(n, lambda ep: ep.all_gather(np.ones(2, np.float32)))
    total = sum(sum(ep.stats.sent_messages.values()) for ep in fabric.endpoints)
    assert total == n * (n - 1)
    assert not fabric.constraint.violations


def test_validator_verdicts():
    assert validate_schedule(1) == Completed(0, 0)
    assert validate_schedule(2).ok
    verdict = validate_schedule(2, literal_programs(2))
    assert isinstance(verdict, Deadlock)
    assert set(verdict.cycle) == {(0, 1), (1, 0)}
    for n in range(1, 17):
        assert validate_schedule(n).ok, n


def test_validator_flags_bad_peer_and_type():
    progs = [[Op("send", 0, "x", MsgType.GATHER)], []]
    assert not validate_schedule(2, progs).ok
    progs = [[Op("send", 1, "x", MsgType.HALO_FWD)], [Op("recv", 0, "x", MsgType.HALO_BWD)]]
    assert validate_schedule(2, progs).violations


def test_inproc_timeout_surfaces():
    def body(ep):
        if ep.rank == 0:
            ep.recv(1, MsgType.GATHER, 0)

    with pytest.raises(TransportError, match="timed out"):
        run_spmd(2, body, timeout=0.2)


def test_tcp_handshake_rejects_digest_mismatch():
    coord = Coordinator("127.0.0.1:0", 1, digest=1, timeout=5)
    errors = []

    def serve():
        try:
            coord.accept_workers()
        except ProtocolError as exc:
            errors.append(exc)

    th = threading.Thread(target=serve)
    th.start()
    with pytest.raises(ProtocolError, match="rejected"):
        WorkerLink(coord.address, digest=2, timeout=5)
    th.join()
    coord.close()
    assert errors and "digest" in str(errors[0])


def test_tcp_mesh_all_gather():
    n = 3
    coord = Coordinator("127.0.0.1:0", n, digest=42, timeout=10)
    results = {}

    def worker():
        link = WorkerLink(coord.address, 42, timeout=10)
        try:
            parts = link.endpoint.all_gather(np.array([link.rank], np.float32))
            results[link.rank] = np.concatenate(parts).tolist()
        finally:
            link.close()

    threads = [threading.Thread(target=worker) for _ in range(n)]
    for th in threads:
        th.start()
    coord.accept_workers()
    for th in threads:
        th.join()
    coord.close()
    assert results == {r: [0.0, 1.0, 2.0] for r in range(n)}
