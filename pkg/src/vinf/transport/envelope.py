"""Envelope wire format.

Layout (little-endian)::

    u32 magic | u32 msg_type | u64 tag | u32 src | u32 dst | u64 payload_len | payload

Data payloads are little-endian float32. Control payloads begin with a u32
control code; the rest is code-specific.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ProtocolError

MAGIC = 0x464E4956  # b"VINF" read as a little-endian u32
PROTOCOL_VERSION = 1
HEADER = struct.Struct("<IIQIIQ")
MAX_PAYLOAD = 1 << 34


class MsgType(enum.IntEnum):
    HALO_FWD = 1  # lower worker -> higher worker (becomes c_pre)
    HALO_BWD = 2  # higher worker -> lower worker (becomes c_post)
    GATHER = 3
    CONTROL = 4


class Control(enum.IntEnum):
    HELLO = 1      # worker -> coordinator: version, digest, mesh port
    ROSTER = 2     # coordinator -> worker: id + mesh addresses (JSON)
    PEER = 3       # mesh connect: dialling worker id
    ACK = 4        # rendezvous acceptance
    CLIP = 5       # coordinator -> worker: input clip floats
    RESULT = 6     # worker -> coordinator: output clip floats
    STATS = 7      # worker -> coordinator: metrics JSON
    ERROR = 8      # either direction: failure JSON
    REJECT = 9     # coordinator -> worker: handshake refused


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    tag: int
    src: int
    dst: int
    payload: bytes = b""
    magic: int = MAGIC

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def pack(self) -> bytes:
        return HEADER.pack(self.magic, int(self.msg_type), self.tag, self.src,
                           self.dst, len(self.payload)) + self.payload

    @classmethod
    def unpack(cls, buf: bytes) -> "Envelope":
        if len(buf) < HEADER.size:
            raise ProtocolError(f"envelope truncated: {len(buf)} bytes")
        magic, msg_type, tag, src, dst, n = HEADER.unpack_from(buf)
        check_header(magic, msg_type, n)
        payload = buf[HEADER.size:]
        if len(payload) != n:
            raise ProtocolError(f"payload_len {n} but {len(payload)} bytes follow")
        return cls(MsgType(msg_type), tag, src, dst, bytes(payload), magic)

    # -- payload helpers ---------------------------------------------------

    @classmethod
    def data(cls, msg_type: MsgType, tag: int, src: int, dst: int,
             values: np.ndarray) -> "Envelope":
        return cls(msg_type, tag, src, dst, floats_to_bytes(values))

    def floats(self) -> np.ndarray:
        return bytes_to_floats(self.payload)

    @classmethod
    def control(cls, code: Control, src: int, dst: int, body: bytes = b"",
                tag: int = 0) -> "Envelope":
        return cls(MsgType.CONTROL, tag, src, dst, struct.pack("<I", int(code)) + body)

    @property
    def control_code(self) -> Control:
        if self.msg_type != MsgType.CONTROL or len(self.payload) < 4:
            raise ProtocolError(f"not a control message: {self.msg_type!r}")
        return Control(struct.unpack_from("<I", self.payload)[0])

    @property
    def control_body(self) -> bytes:
        return self.payload[4:]

    def control_json(self):
        return json.loads(self.control_body.decode("utf-8"))


def check_header(magic: int, msg_type: int, n: int) -> None:
    if magic != MAGIC:
        raise ProtocolError(f"bad envelope magic {magic:#x}")
    if msg_type not in MsgType._value2member_map_:
        raise ProtocolError(f"unknown msg_type {msg_type}")
    if n > MAX_PAYLOAD:
        raise ProtocolError(f"payload_len {n} too large")


def floats_to_bytes(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def bytes_to_floats(buf: bytes) -> np.ndarray:
    if len(buf) % 4:
        raise ProtocolError(f"float payload of {len(buf)} bytes is not a multiple of 4")
    return np.frombuffer(buf, dtype="<f4").astype(np.float32)


def make_tag(op_seq: int, round_: int = 0, digest: int = 0) -> int:
    """``op_seq`` in the high 32 bits keeps tags increasing per stream.

    Bits 24..31 hold the round within a collective, bits 0..23 a digest of the
    layer spec so workers running different layers fail on the first message.
    """
    if not 0 <= round_ < 256:
        raise ValueError(f"round {round_} out of range")
    return ((op_seq & 0xFFFFFFFF) << 32) | (round_ << 24) | (digest & 0xFFFFFF)


def hello_body(digest: int, mesh_port: int) -> bytes:
    return struct.pack("<IQI", PROTOCOL_VERSION, digest, mesh_port)


def parse_hello(body: bytes) -> tuple[int, int, int]:
    if len(body) != 16:
        raise ProtocolError(f"hello body must be 16 bytes, got {len(body)}")
    return struct.unpack("<IQI", body)
