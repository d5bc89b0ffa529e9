"""MQTT wire codec plus the bridge-mesh extensions.

Implements bit-exact encoding/decoding for the packet subset used by the
mesh: CONNECT/CONNACK, SUBSCRIBE/SUBACK, PUBLISH and the QoS 1/2
acknowledgement family, PINGREQ/PINGRESP and DISCONNECT.

Format conventions:
- Fixed header: packet type in the high nibble, flags in the low nibble,
  then a Remaining Length varint of at most 4 bytes.
- Strings are UTF-8 with a 2-byte big-endian length prefix.
- All multi-byte integers are big-endian.

Two extensions ride on standard framing:
- A CONNECT whose Protocol Version byte has the MSB set marks the
  connection as broker-to-broker (a bridge).  Masking the MSB off yields
  the base protocol version; 0x04 (3.1.1) and 0x05 (5.0) are accepted.
- A PINGREQ may carry a 36-byte control payload (``BpduPayload``) holding
  the sender's root claim, root capability, cumulative path cost and a
  topology-change flag.  Remaining Length is 0 (plain keep-alive) or 36,
  nothing else.

Everything here is a pure function over byte sequences; no shared state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

MAX_REMAINING_LENGTH = 268_435_455  # 4-byte varint ceiling

BROKER_FLAG = 0x80
BPDU_LENGTH = 36

SUPPORTED_BASE_VERSIONS = (0x04, 0x05)

# CONNACK return codes (3.1.1 numbering)
CONNACK_ACCEPTED = 0x00
CONNACK_REFUSED_VERSION = 0x01
CONNACK_REFUSED_IDENTIFIER = 0x02


class CodecError(Exception):
    """Base class for wire-format failures."""


class MalformedLength(CodecError):
    """Remaining Length varint is longer than 4 bytes or unterminated."""


class UnknownPacketType(CodecError):
    """Packet type nibble is not one we speak."""


class TruncatedPacket(CodecError):
    """Buffer ends before the declared packet does."""


class FramingError(CodecError):
    """Structurally invalid packet (bad flags, bad lengths, trailing bytes)."""


class EncodeError(CodecError):
    """Packet cannot be represented on the wire (oversize, bad field)."""


@dataclass(frozen=True)
class BrokerId:
    """Identity of a broker: advertised IPv4 address and listener port.

    The total order (address as a 32-bit unsigned integer, then port) is
    the universal tie-break for root election and role assignment.
    """

    ip: str
    port: int

    def key(self) -> tuple[int, int]:
        return (ip_to_u32(self.ip), self.port)

    def pack(self) -> bytes:
        return struct.pack(">IH", ip_to_u32(self.ip), self.port)

    @classmethod
    def unpack(cls, data: bytes) -> "BrokerId":
        if len(data) != 6:
            raise FramingError(f"broker id must be 6 bytes, got {len(data)}")
        addr, port = struct.unpack(">IH", data)
        return cls(u32_to_ip(addr), port)

    def __lt__(self, other: "BrokerId") -> bool:
        return self.key() < other.key()

    def __str__(self) -> str:
        return f"{self.ip}:{self.port}"


def ip_to_u32(ip: str) -> int:
    parts = ip.split(".")
    if len(parts) != 4:
        raise EncodeError(f"not a dotted-quad IPv4 address: {ip!r}")
    value = 0
    for part in parts:
        octet = int(part)
        if not 0 <= octet <= 255:
            raise EncodeError(f"bad IPv4 octet in {ip!r}")
        value = (value << 8) | octet
    return value


def u32_to_ip(value: int) -> str:
    return ".".join(str((value >> shift) & 0xFF) for shift in (24, 16, 8, 0))


@dataclass(frozen=True)
class BpduPayload:
    """Control record piggybacked on PINGREQ.

    Layout (36 bytes, big-endian):
        root id (6) | sender id (6) | root capability (8) |
        root path cost in microseconds (8) | tc flag (1) | reserved (7)

    ``root_capability`` is the capability of the advertised root as
    believed by the sender; when the sender claims itself root
    (``sender == root``) it is the sender's own capability, which is how
    neighbours learn each other's resources.
    """

    root: BrokerId
    sender: BrokerId
    root_capability: int
    root_path_cost_us: int
    tc: bool = False

    def pack(self) -> bytes:
        if not 0 <= self.root_capability < 1 << 64:
            raise EncodeError("root capability out of u64 range")
        if not 0 <= self.root_path_cost_us < 1 << 64:
            raise EncodeError("root path cost out of u64 range")
        return (
            self.root.pack()
            + self.sender.pack()
            + struct.pack(">QQB", self.root_capability, self.root_path_cost_us, 1 if self.tc else 0)
            + b"\x00" * 7
        )

    @classmethod
    def unpack(cls, data: bytes) -> "BpduPayload":
        if len(data) != BPDU_LENGTH:
            raise FramingError(f"control payload must be {BPDU_LENGTH} bytes, got {len(data)}")
        root = BrokerId.unpack(data[0:6])
        sender = BrokerId.unpack(data[6:12])
        capability, cost, tc = struct.unpack(">QQB", data[12:29])
        if tc not in (0, 1):
            raise FramingError(f"tc flag must be 0 or 1, got {tc}")
        # bytes 29..36 are reserved and ignored
        return cls(root=root, sender=sender, root_capability=capability,
                   root_path_cost_us=cost, tc=bool(tc))


@dataclass(frozen=True)
class Will:
    topic: str
    payload: bytes
    qos: int = 0
    retain: bool = False


@dataclass(frozen=True)
class Connect:
    client_id: str
    version_byte: int = 0x04
    keep_alive_s: int = 10
    clean_session: bool = True
    will: Will | None = None

    @property
    def broker_flag(self) -> bool:
        return bool(self.version_byte & BROKER_FLAG)

    @property
    def base_version(self) -> int:
        return self.version_byte & ~BROKER_FLAG


@dataclass(frozen=True)
class Connack:
    session_present: bool = False
    return_code: int = CONNACK_ACCEPTED


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    filters: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class Suback:
    packet_id: int
    return_codes: tuple[int, ...]


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes = b""
    qos: int = 0
    retain: bool = False
    dup: bool = False
    packet_id: int | None = None


@dataclass(frozen=True)
class Puback:
    packet_id: int


@dataclass(frozen=True)
class Pubrec:
    packet_id: int


@dataclass(frozen=True)
class Pubrel:
    packet_id: int


@dataclass(frozen=True)
class Pubcomp:
    packet_id: int


@dataclass(frozen=True)
class Pingreq:
    bpdu: BpduPayload | None = None


@dataclass(frozen=True)
class Pingresp:
    pass


@dataclass(frozen=True)
class Disconnect:
    pass


Packet = (
    Connect | Connack | Subscribe | Suback | Publish
    | Puback | Pubrec | Pubrel | Pubcomp | Pingreq | Pingresp | Disconnect
)

_TYPE_CONNECT = 1
_TYPE_CONNACK = 2
_TYPE_PUBLISH = 3
_TYPE_PUBACK = 4
_TYPE_PUBREC = 5
_TYPE_PUBREL = 6
_TYPE_PUBCOMP = 7
_TYPE_SUBSCRIBE = 8
_TYPE_SUBACK = 9
_TYPE_PINGREQ = 12
_TYPE_PINGRESP = 13
_TYPE_DISCONNECT = 14


def set_broker_flag(version_byte: int) -> int:
    """Mark a Protocol Version byte as broker-originated (MSB set)."""
    return version_byte | BROKER_FLAG


def is_broker_connect(pkt: Connect) -> bool:
    return pkt.broker_flag


def encode_remaining_length(n: int) -> bytes:
    if n < 0 or n > MAX_REMAINING_LENGTH:
        raise EncodeError(f"remaining length {n} out of range")
    out = bytearray()
    while True:
        digit = n % 128
        n //= 128
        if n:
            digit |= 0x80
        out.append(digit)
        if not n:
            return bytes(out)


def decode_remaining_length(data: bytes, offset: int) -> tuple[int, int]:
    """Return (value, next_offset); raises on >4 bytes or truncation."""
    multiplier = 1
    value = 0
    for i in range(4):
        if offset + i >= len(data):
            raise TruncatedPacket("remaining length runs past end of buffer")
        byte = data[offset + i]
        value += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            return value, offset + i + 1
    raise MalformedLength("remaining length exceeds 4 bytes")


def _utf8(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise EncodeError("string too long for a 2-byte length prefix")
    return struct.pack(">H", len(raw)) + raw


def _bin(b: bytes) -> bytes:
    if len(b) > 0xFFFF:
        raise EncodeError("binary field too long for a 2-byte length prefix")
    return struct.pack(">H", len(b)) + b


class _Cursor:
    """Sequential reader over a packet body."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPacket(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def utf8(self) -> str:
        length = self.u16()
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FramingError(f"invalid UTF-8 string: {exc}") from None

    def binary(self) -> bytes:
        return self.take(self.u16())

    def rest(self) -> bytes:
        chunk = self.data[self.pos:]
        self.pos = len(self.data)
        return chunk

    def done(self) -> bool:
        return self.pos == len(self.data)


def _check_packet_id(pid: int) -> int:
    if not 1 <= pid <= 0xFFFF:
        raise EncodeError(f"packet id {pid} out of range 1..65535")
    return pid


def encode_packet(pkt: Packet) -> bytes:
    """Encode a packet into its canonical byte framing."""
    if isinstance(pkt, Connect):
        return _encode_connect(pkt)
    if isinstance(pkt, Connack):
        return _frame(_TYPE_CONNACK, 0, struct.pack(">BB", 1 if pkt.session_present else 0, pkt.return_code))
    if isinstance(pkt, Subscribe):
        return _encode_subscribe(pkt)
    if isinstance(pkt, Suback):
        if not pkt.return_codes:
            raise EncodeError("SUBACK needs at least one return code")
        body = struct.pack(">H", _check_packet_id(pkt.packet_id)) + bytes(pkt.return_codes)
        return _frame(_TYPE_SUBACK, 0, body)
    if isinstance(pkt, Publish):
        return _encode_publish(pkt)
    if isinstance(pkt, Puback):
        return _frame(_TYPE_PUBACK, 0, struct.pack(">H", _check_packet_id(pkt.packet_id)))
    if isinstance(pkt, Pubrec):
        return _frame(_TYPE_PUBREC, 0, struct.pack(">H", _check_packet_id(pkt.packet_id)))
    if isinstance(pkt, Pubrel):
        return _frame(_TYPE_PUBREL, 0b0010, struct.pack(">H", _check_packet_id(pkt.packet_id)))
    if isinstance(pkt, Pubcomp):
        return _frame(_TYPE_PUBCOMP, 0, struct.pack(">H", _check_packet_id(pkt.packet_id)))
    if isinstance(pkt, Pingreq):
        body = pkt.bpdu.pack() if pkt.bpdu is not None else b""
        return _frame(_TYPE_PINGREQ, 0, body)
    if isinstance(pkt, Pingresp):
        return _frame(_TYPE_PINGRESP, 0, b"")
    if isinstance(pkt, Disconnect):
        return _frame(_TYPE_DISCONNECT, 0, b"")
    raise EncodeError(f"cannot encode {type(pkt).__name__}")


def _frame(ptype: int, flags: int, body: bytes) -> bytes:
    return bytes([(ptype << 4) | flags]) + encode_remaining_length(len(body)) + body


def _encode_connect(pkt: Connect) -> bytes:
    if pkt.base_version not in SUPPORTED_BASE_VERSIONS:
        raise EncodeError(f"unsupported base protocol version 0x{pkt.base_version:02x}")
    flags = 0
    if pkt.clean_session:
        flags |= 0x02
    if pkt.will is not None:
        if not 0 <= pkt.will.qos <= 2:
            raise EncodeError(f"will qos {pkt.will.qos} out of range")
        flags |= 0x04 | (pkt.will.qos << 3)
        if pkt.will.retain:
            flags |= 0x20
    body = bytearray()
    body += _utf8("MQTT")
    body.append(pkt.version_byte)
    body.append(flags)
    body += struct.pack(">H", pkt.keep_alive_s)
    if pkt.base_version == 0x05:
        body += encode_remaining_length(0)  # empty properties block
    body += _utf8(pkt.client_id)
    if pkt.will is not None:
        if pkt.base_version == 0x05:
            body += encode_remaining_length(0)  # empty will properties
        body += _utf8(pkt.will.topic)
        body += _bin(pkt.will.payload)
    return _frame(_TYPE_CONNECT, 0, bytes(body))


def _encode_subscribe(pkt: Subscribe) -> bytes:
    if not pkt.filters:
        raise EncodeError("SUBSCRIBE needs at least one topic filter")
    body = bytearray(struct.pack(">H", _check_packet_id(pkt.packet_id)))
    for topic_filter, qos in pkt.filters:
        if not 0 <= qos <= 2:
            raise EncodeError(f"subscription qos {qos} out of range")
        body += _utf8(topic_filter)
        body.append(qos)
    return _frame(_TYPE_SUBSCRIBE, 0b0010, bytes(body))


def _encode_publish(pkt: Publish) -> bytes:
    if not 0 <= pkt.qos <= 2:
        raise EncodeError(f"publish qos {pkt.qos} out of range")
    if pkt.qos == 0 and pkt.packet_id is not None:
        raise EncodeError("QoS 0 publish must not carry a packet id")
    if pkt.qos > 0 and pkt.packet_id is None:
        raise EncodeError("QoS 1/2 publish requires a packet id")
    flags = (pkt.qos << 1) | (0x08 if pkt.dup else 0) | (0x01 if pkt.retain else 0)
    body = bytearray(_utf8(pkt.topic))
    if pkt.qos > 0:
        body += struct.pack(">H", _check_packet_id(pkt.packet_id))
    body += pkt.payload
    return _frame(_TYPE_PUBLISH, flags, bytes(body))


def decode_packet(data: bytes) -> Packet:
    """Decode exactly one packet occupying the whole buffer."""
    if not data:
        raise TruncatedPacket("empty buffer")
    first = data[0]
    ptype = first >> 4
    flags = first & 0x0F
    length, body_start = decode_remaining_length(data, 1)
    if body_start + length > len(data):
        raise TruncatedPacket(
            f"declared {length} body bytes, buffer holds {len(data) - body_start}")
    if body_start + length < len(data):
        raise FramingError(f"{len(data) - body_start - length} trailing bytes after packet")
    body = data[body_start:body_start + length]
    return decode_body(ptype, flags, body)


def decode_body(ptype: int, flags: int, body: bytes) -> Packet:
    """Decode a packet given its parsed fixed header and complete body."""
    if ptype == _TYPE_PUBLISH:
        return _decode_publish(flags, body)
    handler = _FIXED_FLAG_DECODERS.get(ptype)
    if handler is None:
        raise UnknownPacketType(f"packet type {ptype} not supported")
    expected_flags, fn = handler
    if flags != expected_flags:
        raise FramingError(f"packet type {ptype} requires flags {expected_flags:#06b}, got {flags:#06b}")
    return fn(body)


def _decode_connect(body: bytes) -> Connect:
    cur = _Cursor(body)
    proto = cur.utf8()
    if proto != "MQTT":
        raise FramingError(f"unexpected protocol name {proto!r}")
    version_byte = cur.u8()
    base = version_byte & ~BROKER_FLAG
    if base not in SUPPORTED_BASE_VERSIONS:
        raise FramingError(f"unsupported base protocol version 0x{base:02x}")
    flags = cur.u8()
    if flags & 0x01:
        raise FramingError("reserved CONNECT flag bit set")
    if flags & 0xC0:
        raise FramingError("username/password flags not supported")
    keep_alive = cur.u16()
    if base == 0x05:
        _skip_properties(cur)
    client_id = cur.utf8()
    will = None
    if flags & 0x04:
        will_qos = (flags >> 3) & 0x03
        if will_qos > 2:
            raise FramingError(f"will qos {will_qos} out of range")
        if base == 0x05:
            _skip_properties(cur)
        topic = cur.utf8()
        payload = cur.binary()
        will = Will(topic=topic, payload=payload, qos=will_qos, retain=bool(flags & 0x20))
    elif flags & 0x38:
        raise FramingError("will qos/retain set without will flag")
    if not cur.done():
        raise FramingError("unexpected bytes after CONNECT payload")
    return Connect(
        client_id=client_id,
        version_byte=version_byte,
        keep_alive_s=keep_alive,
        clean_session=bool(flags & 0x02),
        will=will,
    )


def _skip_properties(cur: _Cursor) -> None:
    length, nxt = decode_remaining_length(cur.data, cur.pos)
    cur.pos = nxt
    cur.take(length)


def _decode_connack(body: bytes) -> Connack:
    if len(body) != 2:
        raise FramingError(f"CONNACK body must be 2 bytes, got {len(body)}")
    if body[0] & ~0x01:
        raise FramingError("reserved CONNACK flag bits set")
    return Connack(session_present=bool(body[0] & 0x01), return_code=body[1])


def _decode_subscribe(body: bytes) -> Subscribe:
    cur = _Cursor(body)
    packet_id = cur.u16()
    filters = []
    while not cur.done():
        topic_filter = cur.utf8()
        qos = cur.u8()
        if qos > 2:
            raise FramingError(f"subscription qos {qos} out of range")
        filters.append((topic_filter, qos))
    if not filters:
        raise FramingError("SUBSCRIBE with no topic filters")
    return Subscribe(packet_id=packet_id, filters=tuple(filters))


def _decode_suback(body: bytes) -> Suback:
    cur = _Cursor(body)
    packet_id = cur.u16()
    codes = cur.rest()
    if not codes:
        raise FramingError("SUBACK with no return codes")
    return Suback(packet_id=packet_id, return_codes=tuple(codes))


def _decode_publish(flags: int, body: bytes) -> Publish:
    qos = (flags >> 1) & 0x03
    if qos == 3:
        raise FramingError("publish qos 3 is invalid")
    cur = _Cursor(body)
    topic = cur.utf8()
    packet_id = None
    if qos > 0:
        packet_id = cur.u16()
        if packet_id == 0:
            raise FramingError("packet id 0 is invalid")
    payload = cur.rest()
    return Publish(
        topic=topic,
        payload=payload,
        qos=qos,
        retain=bool(flags & 0x01),
        dup=bool(flags & 0x08),
        packet_id=packet_id,
    )


def _decode_packet_id_only(body: bytes, ctor) -> Packet:
    if len(body) != 2:
        raise FramingError(f"{ctor.__name__} body must be 2 bytes, got {len(body)}")
    pid = struct.unpack(">H", body)[0]
    if pid == 0:
        raise FramingError("packet id 0 is invalid")
    return ctor(packet_id=pid)


def _decode_pingreq(body: bytes) -> Pingreq:
    if not body:
        return Pingreq()
    if len(body) != BPDU_LENGTH:
        raise FramingError(
            f"PINGREQ payload must be 0 or {BPDU_LENGTH} bytes, got {len(body)}")
    return Pingreq(bpdu=BpduPayload.unpack(body))


def _decode_empty(body: bytes, ctor) -> Packet:
    if body:
        raise FramingError(f"{ctor.__name__} must have an empty body")
    return ctor()


_FIXED_FLAG_DECODERS = {
    _TYPE_CONNECT: (0, _decode_connect),
    _TYPE_CONNACK: (0, _decode_connack),
    _TYPE_PUBACK: (0, lambda b: _decode_packet_id_only(b, Puback)),
    _TYPE_PUBREC: (0, lambda b: _decode_packet_id_only(b, Pubrec)),
    _TYPE_PUBREL: (0b0010, lambda b: _decode_packet_id_only(b, Pubrel)),
    _TYPE_PUBCOMP: (0, lambda b: _decode_packet_id_only(b, Pubcomp)),
    _TYPE_SUBSCRIBE: (0b0010, _decode_subscribe),
    _TYPE_SUBACK: (0, _decode_suback),
    _TYPE_PINGREQ: (0, _decode_pingreq),
    _TYPE_PINGRESP: (0, lambda b: _decode_empty(b, Pingresp)),
    _TYPE_DISCONNECT: (0, lambda b: _decode_empty(b, Disconnect)),
}
