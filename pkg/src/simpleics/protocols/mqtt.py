"""MQTT 3.1.1 codec for the packet subset used by the IIoT gateway path.

QoS 2 and the will/username/password features of CONNECT are not supported;
decoding them yields an ``MqttError`` rather than a partially filled packet.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass


class Kind(enum.IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    SUBSCRIBE = 8
    SUBACK = 9
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


MAX_REMAINING = 268_435_455
PROTOCOL_NAME = b"MQTT"
PROTOCOL_LEVEL = 4
SUBACK_FAILURE = 0x80


class MqttError(ValueError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class MqttPacket:
    kind: Kind
    topic: str = ""
    payload: bytes = b""
    qos: int = 0
    retain: bool = False
    dup: bool = False
    packet_id: int | None = None
    client_id: str = ""
    keepalive: int = 0
    clean_session: bool = True
    session_present: bool = False
    return_code: int = 0
    subscriptions: tuple[tuple[str, int], ...] = ()
    granted: tuple[int, ...] = ()


def connect(client_id: str, keepalive: int = 60, clean_session: bool = True) -> MqttPacket:
    return MqttPacket(Kind.CONNECT, client_id=client_id, keepalive=keepalive,
                      clean_session=clean_session)


def publish(topic: str, payload: bytes, qos: int = 0, retain: bool = False,
            packet_id: int | None = None) -> MqttPacket:
    return MqttPacket(Kind.PUBLISH, topic=topic, payload=bytes(payload), qos=qos,
                      retain=retain, packet_id=packet_id)


def subscribe(packet_id: int, *filters: tuple[str, int]) -> MqttPacket:
    return MqttPacket(Kind.SUBSCRIBE, packet_id=packet_id, subscriptions=tuple(filters))


PINGREQ = MqttPacket(Kind.PINGREQ)
PINGRESP = MqttPacket(Kind.PINGRESP)
DISCONNECT = MqttPacket(Kind.DISCONNECT)


def encode_varint(n: int) -> bytes:
    if not 0 <= n <= MAX_REMAINING:
        raise MqttError("remaining_length", str(n))
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_varint(buf: bytes, offset: int) -> tuple[int, int]:
    """Returns (value, bytes consumed). Rejects non-minimal encodings."""
    value = 0
    for i in range(4):
        if offset + i >= len(buf):
            raise MqttError("truncated", "remaining length")
        byte = buf[offset + i]
        value += (byte & 0x7F) << (7 * i)
        if not byte & 0x80:
            if i and byte == 0:
                raise MqttError("malformed", "non-minimal remaining length")
            return value, i + 1
    raise MqttError("malformed", "remaining length longer than 4 bytes")


def _string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise MqttError("invalid_field", "string longer than 65535 bytes")
    if "\x00" in s:
        raise MqttError("invalid_field", "NUL in string")
    return struct.pack(">H", len(raw)) + raw


def _read_string(buf: bytes, pos: int) -> tuple[str, int]:
    if pos + 2 > len(buf):
        raise MqttError("truncated", "string length")
    (n,) = struct.unpack_from(">H", buf, pos)
    if pos + 2 + n > len(buf):
        raise MqttError("truncated", "string body")
    raw = buf[pos + 2:pos + 2 + n]
    try:
        s = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MqttError("invalid_utf8", str(exc)) from None
    if "\x00" in s:
        raise MqttError("invalid_field", "NUL in string")
    return s, pos + 2 + n


def valid_topic_name(topic: str) -> bool:
    return bool(topic) and "+" not in topic and "#" not in topic


def valid_topic_filter(flt: str) -> bool:
    if not flt:
        return False
    levels = flt.split("/")
    for i, level in enumerate(levels):
        if "#" in level and (level != "#" or i != len(levels) - 1):
            return False
        if "+" in level and level != "+":
            return False
    return True


def _packet_id(pid) -> None:
    if not isinstance(pid, int) or not 1 <= pid <= 0xFFFF:
        raise MqttError("invalid_packet_id", repr(pid))


def _validate(p: MqttPacket) -> None:
    k = p.kind
    if k == Kind.PUBLISH:
        if p.qos not in (0, 1):
            raise MqttError("unsupported_qos", str(p.qos))
        if not valid_topic_name(p.topic):
            raise MqttError("invalid_topic", repr(p.topic))
        if p.qos == 0:
            if p.packet_id is not None:
                raise MqttError("invalid_packet_id", "qos0 PUBLISH forbids a packet id")
            if p.dup:
                raise MqttError("malformed", "qos0 PUBLISH cannot set DUP")
        else:
            _packet_id(p.packet_id)
    elif k in (Kind.PUBACK,):
        _packet_id(p.packet_id)
    elif k == Kind.SUBSCRIBE:
        _packet_id(p.packet_id)
        if not p.subscriptions:
            raise MqttError("malformed", "SUBSCRIBE without filters")
        for flt, qos in p.subscriptions:
            if not valid_topic_filter(flt):
                raise MqttError("invalid_topic", repr(flt))
            if qos not in (0, 1):
                raise MqttError("unsupported_qos", str(qos))
    elif k == Kind.SUBACK:
        _packet_id(p.packet_id)
        if not p.granted or any(g not in (0, 1, SUBACK_FAILURE) for g in p.granted):
            raise MqttError("malformed", f"granted={p.granted!r}")
    elif k == Kind.CONNECT:
        if not 0 <= p.keepalive <= 0xFFFF:
            raise MqttError("invalid_field", f"keepalive={p.keepalive}")
        if not p.client_id and not p.clean_session:
            raise MqttError("identifier_rejected", "empty client id needs clean session")
    elif k == Kind.CONNACK:
        if not 0 <= p.return_code <= 5:
            raise MqttError("invalid_field", f"return_code={p.return_code}")


def mqtt_encode(p: MqttPacket) -> bytes:
    _validate(p)
    k = p.kind
    flags = 0
    if k == Kind.PUBLISH:
        flags = (p.dup << 3) | (p.qos << 1) | int(p.retain)
        body = _string(p.topic)
        if p.qos:
            body += struct.pack(">H", p.packet_id)
        body += p.payload
    elif k == Kind.PUBACK:
        body = struct.pack(">H", p.packet_id)
    elif k == Kind.SUBSCRIBE:
        flags = 0x2
        body = struct.pack(">H", p.packet_id)
        for flt, qos in p.subscriptions:
            body += _string(flt) + bytes((qos,))
    elif k == Kind.SUBACK:
        body = struct.pack(">H", p.packet_id) + bytes(p.granted)
    elif k == Kind.CONNECT:
        body = (_string(PROTOCOL_NAME.decode()) + bytes((PROTOCOL_LEVEL, 0x02 if p.clean_session else 0))
                + struct.pack(">H", p.keepalive) + _string(p.client_id))
    elif k == Kind.CONNACK:
        body = bytes((int(p.session_present), p.return_code))
    else:
        body = b""
    return bytes(((int(k) << 4) | flags,)) + encode_varint(len(body)) + body


_FIXED_FLAGS = {Kind.CONNECT: 0, Kind.CONNACK: 0, Kind.PUBACK: 0, Kind.SUBSCRIBE: 2,
                Kind.SUBACK: 0, Kind.PINGREQ: 0, Kind.PINGRESP: 0, Kind.DISCONNECT: 0}


def packet_size(buf: bytes) -> int | None:
    """Size of the first complete packet in ``buf``, or None when incomplete."""
    try:
        n, used = decode_varint(buf, 1)
    except MqttError as exc:
        if exc.reason == "truncated":
            return None
        raise
    return 1 + used + n if len(buf) >= 1 + used + n else None


def mqtt_decode(b: bytes) -> MqttPacket:
    b = bytes(b)
    if len(b) < 2:
        raise MqttError("truncated", "fixed header")
    type_nibble, flags = b[0] >> 4, b[0] & 0x0F
    try:
        kind = Kind(type_nibble)
    except ValueError:
        raise MqttError("unsupported_packet_type", str(type_nibble)) from None
    remaining, used = decode_varint(b, 1)
    body = b[1 + used:]
    if len(body) != remaining:
        raise MqttError("length_mismatch", f"remaining length {remaining}, have {len(body)}")
    if kind != Kind.PUBLISH and flags != _FIXED_FLAGS[kind]:
        raise MqttError("malformed", f"reserved flags {flags:#x} for {kind.name}")

    if kind == Kind.PUBLISH:
        dup, qos, retain = bool(flags & 0x8), (flags >> 1) & 0x3, bool(flags & 0x1)
        if qos > 1:
            raise MqttError("unsupported_qos", str(qos))
        topic, pos = _read_string(body, 0)
        pid = None
        if qos:
            if pos + 2 > len(body):
                raise MqttError("truncated", "packet id")
            (pid,) = struct.unpack_from(">H", body, pos)
            pos += 2
        p = MqttPacket(kind, topic=topic, payload=body[pos:], qos=qos, retain=retain,
                       dup=dup, packet_id=pid)
    elif kind == Kind.PUBACK:
        if len(body) != 2:
            raise MqttError("length_mismatch", "PUBACK body must be 2 bytes")
        p = MqttPacket(kind, packet_id=struct.unpack(">H", body)[0])
    elif kind == Kind.SUBSCRIBE:
        if len(body) < 2:
            raise MqttError("truncated", "packet id")
        (pid,) = struct.unpack_from(">H", body)
        pos, subs = 2, []
        while pos < len(body):
            flt, pos = _read_string(body, pos)
            if pos >= len(body):
                raise MqttError("truncated", "requested qos")
            if body[pos] & 0xFC:
                raise MqttError("malformed", "reserved bits in requested qos")
            subs.append((flt, body[pos]))
            pos += 1
        p = MqttPacket(kind, packet_id=pid, subscriptions=tuple(subs))
    elif kind == Kind.SUBACK:
        if len(body) < 3:
            raise MqttError("truncated", "SUBACK")
        p = MqttPacket(kind, packet_id=struct.unpack_from(">H", body)[0], granted=tuple(body[2:]))
    elif kind == Kind.CONNECT:
        name, pos = _read_string(body, 0)
        if name != PROTOCOL_NAME.decode():
            raise MqttError("unsupported_protocol", repr(name))
        if pos + 4 > len(body):
            raise MqttError("truncated", "CONNECT variable header")
        level, cflags = body[pos], body[pos + 1]
        if level != PROTOCOL_LEVEL:
            raise MqttError("unsupported_protocol", f"level {level}")
        if cflags & 0x01:
            raise MqttError("malformed", "reserved connect flag set")
        if cflags & 0xFC:
            raise MqttError("unsupported_feature", "will/username/password are not supported")
        (keepalive,) = struct.unpack_from(">H", body, pos + 2)
        client_id, end = _read_string(body, pos + 4)
        if end != len(body):
            raise MqttError("length_mismatch", "trailing bytes after client id")
        p = MqttPacket(kind, client_id=client_id, keepalive=keepalive,
                       clean_session=bool(cflags & 0x02))
    elif kind == Kind.CONNACK:
        if len(body) != 2:
            raise MqttError("length_mismatch", "CONNACK body must be 2 bytes")
        if body[0] & 0xFE:
            raise MqttError("malformed", "reserved CONNACK flags")
        p = MqttPacket(kind, session_present=bool(body[0]), return_code=body[1])
    else:
        if body:
            raise MqttError("length_mismatch", f"{kind.name} has no body")
        p = MqttPacket(kind)
    _validate(p)
    return p
