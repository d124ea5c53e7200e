"""Bit-exact codecs for probe packets and the framed control channel.

This module IS the wire protocol definition; the byte layouts here are
normative for both the real-UDP path and the simulated transports.

Ping packet, fixed 32 bytes:

    offset  size  field
    0       4     magic, ASCII "DGPG"
    4       16    session id
    20      4     sequence number, unsigned big-endian
    24      1     direction: 0 = request, 1 = echo
    25      7     padding; byte 25 is a version field, fixed to 0

Control frame: 4-byte unsigned big-endian length prefix followed by a
canonical JSON body (sorted keys, no insignificant whitespace) carrying a
"type" discriminator. Signatures elsewhere in the package are computed over
the same canonical encoding, so the body bytes are stable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

PING_MAGIC = b"DGPG"
PING_LEN = 32
DIR_REQUEST = 0
DIR_ECHO = 1
MAX_FRAME_BODY = 16 * 1024 * 1024

MESSAGE_TYPES = frozenset(
    {"AC", "AR", "DR", "Constraints", "Data", "MR", "SM", "GR", "CL", "Error"}
)

_PING_STRUCT = struct.Struct(">4s16sIB7s")


class CodecError(ValueError):
    """Base for wire decoding failures."""


class BadMagic(CodecError):
    pass


class BadLength(CodecError):
    pass


class BadDirection(CodecError):
    pass


class Truncated(CodecError):
    pass


class Oversize(CodecError):
    pass


class UnknownType(CodecError):
    pass


class MalformedBody(CodecError):
    pass


@dataclass(frozen=True)
class PingPacket:
    session_id: bytes
    seq: int
    direction: int

    def echo(self) -> "PingPacket":
        """The reply a responder sends: same identity, direction flipped."""
        return PingPacket(self.session_id, self.seq, DIR_ECHO)


def encode_ping(session_id: bytes, seq: int, direction: int) -> bytes:
    if len(session_id) != 16:
        raise BadLength("session id must be 16 bytes")
    if direction not in (DIR_REQUEST, DIR_ECHO):
        raise BadDirection(f"direction must be 0 or 1, got {direction}")
    if not 0 <= seq <= 0xFFFFFFFF:
        raise CodecError("seq out of 32-bit range")
    return _PING_STRUCT.pack(PING_MAGIC, session_id, seq, direction, b"\x00" * 7)


def decode_ping(data: bytes) -> PingPacket:
    if len(data) != PING_LEN:
        raise BadLength(f"ping packet must be {PING_LEN} bytes, got {len(data)}")
    magic, session_id, seq, direction, _pad = _PING_STRUCT.unpack(data)
    if magic != PING_MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if direction not in (DIR_REQUEST, DIR_ECHO):
        raise BadDirection(f"bad direction byte {direction}")
    return PingPacket(session_id, seq, direction)


def canonical_body(msg: dict) -> bytes:
    """Canonical JSON: sorted keys, compact separators, UTF-8."""
    return json.dumps(msg, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


def encode_frame(msg: dict) -> bytes:
    if msg.get("type") not in MESSAGE_TYPES:
        raise UnknownType(f"unknown message type {msg.get('type')!r}")
    body = canonical_body(msg)
    if len(body) > MAX_FRAME_BODY:
        raise Oversize(f"frame body {len(body)} exceeds {MAX_FRAME_BODY}")
    return struct.pack(">I", len(body)) + body


def decode_frame(data: bytes) -> dict:
    """Decode one complete frame; trailing bytes are rejected."""
    msg, consumed = decode_frame_prefix(data)
    if consumed != len(data):
        raise CodecError(f"{len(data) - consumed} trailing bytes after frame")
    return msg


def decode_frame_prefix(data: bytes) -> tuple[dict, int]:
    """Decode a frame at the head of `data`; returns (message, bytes used)."""
    if len(data) < 4:
        raise Truncated("missing length prefix")
    (length,) = struct.unpack(">I", data[:4])
    if length > MAX_FRAME_BODY:
        raise Oversize(f"declared body {length} exceeds {MAX_FRAME_BODY}")
    if len(data) < 4 + length:
        raise Truncated(f"body declares {length} bytes, {len(data) - 4} available")
    return decode_body(data[4 : 4 + length]), 4 + length


def decode_body(body: bytes) -> dict:
    try:
        msg = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedBody(f"body is not valid JSON: {exc}") from exc
    if not isinstance(msg, dict):
        raise MalformedBody("frame body must be a JSON object")
    mtype = msg.get("type")
    if mtype not in MESSAGE_TYPES:
        raise UnknownType(f"unknown message type {mtype!r}")
    return msg


def signing_bytes(msg: dict) -> bytes:
    """Canonical bytes of a message with its signature field removed."""
    unsigned = {k: v for k, v in msg.items() if k != "signature"}
    return canonical_body(unsigned)
