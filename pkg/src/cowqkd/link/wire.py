"""Binary framing for the classical channel.

Frame layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"C0W1"
    4       1     message type
    5       16    session id
    21      8     payload length
    29      L     payload
    29+L    4     CRC32 over bytes [0, 29+L)

Payloads are themselves a small record: a u32 length plus a UTF-8 JSON header,
followed by any number of u64-length-prefixed binary blobs.
"""

from __future__ import annotations

import enum
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import WireDecodeError

MAGIC = b"C0W1"
HEADER = struct.Struct("<4sB16sQ")
CRC = struct.Struct("<I")
MAX_PAYLOAD = 16 * 1024 * 1024


class MsgType(enum.IntEnum):
    HELLO = 1
    DETECTION_INDICES = 2
    DISCLOSE_REQUEST = 3
    DISCLOSE_BITS = 4
    QBER_REPORT = 5
    SYNDROME = 6
    VERIFY_TAG = 7
    TOEPLITZ_SEED = 8
    FINAL_ACK = 9
    ABORT = 10
    # simulation only: carries the quantum channel's outcome to Bob
    QUANTUM_OUTCOME = 11


@dataclass(frozen=True)
class WireMessage:
    type: MsgType
    session_id: bytes
    payload: bytes = b""

    def __post_init__(self):
        if len(self.session_id) != 16:
            raise WireDecodeError("session id must be 16 bytes")


def encode_message(msg: WireMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise WireDecodeError(f"payload of {len(msg.payload)} bytes exceeds 16 MiB")
    body = HEADER.pack(MAGIC, int(msg.type), msg.session_id, len(msg.payload)) + msg.payload
    return body + CRC.pack(zlib.crc32(body))


def frame_length(header: bytes) -> int:
    """Total frame size announced by the first ``HEADER.size`` bytes."""
    magic, _, _, length = HEADER.unpack(header[:HEADER.size])
    if magic != MAGIC:
        raise WireDecodeError("bad magic")
    if length > MAX_PAYLOAD:
        raise WireDecodeError("declared payload exceeds 16 MiB")
    return HEADER.size + length + CRC.size


def decode_message(data: bytes) -> WireMessage:
    """Parse exactly one frame; any defect raises :class:`WireDecodeError`."""
    if len(data) < HEADER.size + CRC.size:
        raise WireDecodeError("truncated frame")
    total = frame_length(data)
    if len(data) != total:
        raise WireDecodeError(f"frame length {len(data)} != declared {total}")
    (crc,) = CRC.unpack_from(data, total - CRC.size)
    if zlib.crc32(data[:total - CRC.size]) != crc:
        raise WireDecodeError("CRC mismatch")
    _, mtype, sid, length = HEADER.unpack_from(data)
    try:
        t = MsgType(mtype)
    except ValueError:
        raise WireDecodeError(f"unknown message type {mtype}") from None
    return WireMessage(t, sid, data[HEADER.size:HEADER.size + length])


def pack_payload(fields: dict | None = None, *blobs: bytes) -> bytes:
    head = json.dumps(fields or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<I", len(head)), head]
    for b in blobs:
        parts.append(struct.pack("<Q", len(b)))
        parts.append(b)
    return b"".join(parts)


def unpack_payload(payload: bytes) -> tuple[dict, list[bytes]]:
    try:
        (hl,) = struct.unpack_from("<I", payload)
        fields = json.loads(payload[4:4 + hl].decode())
        off = 4 + hl
        blobs = []
        while off < len(payload):
            (bl,) = struct.unpack_from("<Q", payload, off)
            off += 8
            if off + bl > len(payload):
                raise WireDecodeError("blob overruns payload")
            blobs.append(payload[off:off + bl])
            off += bl
    except (struct.error, ValueError) as exc:
        raise WireDecodeError(f"malformed payload: {exc}") from None
    return fields, blobs


def pack_bits(bits) -> bytes:
    """u64 bit count followed by MSB-first packed bits."""
    x = np.asarray(bits, dtype=np.uint8)
    return struct.pack("<Q", len(x)) + np.packbits(x, bitorder="big").tobytes()


def unpack_bits(blob: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<Q", blob)
    if len(blob) != 8 + (n + 7) // 8:
        raise WireDecodeError("bit blob length mismatch")
    return np.unpackbits(np.frombuffer(blob, np.uint8, offset=8), count=n, bitorder="big")


def pack_ints(values) -> bytes:
    return np.asarray(values, dtype="<i8").tobytes()


def unpack_ints(blob: bytes) -> np.ndarray:
    if len(blob) % 8:
        raise WireDecodeError("integer blob length not a multiple of 8")
    return np.frombuffer(blob, dtype="<i8").astype(np.int64)
