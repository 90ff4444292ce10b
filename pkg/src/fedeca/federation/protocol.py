"""Length-prefixed binary frames carrying self-describing payloads.

Frame layout (big-endian header)::

    u32 length of everything after this field
    u8  protocol version
    u8  schema tag
    u32 round index
    ... payload value

Payload values are tagged trees. Every float is written as its raw
little-endian IEEE-754 bit pattern, so round trips are bit-exact.

=====  ==================================================
tag    value
=====  ==================================================
``N``  None
``T``  True / ``F`` False
``i``  int64
``d``  float64
``s``  UTF-8 string (u32 length)
``A``  float64 array: u8 ndim, u32 dims, raw data
``J``  int64 array, same layout as ``A``
``l``  list: u32 count, items
``m``  map: u32 count, (string key, value) pairs
=====  ==================================================
"""
from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass

import numpy as np

from fedeca.errors import ProtocolError

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">IBBI")
LENGTH = struct.Struct(">I")
MAX_FRAME = 1 << 30


class Schema(enum.IntEnum):
    HELLO = 1
    ERROR = 2
    ACK = 3
    SHUTDOWN = 4
    FIT_REQUEST = 5
    FIT_REPORT = 6
    # aggregator -> center requests
    EVENT_TIMES = 10
    SET_TIMES = 11
    PROPENSITY = 12
    SET_WEIGHTS = 13
    COX = 14
    ROBUST = 15
    KEYS = 16
    BOOTSTRAP_PLAN = 17
    DROP = 18
    KM = 19
    MOMENTS = 20
    COVARIATE_MOMENTS = 21
    # center -> aggregator shares
    TIMES_SHARE = 30
    PROPENSITY_SHARE = 31
    COX_SHARE = 32
    ROBUST_SHARE = 33
    MOMENT_SHARE = 35
    KM_SHARE = 36


@dataclass(eq=False)
class RoundEnvelope:
    schema: Schema
    payload: object = None
    round_index: int = 0
    version: int = PROTOCOL_VERSION


def _write(buf, v):
    if v is None:
        buf.write(b"N")
    elif v is True:
        buf.write(b"T")
    elif v is False:
        buf.write(b"F")
    elif isinstance(v, (int, np.integer)):
        buf.write(b"i" + struct.pack("<q", int(v)))
    elif isinstance(v, (float, np.floating)):
        buf.write(b"d" + struct.pack("<d", float(v)))
    elif isinstance(v, str):
        raw = v.encode("utf-8")
        buf.write(b"s" + struct.pack("<I", len(raw)) + raw)
    elif isinstance(v, np.ndarray):
        if v.dtype.kind == "f":
            buf.write(b"A")
            a = np.asarray(v, dtype="<f8")
        elif v.dtype.kind in "iub":
            buf.write(b"J")
            a = np.asarray(v, dtype="<i8")
        else:
            raise ProtocolError(f"unsupported array dtype {v.dtype}")
        buf.write(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes(order="C"))
    elif isinstance(v, (list, tuple)):
        buf.write(b"l" + struct.pack("<I", len(v)))
        for item in v:
            _write(buf, item)
    elif isinstance(v, dict):
        buf.write(b"m" + struct.pack("<I", len(v)))
        for k, item in v.items():
            raw = str(k).encode("utf-8")
            buf.write(struct.pack("<I", len(raw)) + raw)
            _write(buf, item)
    else:
        raise ProtocolError(f"cannot encode value of type {type(v).__name__}")


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, k):
        if self.pos + k > len(self.data):
            raise ProtocolError("truncated payload")
        out = self.data[self.pos:self.pos + k]
        self.pos += k
        return out

    def unpack(self, fmt):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s))


def _read(r):
    tag = bytes(r.take(1))
    if tag == b"N":
        return None
    if tag == b"T":
        return True
    if tag == b"F":
        return False
    if tag == b"i":
        return r.unpack("<q")[0]
    if tag == b"d":
        return r.unpack("<d")[0]
    if tag == b"s":
        (k,) = r.unpack("<I")
        return bytes(r.take(k)).decode("utf-8")
    if tag in (b"A", b"J"):
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        dtype = "<f8" if tag == b"A" else "<i8"
        a = np.frombuffer(bytes(r.take(8 * count)), dtype=dtype).reshape(shape)
        return a.astype(float if tag == b"A" else np.int64)
    if tag == b"l":
        (k,) = r.unpack("<I")
        return [_read(r) for _ in range(k)]
    if tag == b"m":
        (k,) = r.unpack("<I")
        out = {}
        for _ in range(k):
            (kl,) = r.unpack("<I")
            key = bytes(r.take(kl)).decode("utf-8")
            out[key] = _read(r)
        return out
    raise ProtocolError(f"unknown value tag {tag!r}")


def encode_payload(value) -> bytes:
    buf = io.BytesIO()
    _write(buf, value)
    return buf.getvalue()


def decode_payload(data) -> object:
    r = _Reader(data)
    v = _read(r)
    if r.pos != len(r.data):
        raise ProtocolError("trailing bytes after payload")
    return v


def encode(envelope: RoundEnvelope) -> bytes:
    body = encode_payload(envelope.payload)
    header = HEADER.pack(HEADER.size - LENGTH.size + len(body), envelope.version, int(envelope.schema), envelope.round_index)
    return header + body


def decode(frame, expected_version=PROTOCOL_VERSION) -> RoundEnvelope:
    """Parse one complete frame; raises :class:`ProtocolError` on any defect."""
    frame = bytes(frame)
    if len(frame) < LENGTH.size:
        raise ProtocolError("truncated frame: missing length prefix")
    (length,) = LENGTH.unpack_from(frame)
    if len(frame) - LENGTH.size < length:
        raise ProtocolError(f"truncated frame: expected {length} bytes, got {len(frame) - LENGTH.size}")
    if len(frame) - LENGTH.size > length:
        raise ProtocolError("frame longer than its length prefix")
    if length < HEADER.size - LENGTH.size:
        raise ProtocolError("truncated frame: header incomplete")
    _, version, schema, round_index = HEADER.unpack_from(frame)
    if expected_version is not None and version != expected_version:
        raise ProtocolError(f"protocol version mismatch: got {version}, expected {expected_version}")
    try:
        schema = Schema(schema)
    except ValueError:
        raise ProtocolError(f"unknown schema tag {schema}") from None
    payload = decode_payload(frame[HEADER.size:])
    return RoundEnvelope(schema, payload, round_index, version)


def read_frame(sock) -> bytes:
    """Read one complete frame from a blocking socket."""
    head = _recv_exact(sock, LENGTH.size)
    (length,) = LENGTH.unpack(head)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame too large: {length} bytes")
    return head + _recv_exact(sock, length)


def _recv_exact(sock, k):
    chunks = []
    while k:
        chunk = sock.recv(min(k, 1 << 20))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        k -= len(chunk)
    return b"".join(chunks)


def payload_equal(a, b) -> bool:
    """Bitwise structural equality for decoded payloads."""
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return (
            isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and a.shape == b.shape
            and a.dtype.kind == b.dtype.kind and a.tobytes() == b.tobytes()
        )
    if isinstance(a, float) and isinstance(b, float):
        return struct.pack("<d", a) == struct.pack("<d", b)
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(payload_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(payload_equal(x, y) for x, y in zip(a, b))
    return type(a) is type(b) and a == b
