"""Length-prefixed JSON frames exchanged by area and global processors.

Frame = 4-byte little-endian unsigned body length + UTF-8 JSON body. The
body is an object whose first key is ``type``. Floats are written with 17
significant digits so every double round-trips exactly; keys keep the
field order of the message class, so encoding is byte-deterministic.
"""

from __future__ import annotations

import json
import math
import socket
import struct
from dataclasses import dataclass, field, fields
from typing import Any, BinaryIO

MAX_FRAME = 16 * 1024 * 1024
_LEN = struct.Struct("<I")


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# JSON with fixed float formatting


def _enc(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "null"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ProtocolError(f"non-finite number {v!r} cannot be framed")
        s = format(v, ".17g")
        if "e" not in s and "." not in s and "n" not in s:
            s += ".0"
        return s
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    if isinstance(v, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + _enc(x) for k, x in v.items()) + "}"
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(_enc(x) for x in v) + "]"
    if hasattr(v, "tolist"):
        return _enc(v.tolist())
    raise ProtocolError(f"cannot encode {type(v).__name__}")


def dumps(obj: dict) -> str:
    return _enc(obj)


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class Message:
    TYPE = ""

    def body(self) -> dict:
        out: dict = {"type": self.TYPE}
        for f in fields(self):
            out[f.name] = getattr(self, f.name)
        return out


def _floats(xs) -> list[float]:
    return [float(x) for x in xs]


@dataclass(frozen=True)
class Hello(Message):
    TYPE = "Hello"
    area_id: int
    k: int
    n_pairs: int
    pairs: list = field(default_factory=list)
    a0: list = field(default_factory=list)
    curvature: list = field(default_factory=list)


@dataclass(frozen=True)
class AUpdate(Message):
    TYPE = "AUpdate"
    area_id: int
    iter: int
    a: list


@dataclass(frozen=True)
class ZBroadcast(Message):
    TYPE = "ZBroadcast"
    iter: int
    z: list
    converged: bool = False
    r_primal: float | None = None
    s_dual: float | None = None
    final: bool = False
    rho: float | None = None
    metric: list | None = None


@dataclass(frozen=True)
class BReport(Message):
    TYPE = "BReport"
    area_id: int
    pair: list
    b: list


@dataclass(frozen=True)
class LoopSelection(Message):
    TYPE = "LoopSelection"
    tie: str
    gen: str
    absR: float
    f: float


@dataclass(frozen=True)
class ControllerParams(Message):
    TYPE = "ControllerParams"
    params: dict


@dataclass(frozen=True)
class Bye(Message):
    TYPE = "Bye"


MESSAGE_TYPES = {c.TYPE: c for c in (Hello, AUpdate, ZBroadcast, BReport, LoopSelection, ControllerParams, Bye)}


def _check_vec(name, v, n=None):
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ProtocolError(f"{name} must be a list of numbers")
    if n is not None and len(v) != n:
        raise ProtocolError(f"{name} has length {len(v)}, expected {n}")
    return _floats(v)


def from_body(d: Any) -> Message:
    if not isinstance(d, dict) or "type" not in d:
        raise ProtocolError("frame body must be an object with a 'type' field")
    cls = MESSAGE_TYPES.get(d["type"])
    if cls is None:
        raise ProtocolError(f"unknown message type {d['type']!r}")
    names = {f.name for f in fields(cls)}
    extra = set(d) - names - {"type"}
    if extra:
        raise ProtocolError(f"{cls.TYPE}: unexpected fields {sorted(extra)}")
    try:
        msg = cls(**{k: v for k, v in d.items() if k != "type"})
    except TypeError as e:
        raise ProtocolError(f"{cls.TYPE}: {e}") from None
    return _validate(msg)


def _validate(m: Message) -> Message:
    if isinstance(m, Hello):
        if not isinstance(m.k, int) or m.k < 1 or not isinstance(m.area_id, int):
            raise ProtocolError("Hello: k and area_id must be integers, k >= 1")
        if m.a0:
            _check_vec("a0", m.a0, m.k)
        if m.curvature:
            if len(m.curvature) != m.k:
                raise ProtocolError("Hello: curvature must be k x k")
            for row in m.curvature:
                _check_vec("curvature row", row, m.k)
    elif isinstance(m, AUpdate):
        if not isinstance(m.iter, int) or m.iter < 1:
            raise ProtocolError("AUpdate: iter must be a positive integer")
        _check_vec("a", m.a)
    elif isinstance(m, ZBroadcast):
        if not isinstance(m.iter, int) or m.iter < 0:
            raise ProtocolError("ZBroadcast: iter must be a non-negative integer")
        _check_vec("z", m.z)
    elif isinstance(m, BReport):
        if not (isinstance(m.pair, list) and len(m.pair) == 2):
            raise ProtocolError("BReport: pair must be [tie, gen]")
        _check_vec("b", m.b)
    return m


def encode(msg: Message) -> bytes:
    body = dumps(msg.body()).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise ProtocolError("frame too large")
    return _LEN.pack(len(body)) + body


def decode_body(body: bytes) -> Message:
    try:
        d = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed frame body: {e}") from None
    return from_body(d)


def decode(frame: bytes) -> Message:
    """Decode one complete frame (prefix included); trailing bytes are an error."""
    if len(frame) < 4:
        raise ProtocolError("truncated length prefix")
    (n,) = _LEN.unpack_from(frame)
    if n > MAX_FRAME:
        raise ProtocolError(f"declared length {n} exceeds limit")
    if len(frame) != 4 + n:
        raise ProtocolError(f"declared length {n} but {len(frame) - 4} body bytes")
    return decode_body(frame[4:])


def _read_exact(read, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = read(n - len(buf))
        if not chunk:
            raise ConnectionClosed(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return buf


class ConnectionClosed(ProtocolError):
    pass


def read_frame(stream) -> bytes:
    """Read one raw frame from a socket or binary stream."""
    read = stream.recv if isinstance(stream, socket.socket) else stream.read
    head = _read_exact(read, 4)
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise ProtocolError(f"declared length {n} exceeds limit")
    return head + _read_exact(read, n)


def iter_frames(data: bytes):
    """Split a byte string of concatenated frames."""
    i = 0
    while i < len(data):
        if len(data) - i < 4:
            raise ProtocolError("truncated length prefix")
        (n,) = _LEN.unpack_from(data, i)
        if i + 4 + n > len(data):
            raise ProtocolError("truncated frame")
        yield data[i:i + 4 + n]
        i += 4 + n


def write_frame(stream: BinaryIO, msg: Message) -> bytes:
    raw = encode(msg)
    if isinstance(stream, socket.socket):
        stream.sendall(raw)
    else:
        stream.write(raw)
    return raw
