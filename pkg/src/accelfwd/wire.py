"""Binary message set shared by the forwarding client and the destination server.

Frame layout (all integers little-endian)::

    [len: u32][tag: u8][payload: len - 1 bytes]

The length prefix counts the tag byte plus the payload, so a single 4-byte read
determines the frame boundary.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import ClassVar, Union

import numpy as np

PROTOCOL_VERSION = 1
MAX_FRAME_LEN = 2**31 - 1
MAX_SIDE = 65535
DIGEST_SIZE = 32
HEADER_SIZE = 5  # u32 length + u8 tag

F32 = np.dtype("<f4")

_U32 = struct.Struct("<I")
_U32x2 = struct.Struct("<II")
_F64 = struct.Struct("<d")
_U64 = struct.Struct("<Q")


class WireError(Exception):
    """Base class for framing and payload errors."""


class Incomplete(WireError):
    """More bytes are needed before a frame can be decoded.

    This is a resumption signal rather than a failure: feed more data and retry.
    """


class UnknownTag(WireError):
    pass


class MalformedPayload(WireError):
    """Payload length or content is inconsistent with its tag.

    A stream that produced this error is poisoned and must be torn down.
    """


class PayloadTooLarge(MalformedPayload):
    pass


class InvalidModel(ValueError):
    pass


class ErrorCode(IntEnum):
    PROTOCOL = 1
    UNKNOWN_MODEL = 2
    TOO_LARGE = 3
    BUSY = 4
    VERSION = 5
    INTERNAL = 6
    SHUTDOWN = 7


class Tag(IntEnum):
    HELLO = 0x01
    HELLO_ACK = 0x02
    FRAME_SIZE = 0x03
    RESOLUTION = 0x04
    FRAME_DATA = 0x05
    FORWARD_RESULT = 0x06
    MODEL_CHECK = 0x07
    MODEL_NEEDED = 0x08
    MODEL_UPLOAD = 0x09
    MODEL_ACK = 0x0A
    ERROR = 0x0B


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class Dims:
    """Frame dimensions in (N, C, H, W) order."""

    n: int
    c_ch: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("n", "c_ch", "h", "w"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"Dims.{name} must be a positive integer, got {v!r}")
        if self.h > MAX_SIDE or self.w > MAX_SIDE:
            raise ValueError(f"frame side exceeds {MAX_SIDE}: {self.h}x{self.w}")

    @property
    def elem_count(self) -> int:
        return int(self.n) * int(self.c_ch) * int(self.h) * int(self.w)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n, self.c_ch, self.h, self.w)


def digest(data: bytes) -> bytes:
    """SHA-256 of ``data``; the project-wide 32-byte content digest."""
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class ModelDescriptor:
    """The cacheable unit: network structure, weights and output-size constant.

    ``digest`` covers structure, weights and ``c`` (as an 8-byte LE double) but
    not the name.
    """

    name: str
    structure: bytes
    weights: bytes
    c: float
    digest: bytes = field(init=False, repr=False)

    def __post_init__(self):
        c = float(self.c)
        if not math.isfinite(c) or c <= 0:
            raise InvalidModel(f"output constant c must be finite and > 0, got {self.c!r}")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "structure", bytes(self.structure))
        object.__setattr__(self, "weights", bytes(self.weights))
        h = hashlib.sha256()
        h.update(self.structure)
        h.update(self.weights)
        h.update(_F64.pack(c))
        object.__setattr__(self, "digest", h.digest())

    @property
    def size(self) -> int:
        return len(self.structure) + len(self.weights)


def round_half_away(x: float) -> int:
    """Round to nearest integer, ties away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def output_count(elem_count: int, c: float) -> int:
    """Number of output elements a model with constant ``c`` produces."""
    if c <= 0:
        raise ValueError(f"c must be > 0, got {c!r}")
    return round_half_away(elem_count / c)


def transfer_size(dims: Dims, c: float) -> int:
    """Bytes moved per frame: resolution (8) + size (4) + frame + result, 4 bytes each.

    >>> transfer_size(Dims(1, 3, 368, 656), 3.368421)
    3756924
    """
    e = dims.elem_count
    return 2 * 4 + 1 * 4 + e * 4 + output_count(e, c) * 4


# ---------------------------------------------------------------------------
# Messages


def _as_f32(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=F32).reshape(-1)
    return arr


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and np.array_equal(a.view(np.uint32), b.view(np.uint32))


@dataclass(frozen=True)
class Hello:
    version: int
    tag: ClassVar[Tag] = Tag.HELLO


@dataclass(frozen=True)
class HelloAck:
    version: int
    tag: ClassVar[Tag] = Tag.HELLO_ACK


@dataclass(frozen=True)
class FrameSize:
    elem_count: int
    tag: ClassVar[Tag] = Tag.FRAME_SIZE


@dataclass(frozen=True)
class Resolution:
    w: int
    h: int
    tag: ClassVar[Tag] = Tag.RESOLUTION


@dataclass(frozen=True, eq=False)
class FrameData:
    data: np.ndarray
    tag: ClassVar[Tag] = Tag.FRAME_DATA

    def __post_init__(self):
        object.__setattr__(self, "data", _as_f32(self.data))

    @property
    def elem_count(self) -> int:
        return int(self.data.size)

    def __eq__(self, other):
        if not isinstance(other, FrameData):
            return NotImplemented
        return _bits_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class ForwardResult:
    """Forward-pass output, preceded by the server-measured compute time."""

    compute_s: float
    data: np.ndarray
    tag: ClassVar[Tag] = Tag.FORWARD_RESULT

    def __post_init__(self):
        object.__setattr__(self, "data", _as_f32(self.data))

    @property
    def elem_count(self) -> int:
        return int(self.data.size)

    def __eq__(self, other):
        if not isinstance(other, ForwardResult):
            return NotImplemented
        return (_F64.pack(self.compute_s) == _F64.pack(other.compute_s)
                and _bits_equal(self.data, other.data))


@dataclass(frozen=True)
class ModelCheck:
    digest: bytes
    tag: ClassVar[Tag] = Tag.MODEL_CHECK


@dataclass(frozen=True)
class ModelNeeded:
    digest: bytes
    tag: ClassVar[Tag] = Tag.MODEL_NEEDED


@dataclass(frozen=True)
class ModelUpload:
    digest: bytes
    c: float
    name: str
    structure: bytes
    weights: bytes
    tag: ClassVar[Tag] = Tag.MODEL_UPLOAD

    @classmethod
    def from_descriptor(cls, d: ModelDescriptor) -> "ModelUpload":
        return cls(d.digest, d.c, d.name, d.structure, d.weights)

    def to_descriptor(self) -> ModelDescriptor:
        return ModelDescriptor(self.name, self.structure, self.weights, self.c)


@dataclass(frozen=True)
class ModelAck:
    digest: bytes
    tag: ClassVar[Tag] = Tag.MODEL_ACK


@dataclass(frozen=True)
class Error:
    code: int
    message: str
    tag: ClassVar[Tag] = Tag.ERROR


Message = Union[Hello, HelloAck, FrameSize, Resolution, FrameData, ForwardResult,
                ModelCheck, ModelNeeded, ModelUpload, ModelAck, Error]

MESSAGE_TYPES: dict[Tag, type] = {
    cls.tag: cls for cls in (Hello, HelloAck, FrameSize, Resolution, FrameData, ForwardResult,
                             ModelCheck, ModelNeeded, ModelUpload, ModelAck, Error)
}

# payload sizes for tags whose payload never varies
_FIXED_PAYLOAD = {
    Tag.HELLO: 4,
    Tag.HELLO_ACK: 4,
    Tag.FRAME_SIZE: 4,
    Tag.RESOLUTION: 8,
    Tag.MODEL_CHECK: DIGEST_SIZE,
    Tag.MODEL_NEEDED: DIGEST_SIZE,
    Tag.MODEL_ACK: DIGEST_SIZE,
}
# minimum payload sizes for variable-length tags
_MIN_PAYLOAD = {
    Tag.FRAME_DATA: 4 + 4,
    Tag.FORWARD_RESULT: 8 + 4 + 4,
    Tag.MODEL_UPLOAD: DIGEST_SIZE + 8 + 4 + 4 + 8,
    Tag.ERROR: 8,
}
MODEL_UPLOAD_FIXED = _MIN_PAYLOAD[Tag.MODEL_UPLOAD]


# ---------------------------------------------------------------------------
# Encoding


def _check_u32(name: str, v: int, lo: int = 0, hi: int = 2**32 - 1) -> int:
    if not isinstance(v, (int, np.integer)) or not lo <= v <= hi:
        raise ValueError(f"{name} must be an integer in [{lo}, {hi}], got {v!r}")
    return int(v)


def _check_digest(d: bytes) -> bytes:
    if not isinstance(d, (bytes, bytearray)) or len(d) != DIGEST_SIZE:
        raise ValueError(f"digest must be {DIGEST_SIZE} bytes")
    return bytes(d)


def _encode_payload(msg) -> list[bytes]:
    tag = msg.tag
    if tag in (Tag.HELLO, Tag.HELLO_ACK):
        return [_U32.pack(_check_u32("version", msg.version))]
    if tag is Tag.FRAME_SIZE:
        return [_U32.pack(_check_u32("elem_count", msg.elem_count, 1))]
    if tag is Tag.RESOLUTION:
        w = _check_u32("w", msg.w, 1, MAX_SIDE)
        h = _check_u32("h", msg.h, 1, MAX_SIDE)
        return [_U32x2.pack(w, h)]
    if tag is Tag.FRAME_DATA:
        n = _check_u32("elem_count", msg.elem_count, 1)
        return [_U32.pack(n), msg.data.tobytes()]
    if tag is Tag.FORWARD_RESULT:
        n = _check_u32("elem_count", msg.elem_count, 1)
        return [_F64.pack(float(msg.compute_s)), _U32.pack(n), msg.data.tobytes()]
    if tag in (Tag.MODEL_CHECK, Tag.MODEL_NEEDED, Tag.MODEL_ACK):
        return [_check_digest(msg.digest)]
    if tag is Tag.MODEL_UPLOAD:
        c = float(msg.c)
        if not math.isfinite(c) or c <= 0:
            raise ValueError(f"c must be finite and > 0, got {msg.c!r}")
        name = msg.name.encode("utf-8")
        return [
            _check_digest(msg.digest), _F64.pack(c),
            _U32.pack(_check_u32("name_len", len(name))), name,
            _U32.pack(_check_u32("struct_len", len(msg.structure))), bytes(msg.structure),
            _U64.pack(len(msg.weights)), bytes(msg.weights),
        ]
    if tag is Tag.ERROR:
        text = msg.message.encode("utf-8")
        return [_U32.pack(_check_u32("code", msg.code)),
                _U32.pack(_check_u32("msg_len", len(text))), text]
    raise TypeError(f"not a wire message: {msg!r}")


def encode(msg: Message) -> bytes:
    """Encode one message into a complete frame."""
    parts = _encode_payload(msg)
    length = 1 + sum(len(p) for p in parts)
    if length > MAX_FRAME_LEN:
        raise PayloadTooLarge(f"frame of {length} bytes exceeds {MAX_FRAME_LEN}")
    return b"".join([_U32.pack(length), bytes((msg.tag,)), *parts])


def encoded_size(msg: Message) -> int:
    return len(encode(msg))


# ---------------------------------------------------------------------------
# Decoding


def parse_header(buf) -> tuple[int, Tag]:
    """Validate a frame header and return (length, tag).

    Raises as early as possible: an unknown tag or a length that cannot be right
    for the tag is reported before the payload has arrived.
    """
    if len(buf) < 4:
        raise Incomplete("need 4 header bytes")
    (length,) = _U32.unpack_from(buf, 0)
    if length == 0:
        raise MalformedPayload("zero-length frame has no tag")
    if length > MAX_FRAME_LEN:
        raise PayloadTooLarge(f"declared frame length {length} exceeds {MAX_FRAME_LEN}")
    if len(buf) < HEADER_SIZE:
        raise Incomplete("need tag byte")
    raw = buf[4]
    try:
        tag = Tag(raw)
    except ValueError:
        raise UnknownTag(f"unknown tag 0x{raw:02X}") from None
    size = length - 1
    if tag in _FIXED_PAYLOAD and size != _FIXED_PAYLOAD[tag]:
        raise MalformedPayload(f"{tag.name} payload must be {_FIXED_PAYLOAD[tag]} bytes, got {size}")
    if tag in _MIN_PAYLOAD and size < _MIN_PAYLOAD[tag]:
        raise MalformedPayload(f"{tag.name} payload too short ({size} bytes)")
    return length, tag


def _utf8(raw) -> str:
    try:
        return bytes(raw).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedPayload(f"invalid utf-8: {exc}") from None


def _f32_block(p: memoryview, offset: int, n: int) -> np.ndarray:
    if n < 1:
        raise MalformedPayload("element count must be >= 1")
    if len(p) - offset != 4 * n:
        raise MalformedPayload(f"declared {n} elements but {len(p) - offset} data bytes")
    return np.frombuffer(p, dtype=F32, count=n, offset=offset)


def decode_payload(tag: Tag, payload) -> Message:
    """Decode a payload whose header was already validated by :func:`parse_header`.

    Array payloads are returned as views over ``payload``; pass an owned buffer.
    """
    p = memoryview(payload)
    size = len(p)
    if tag in _FIXED_PAYLOAD and size != _FIXED_PAYLOAD[tag]:
        raise MalformedPayload(f"{tag.name} payload must be {_FIXED_PAYLOAD[tag]} bytes")
    if tag in _MIN_PAYLOAD and size < _MIN_PAYLOAD[tag]:
        raise MalformedPayload(f"{tag.name} payload too short")

    if tag in (Tag.HELLO, Tag.HELLO_ACK):
        return MESSAGE_TYPES[tag](_U32.unpack_from(p)[0])
    if tag is Tag.FRAME_SIZE:
        (n,) = _U32.unpack_from(p)
        if n < 1:
            raise MalformedPayload("frame size must be >= 1")
        return FrameSize(n)
    if tag is Tag.RESOLUTION:
        w, h = _U32x2.unpack_from(p)
        if not (1 <= w <= MAX_SIDE and 1 <= h <= MAX_SIDE):
            raise MalformedPayload(f"resolution out of range: {w}x{h}")
        return Resolution(w, h)
    if tag is Tag.FRAME_DATA:
        (n,) = _U32.unpack_from(p)
        return FrameData(_f32_block(p, 4, n))
    if tag is Tag.FORWARD_RESULT:
        (compute_s,) = _F64.unpack_from(p)
        (n,) = _U32.unpack_from(p, 8)
        return ForwardResult(compute_s, _f32_block(p, 12, n))
    if tag in (Tag.MODEL_CHECK, Tag.MODEL_NEEDED, Tag.MODEL_ACK):
        return MESSAGE_TYPES[tag](bytes(p))
    if tag is Tag.MODEL_UPLOAD:
        return _decode_upload(p)
    if tag is Tag.ERROR:
        code, n = _U32x2.unpack_from(p)
        if size != 8 + n:
            raise MalformedPayload(f"error text length {n} does not match payload")
        return Error(code, _utf8(p[8:]))
    raise UnknownTag(f"unknown tag {tag!r}")


def _decode_upload(p: memoryview) -> ModelUpload:
    size = len(p)
    d = bytes(p[:DIGEST_SIZE])
    pos = DIGEST_SIZE
    (c,) = _F64.unpack_from(p, pos)
    pos += 8
    if not math.isfinite(c) or c <= 0:
        raise MalformedPayload(f"model constant must be finite and > 0, got {c!r}")

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > size:
            raise MalformedPayload("model upload field overruns payload")
        out = p[pos:pos + n]
        pos += n
        return out

    (name_len,) = _U32.unpack(take(4))
    name = _utf8(take(name_len))
    (struct_len,) = _U32.unpack(take(4))
    structure = bytes(take(struct_len))
    (weights_len,) = _U64.unpack(take(8))
    weights = bytes(take(weights_len))
    if pos != size:
        raise MalformedPayload(f"{size - pos} trailing bytes in model upload")
    return ModelUpload(d, c, name, structure, weights)


def decode(buf) -> tuple[Message, int]:
    """Decode one frame from the start of ``buf``.

    Returns the message and the number of bytes consumed (4 + length). Array
    payloads are copied, so ``buf`` may be reused afterwards.
    """
    length, tag = parse_header(buf)
    end = 4 + length
    if len(buf) < end:
        raise Incomplete(f"need {end} bytes, have {len(buf)}")
    payload = bytes(memoryview(buf)[HEADER_SIZE:end])
    return decode_payload(tag, payload), end


class Decoder:
    """Incremental decoder for one byte stream.

    Owned by exactly one session. After a :class:`MalformedPayload` or
    :class:`UnknownTag` the decoder refuses further input; no resynchronization
    is attempted.
    """

    def __init__(self):
        self._buf = bytearray()
        self._poisoned: WireError | None = None

    def feed(self, data) -> list[Message]:
        if self._poisoned is not None:
            raise self._poisoned
        self._buf += data
        out = []
        while True:
            try:
                msg, used = decode(self._buf)
            except Incomplete:
                break
            except WireError as exc:
                self._poisoned = exc
                raise
            del self._buf[:used]
            out.append(msg)
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
