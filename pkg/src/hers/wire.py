"""Length-prefixed frames carrying enrollment, search, and score messages over a stream.

Frame layout (little-endian)::

    u32 payload length | u8 type | 32-byte params hash | payload

Payloads are built from serialized ciphertexts (``u32 length | blob``) and a
JSON label list (``u32 length | utf-8``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

from .gallery import EncryptedQuery, EncryptedScores, EnrollmentBatch, EnrollmentSegment
from .ring import RingParams
from .serialization import FormatError, ParamsMismatchError, ciphertext_from_bytes, ciphertext_to_bytes

ENROLL = 1
SEARCH = 2
SCORES = 3
ACK = 4
ERROR = 5
TYPES = {ENROLL: "ENROLL", SEARCH: "SEARCH", SCORES: "SCORES", ACK: "ACK", ERROR: "ERROR"}

HEADER = struct.Struct("<IB32s")
DEFAULT_MAX_FRAME = 256 * 1024 * 1024
ZERO_HASH = bytes(32)

# ERROR codes
E_MALFORMED = 1
E_PARAMS = 2
E_TOO_LARGE = 3
E_REJECTED = 4
E_INTERNAL = 5

_ENCODINGS = {"hers": 0, "baseline": 1, "naive": 2}
_ENCODING_NAMES = {v: k for k, v in _ENCODINGS.items()}


class FrameTooLarge(FormatError):
    def __init__(self, length: int, limit: int):
        super().__init__(f"frame payload of {length} bytes exceeds limit {limit}")
        self.length = length


class ConnectionClosed(EOFError):
    pass


@dataclass(frozen=True)
class Frame:
    type: int
    params_hash: bytes
    payload: bytes = b""

    @property
    def name(self) -> str:
        return TYPES.get(self.type, f"UNKNOWN({self.type})")


def encode_frame(frame: Frame) -> bytes:
    if frame.type not in TYPES:
        raise FormatError(f"unknown frame type {frame.type}")
    if len(frame.params_hash) != 32:
        raise FormatError("params hash must be 32 bytes")
    return HEADER.pack(len(frame.payload), frame.type, frame.params_hash) + frame.payload


def decode_frame(blob: bytes, max_size: int = DEFAULT_MAX_FRAME) -> Frame:
    if len(blob) < HEADER.size:
        raise FormatError("frame shorter than header")
    length, kind, h = HEADER.unpack_from(blob)
    if length > max_size:
        raise FrameTooLarge(length, max_size)
    if len(blob) != HEADER.size + length:
        raise FormatError("length prefix does not match payload size")
    if kind not in TYPES:
        raise FormatError(f"unknown frame type {kind}")
    return Frame(kind, h, bytes(blob[HEADER.size:]))


def _read_exact(stream, count: int) -> bytes:
    parts, need = [], count
    while need:
        piece = stream.read(need)
        if not piece:
            raise ConnectionClosed("stream closed mid-frame" if need != count or parts else "stream closed")
        parts.append(piece)
        need -= len(piece)
    return b"".join(parts)


def read_frame(stream, max_size: int = DEFAULT_MAX_FRAME) -> Frame:
    """Read one frame from a binary file-like object.

    An oversized payload is drained before :class:`FrameTooLarge` is raised, so
    the stream stays aligned on the next frame.
    """
    length, kind, h = HEADER.unpack(_read_exact(stream, HEADER.size))
    if length > max_size:
        left = length
        while left:
            left -= len(_read_exact(stream, min(left, 1 << 20)))
        raise FrameTooLarge(length, max_size)
    payload = _read_exact(stream, length)
    if kind not in TYPES:
        raise FormatError(f"unknown frame type {kind}")
    return Frame(kind, h, payload)


def write_frame(stream, frame: Frame):
    stream.write(encode_frame(frame))
    stream.flush()


# ---------------------------------------------------------------------------
# payload codecs
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, blob: bytes):
        self.blob = memoryview(blob)
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise FormatError("payload truncated")
        out = bytes(self.blob[self.pos:self.pos + count])
        self.pos += count
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def done(self):
        if self.pos != len(self.blob):
            raise FormatError("trailing bytes in payload")


def _pack_cts(cts) -> bytes:
    out = [struct.pack("<I", len(cts))]
    for ct in cts:
        blob = ciphertext_to_bytes(ct)
        out.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


def _read_cts(r: _Reader, params: RingParams) -> tuple:
    (count,) = r.unpack("<I")
    cts = []
    for _ in range(count):
        (size,) = r.unpack("<I")
        cts.append(ciphertext_from_bytes(r.take(size), params))
    return tuple(cts)


def _pack_labels(labels) -> bytes:
    blob = json.dumps(list(labels), separators=(",", ":"), ensure_ascii=False).encode()
    return struct.pack("<I", len(blob)) + blob


def _read_labels(r: _Reader) -> tuple:
    (size,) = r.unpack("<I")
    try:
        labels = json.loads(r.take(size).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad label list: {exc}") from None
    if not isinstance(labels, list) or not all(isinstance(x, (str, int)) for x in labels):
        raise FormatError("labels must be a list of strings or integers")
    return tuple(labels)


def _check_hash(frame: Frame, params: RingParams):
    if frame.params_hash != params.param_hash:
        raise ParamsMismatchError("frame params hash does not match")


def enroll_frame(batch: EnrollmentBatch) -> Frame:
    out = [struct.pack("<IQ", batch.dim, batch.start), _pack_labels(batch.labels),
           struct.pack("<I", len(batch.segments))]
    for seg in batch.segments:
        out.append(struct.pack("<III", seg.chunk, seg.offset, seg.count))
        out.append(_pack_cts(seg.cts))
    return Frame(ENROLL, batch.params_hash, b"".join(out))


def parse_enroll(frame: Frame, params: RingParams) -> EnrollmentBatch:
    _check_hash(frame, params)
    r = _Reader(frame.payload)
    dim, start = r.unpack("<IQ")
    labels = _read_labels(r)
    (nseg,) = r.unpack("<I")
    segs = []
    for _ in range(nseg):
        chunk, offset, count = r.unpack("<III")
        segs.append(EnrollmentSegment(chunk, offset, count, _read_cts(r, params)))
    r.done()
    return EnrollmentBatch(frame.params_hash, dim, start, labels, tuple(segs))


def search_frame(query: EncryptedQuery) -> Frame:
    return Frame(SEARCH, query.params_hash, _pack_cts(query.cts))


def parse_search(frame: Frame, params: RingParams) -> EncryptedQuery:
    _check_hash(frame, params)
    r = _Reader(frame.payload)
    cts = _read_cts(r, params)
    r.done()
    return EncryptedQuery(frame.params_hash, cts)


def scores_frame(scores: EncryptedScores, params_hash: bytes) -> Frame:
    head = struct.pack("<BQ", _ENCODINGS[scores.encoding], scores.valid)
    return Frame(SCORES, params_hash, head + _pack_labels(scores.labels) + _pack_cts(scores.cts))


def parse_scores(frame: Frame, params: RingParams) -> EncryptedScores:
    _check_hash(frame, params)
    r = _Reader(frame.payload)
    code, valid = r.unpack("<BQ")
    if code not in _ENCODING_NAMES:
        raise FormatError(f"unknown score encoding {code}")
    labels = _read_labels(r)
    cts = _read_cts(r, params)
    r.done()
    return EncryptedScores(_ENCODING_NAMES[code], cts, valid, labels)


@dataclass(frozen=True)
class Ack:
    cursor: int  # gallery size after the request
    dim: int
    chunks: int


def ack_frame(ack: Ack, params_hash: bytes) -> Frame:
    return Frame(ACK, params_hash, struct.pack("<QII", ack.cursor, ack.dim, ack.chunks))


def parse_ack(frame: Frame) -> Ack:
    r = _Reader(frame.payload)
    out = Ack(*r.unpack("<QII"))
    r.done()
    return out


@dataclass(frozen=True)
class ErrorReply:
    code: int
    message: str


def error_frame(code: int, message: str, params_hash: bytes = ZERO_HASH) -> Frame:
    text = message.encode()[:65535]
    return Frame(ERROR, params_hash, struct.pack("<HH", code, len(text)) + text)


def parse_error(frame: Frame) -> ErrorReply:
    r = _Reader(frame.payload)
    code, size = r.unpack("<HH")
    text = r.take(size).decode(errors="replace")
    r.done()
    return ErrorReply(code, text)
