"""
Mover wire protocol.

Every frame is a 1-byte type tag, a 4-byte little-endian payload length
and the payload. Payload layouts (all little-endian):

    HELLO        u16 version, u8 mode, u16 stream_count, u8 encryption,
                 u8 role, u16 stream_index, u8 sink_discard,
                 16s session_id, 32s manifest_digest, utf-8 sink_subdir
    MANIFEST     u64 file_count, u64 total_bytes
    FILE_OPEN    u64 file_index, u64 size (UNKNOWN_SIZE in streaming), utf-8 path
    CHUNK        u64 file_index, u64 offset, u32 chunk_len, chunk bytes
    FILE_CLOSE   u64 file_index, u64 final_size, 32s sha256
    GROWTH_MARK  u64 file_index, u64 committed_size
    END_OF_SOURCE  empty
    ACK          u64 file_index (probe connections echo any payload)
    NACK         u64 file_index, u8 reason, utf-8 detail
    BYE          empty, or a JSON session summary from the receiver
"""

import asyncio
import json
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Dict, List, Optional, Tuple, Union

from errors import IncompleteFrame, ProtocolError

PROTOCOL_VERSION = 1
MIN_PROTOCOL_VERSION = 1
MAX_PAYLOAD = 16 << 20
HEADER_SIZE = 5
UNKNOWN_SIZE = (1 << 64) - 1

_HEADER = struct.Struct("<BI")
_HELLO = struct.Struct("<HBHBBHB16s32s")
_U64_PAIR = struct.Struct("<QQ")
_CHUNK = struct.Struct("<QQI")
_FILE_CLOSE = struct.Struct("<QQ32s")
_ACK = struct.Struct("<Q")
_NACK = struct.Struct("<QB")

CHUNK_HEADER_SIZE = _CHUNK.size
MAX_CHUNK_DATA = MAX_PAYLOAD - CHUNK_HEADER_SIZE


class FrameType(IntEnum):
    HELLO = 1
    MANIFEST = 2
    FILE_OPEN = 3
    CHUNK = 4
    FILE_CLOSE = 5
    GROWTH_MARK = 6
    END_OF_SOURCE = 7
    ACK = 8
    NACK = 9
    BYE = 10


_KNOWN_TAGS = {t.value for t in FrameType}


class Role(IntEnum):
    CONTROL = 0
    DATA = 1
    PROBE = 2


class NackReason(IntEnum):
    DIGEST = 1
    SIZE = 2
    WRITE = 3
    SHRINK = 4
    PATH = 5
    PROTOCOL = 6


_MODES = ("bulk", "streaming")
_ENCRYPTIONS = ("none", "tls")


@dataclass(frozen=True)
class Frame:
    frame_type: FrameType
    payload: bytes = b""

    @property
    def length(self) -> int:
        return len(self.payload)


def frame_header(frame_type: FrameType, length: int) -> bytes:
    """Encode the 5-byte header for a payload of the given length."""
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {length} bytes exceeds the {MAX_PAYLOAD}-byte limit")
    return _HEADER.pack(int(frame_type), length)


def encode_frame(frame: Frame) -> bytes:
    """Serialize a frame: tag, little-endian length, payload."""
    return frame_header(frame.frame_type, frame.length) + bytes(frame.payload)


def decode_frame(data: Union[bytes, bytearray, memoryview], offset: int = 0) -> Tuple[Frame, int]:
    """Decode one frame starting at offset.

    Args:
        data: Buffer holding zero or more encoded frames
        offset: Position of the frame's tag byte

    Returns:
        (frame, bytes consumed)

    Raises:
        IncompleteFrame: Buffer ends before the frame does
        ProtocolError: Unknown tag or oversize length
    """
    available = len(data) - offset
    if available < 1:
        raise IncompleteFrame(HEADER_SIZE)
    tag = data[offset]
    if tag not in _KNOWN_TAGS:
        raise ProtocolError(f"unknown frame tag 0x{tag:02X}")
    if available < HEADER_SIZE:
        raise IncompleteFrame(HEADER_SIZE - available)
    _, length = _HEADER.unpack_from(data, offset)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds the {MAX_PAYLOAD}-byte limit")
    total = HEADER_SIZE + length
    if available < total:
        raise IncompleteFrame(total - available)
    payload = bytes(data[offset + HEADER_SIZE:offset + total])
    return Frame(FrameType(tag), payload), total


class FrameDecoder:
    """Incremental decoder for a byte stream of concatenated frames."""

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data: bytes) -> List[Frame]:
        self._buffer.extend(data)
        frames = []
        offset = 0
        while True:
            try:
                frame, consumed = decode_frame(self._buffer, offset)
            except IncompleteFrame:
                break
            frames.append(frame)
            offset += consumed
        del self._buffer[:offset]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buffer)


async def read_frame(reader: asyncio.StreamReader) -> Frame:
    """Read exactly one frame from a stream.

    Raises:
        asyncio.IncompleteReadError: Peer closed mid-frame
        ProtocolError: Invalid header
    """
    header = await reader.readexactly(HEADER_SIZE)
    tag, length = _HEADER.unpack(header)
    if tag not in _KNOWN_TAGS:
        raise ProtocolError(f"unknown frame tag 0x{tag:02X}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds the {MAX_PAYLOAD}-byte limit")
    payload = await reader.readexactly(length) if length else b""
    return Frame(FrameType(tag), payload)


def write_frame(writer: asyncio.StreamWriter, frame_type: FrameType, payload: bytes = b""):
    writer.write(frame_header(frame_type, len(payload)))
    if payload:
        writer.write(payload)


async def expect_frame(reader: asyncio.StreamReader, *expected: FrameType) -> Frame:
    frame = await read_frame(reader)
    if frame.frame_type not in expected:
        names = "/".join(t.name for t in expected)
        raise ProtocolError(f"expected {names}, got {frame.frame_type.name}")
    return frame


# --- payload codecs -------------------------------------------------------


@dataclass(frozen=True)
class SessionHello:
    protocol_version: int
    mode: str
    stream_count: int
    encryption: str
    manifest_digest: bytes = bytes(32)
    session_id: bytes = bytes(16)
    role: Role = Role.CONTROL
    stream_index: int = 0
    sink_discard: bool = False
    sink_subdir: str = ""

    def __post_init__(self):
        if self.stream_count < 1:
            raise ProtocolError(f"stream_count must be >= 1, got {self.stream_count}")
        if self.mode not in _MODES:
            raise ProtocolError(f"unknown mode '{self.mode}'")
        if self.encryption not in _ENCRYPTIONS:
            raise ProtocolError(f"unknown encryption '{self.encryption}'")

    def encode(self) -> bytes:
        return _HELLO.pack(
            self.protocol_version,
            _MODES.index(self.mode),
            self.stream_count,
            _ENCRYPTIONS.index(self.encryption),
            int(self.role),
            self.stream_index,
            1 if self.sink_discard else 0,
            self.session_id,
            self.manifest_digest,
        ) + self.sink_subdir.encode("utf-8")

    @classmethod
    def decode(cls, payload: bytes) -> "SessionHello":
        if len(payload) < _HELLO.size:
            raise ProtocolError(f"HELLO payload too short ({len(payload)} bytes)")
        version, mode, streams, enc, role, index, discard, session_id, digest = _HELLO.unpack_from(payload)
        try:
            return cls(
                protocol_version=version,
                mode=_MODES[mode],
                stream_count=streams,
                encryption=_ENCRYPTIONS[enc],
                manifest_digest=digest,
                session_id=session_id,
                role=Role(role),
                stream_index=index,
                sink_discard=bool(discard),
                sink_subdir=payload[_HELLO.size:].decode("utf-8"),
            )
        except (IndexError, ValueError, UnicodeDecodeError) as e:
            raise ProtocolError(f"malformed HELLO: {e}") from e


def negotiate_version(ours: int, theirs: int) -> int:
    """Both peers speak the lower of the two versions."""
    version = min(ours, theirs)
    if version < MIN_PROTOCOL_VERSION:
        raise ProtocolError(f"peer protocol version {theirs} is not supported")
    return version


@dataclass(frozen=True)
class ChunkHeader:
    file_index: int
    offset: int
    chunk_len: int

    def encode(self) -> bytes:
        return encode_chunk_header(self.file_index, self.offset, self.chunk_len)


def encode_chunk_header(file_index: int, offset: int, chunk_len: int) -> bytes:
    if not 1 <= chunk_len <= MAX_CHUNK_DATA:
        raise ProtocolError(f"chunk_len must be between 1 and {MAX_CHUNK_DATA}, got {chunk_len}")
    return _CHUNK.pack(file_index, offset, chunk_len)


def decode_chunk(payload: bytes) -> Tuple[ChunkHeader, memoryview]:
    if len(payload) < CHUNK_HEADER_SIZE:
        raise ProtocolError("CHUNK payload shorter than its header")
    file_index, offset, chunk_len = _CHUNK.unpack_from(payload)
    if chunk_len < 1 or CHUNK_HEADER_SIZE + chunk_len != len(payload):
        raise ProtocolError(f"CHUNK length {chunk_len} does not match payload of {len(payload)} bytes")
    return ChunkHeader(file_index, offset, chunk_len), memoryview(payload)[CHUNK_HEADER_SIZE:]


def encode_manifest(file_count: int, total_bytes: int) -> bytes:
    return _U64_PAIR.pack(file_count, total_bytes)


def decode_manifest(payload: bytes) -> Tuple[int, int]:
    try:
        return _U64_PAIR.unpack(payload)
    except struct.error as e:
        raise ProtocolError(f"malformed MANIFEST: {e}") from e


def encode_file_open(file_index: int, size: Optional[int], path: str) -> bytes:
    return _U64_PAIR.pack(file_index, UNKNOWN_SIZE if size is None else size) + path.encode("utf-8")


def decode_file_open(payload: bytes) -> Tuple[int, Optional[int], str]:
    if len(payload) < _U64_PAIR.size:
        raise ProtocolError("FILE_OPEN payload too short")
    file_index, size = _U64_PAIR.unpack_from(payload)
    try:
        path = payload[_U64_PAIR.size:].decode("utf-8")
    except UnicodeDecodeError as e:
        raise ProtocolError(f"FILE_OPEN path is not UTF-8: {e}") from e
    return file_index, (None if size == UNKNOWN_SIZE else size), path


def encode_file_close(file_index: int, final_size: int, digest: bytes) -> bytes:
    return _FILE_CLOSE.pack(file_index, final_size, digest)


def decode_file_close(payload: bytes) -> Tuple[int, int, bytes]:
    try:
        return _FILE_CLOSE.unpack(payload)
    except struct.error as e:
        raise ProtocolError(f"malformed FILE_CLOSE: {e}") from e


def encode_growth_mark(file_index: int, committed_size: int) -> bytes:
    return _U64_PAIR.pack(file_index, committed_size)


def decode_growth_mark(payload: bytes) -> Tuple[int, int]:
    try:
        return _U64_PAIR.unpack(payload)
    except struct.error as e:
        raise ProtocolError(f"malformed GROWTH_MARK: {e}") from e


def encode_ack(file_index: int) -> bytes:
    return _ACK.pack(file_index)


def decode_ack(payload: bytes) -> int:
    try:
        return _ACK.unpack(payload)[0]
    except struct.error as e:
        raise ProtocolError(f"malformed ACK: {e}") from e


def encode_nack(file_index: int, reason: NackReason, detail: str = "") -> bytes:
    return _NACK.pack(file_index, int(reason)) + detail.encode("utf-8")


def decode_nack(payload: bytes) -> Tuple[int, NackReason, str]:
    if len(payload) < _NACK.size:
        raise ProtocolError("NACK payload too short")
    file_index, reason = _NACK.unpack_from(payload)
    try:
        return file_index, NackReason(reason), payload[_NACK.size:].decode("utf-8", errors="replace")
    except ValueError as e:
        raise ProtocolError(f"unknown NACK reason {reason}") from e


def encode_summary(summary: Dict[str, Any]) -> bytes:
    return json.dumps(summary, sort_keys=True).encode("utf-8")


def decode_summary(payload: bytes) -> Dict[str, Any]:
    if not payload:
        return {}
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed BYE summary: {e}") from e
