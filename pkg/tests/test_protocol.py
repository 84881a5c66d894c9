import random

import pytest

from errors import IncompleteFrame, LabError, ProtocolError
from wan import protocol
from wan.protocol import Frame, FrameDecoder, FrameType, NackReason, Role, SessionHello


def test_bye_frame_is_a_bare_header():
    data = protocol.encode_frame(Frame(FrameType.BYE))
    assert data == bytes([FrameType.BYE, 0, 0, 0, 0])


def test_chunk_frame_length_is_little_endian():
    data = protocol.encode_frame(Frame(FrameType.CHUNK, b"12345678"))
    assert len(data) == 13
    assert data[0] == FrameType.CHUNK
    assert data[1:5] == (8).to_bytes(4, "little")


def test_oversize_payload_is_rejected():
    with pytest.raises(ProtocolError):
        protocol.frame_header(FrameType.CHUNK, protocol.MAX_PAYLOAD + 1)


def test_truncated_header_is_incomplete():
    with pytest.raises(IncompleteFrame):
        protocol.decode_frame(bytes([FrameType.ACK, 8, 0]))


def test_truncated_payload_reports_missing_bytes():
    data = protocol.encode_frame(Frame(FrameType.ACK, protocol.encode_ack(3)))
    with pytest.raises(IncompleteFrame) as info:
        protocol.decode_frame(data[:-3])
    assert info.value.needed == 3


def test_unknown_tag_is_a_protocol_error():
    with pytest.raises(ProtocolError):
        protocol.decode_frame(bytes([0xFF, 0, 0, 0, 0]))


def test_length_beyond_limit_is_a_protocol_error():
    header = bytes([FrameType.CHUNK]) + (protocol.MAX_PAYLOAD + 1).to_bytes(4, "little")
    with pytest.raises(ProtocolError):
        protocol.decode_frame(header)


def _random_frame(rng):
    frame_type = rng.choice(list(FrameType))
    return Frame(frame_type, rng.randbytes(rng.randint(0, 300)))


def test_round_trip_over_generated_frames():
    rng = random.Random(1)
    for _ in range(300):
        frame = _random_frame(rng)
        decoded, consumed = protocol.decode_frame(protocol.encode_frame(frame))
        assert decoded == frame
        assert consumed == 5 + frame.length


def test_concatenated_frames_decode_in_order_across_any_split():
    rng = random.Random(2)
    frames = [_random_frame(rng) for _ in range(50)]
    stream = b"".join(protocol.encode_frame(f) for f in frames)
    decoder = FrameDecoder()
    decoded = []
    position = 0
    while position < len(stream):
        step = rng.randint(1, 64)
        decoded.extend(decoder.feed(stream[position:position + step]))
        position += step
    assert decoded == frames
    assert decoder.pending == 0


def test_fuzzed_input_never_crashes():
    rng = random.Random(3)
    for _ in range(2000):
        data = rng.randbytes(rng.randint(0, 40))
        try:
            frame, consumed = protocol.decode_frame(data)
        except LabError as e:
            assert isinstance(e, (IncompleteFrame, ProtocolError))
        else:
            assert consumed == 5 + frame.length <= len(data)


def test_hello_round_trip():
    hello = SessionHello(
        protocol.PROTOCOL_VERSION,
        "streaming",
        8,
        "tls",
        manifest_digest=bytes(range(32)),
        session_id=bytes(range(16)),
        role=Role.DATA,
        stream_index=5,
        sink_discard=True,
        sink_subdir="runs/a",
    )
    assert SessionHello.decode(hello.encode()) == hello


def test_hello_rejects_zero_streams():
    with pytest.raises(ProtocolError):
        SessionHello(1, "bulk", 0, "none")


def test_malformed_hello_is_a_protocol_error():
    with pytest.raises(ProtocolError):
        SessionHello.decode(b"\x01\x00")
    payload = bytearray(SessionHello(1, "bulk", 1, "none").encode())
    payload[2] = 9  # mode index out of range
    with pytest.raises(ProtocolError):
        SessionHello.decode(bytes(payload))


def test_version_negotiation_takes_the_lower_version():
    assert protocol.negotiate_version(3, 1) == 1
    assert protocol.negotiate_version(1, 2) == 1
    with pytest.raises(ProtocolError):
        protocol.negotiate_version(1, 0)


def test_chunk_codec():
    payload = protocol.encode_chunk_header(7, 4096, 5) + b"hello"
    header, data = protocol.decode_chunk(payload)
    assert (header.file_index, header.offset, header.chunk_len) == (7, 4096, 5)
    assert bytes(data) == b"hello"


def test_chunk_length_must_match_payload():
    with pytest.raises(ProtocolError):
        protocol.decode_chunk(protocol.encode_chunk_header(0, 0, 10) + b"short")
    with pytest.raises(ProtocolError):
        protocol.encode_chunk_header(0, 0, 0)


def test_chunk_header_cannot_exceed_the_frame_limit():
    largest = protocol.ChunkHeader(1, 0, protocol.MAX_CHUNK_DATA)
    assert protocol.decode_chunk(largest.encode() + bytes(protocol.MAX_CHUNK_DATA))[0] == largest
    with pytest.raises(ProtocolError):
        protocol.ChunkHeader(1, 0, protocol.MAX_CHUNK_DATA + 1).encode()
    with pytest.raises(ProtocolError):
        protocol.encode_chunk_header(1, 0, protocol.MAX_PAYLOAD)


def test_file_open_with_unknown_size():
    payload = protocol.encode_file_open(2, None, "d0000/f00000002.bin")
    assert protocol.decode_file_open(payload) == (2, None, "d0000/f00000002.bin")


def test_nack_carries_reason_and_detail():
    payload = protocol.encode_nack(4, NackReason.DIGEST, "sha256 mismatch")
    assert protocol.decode_nack(payload) == (4, NackReason.DIGEST, "sha256 mismatch")
    with pytest.raises(ProtocolError):
        protocol.decode_nack(protocol.encode_ack(4) + bytes([99]))


def test_summary_codec():
    summary = {"files_ok": 3, "integrity": "verified"}
    assert protocol.decode_summary(protocol.encode_summary(summary)) == summary
    assert protocol.decode_summary(b"") == {}
    with pytest.raises(ProtocolError):
        protocol.decode_summary(b"{not json")
