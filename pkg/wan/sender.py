"""
Sending side of the mover.

A session is one control connection plus up to stream_count data
connections. Bulk sessions spread the manifest's files over the streams
with longest-processing-time-first packing and pipeline them: a stream
keeps sending while acknowledgements for earlier files come back.
Streaming sessions watch a directory that is still being written and pin
each discovered file to the least-loaded stream.

Failure policy: a file whose digest is rejected is re-sent once; a broken
data connection is re-opened once and its unacknowledged files are sent
again. Anything beyond that is counted as failed.
"""

import abc
import asyncio
import collections
import hashlib
import heapq
import logging
import os
import socket
import ssl
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Optional, Sequence, Set, Tuple

from bench.dataset import END_OF_SOURCE_MARKER, ContentStream, DatasetManifest, ManifestEntry
from errors import ProtocolError, TransferError
from wan import protocol
from wan.models import (
    DirectorySource,
    DiscardSink,
    Encryption,
    Mode,
    SyntheticSource,
    TransferResult,
    TransferSpec,
    split_address,
)
from wan.protocol import FrameType, NackReason, Role, SessionHello, write_frame
from wan.sockopts import AppliedOptions, apply_socket_options

logger = logging.getLogger(__name__)

MAX_RECONNECTS = 1
NO_DIGEST = bytes(32)
CONNECTION_ERRORS = (ConnectionError, asyncio.IncompleteReadError, ssl.SSLError)


def schedule_lpt(sizes: Sequence[int], stream_count: int) -> List[List[int]]:
    """Longest-processing-time-first packing of files onto streams.

    Args:
        sizes: File sizes in manifest order
        stream_count: Number of streams

    Returns:
        For each stream, the manifest indices it sends, largest first.
        Ties go to the lower file index and the lower stream index.
    """
    if stream_count < 1:
        raise TransferError(f"stream_count must be >= 1, got {stream_count}")
    plan: List[List[int]] = [[] for _ in range(stream_count)]
    loads = [(0, stream) for stream in range(stream_count)]
    heapq.heapify(loads)
    for index in sorted(range(len(sizes)), key=lambda i: (-sizes[i], i)):
        load, stream = heapq.heappop(loads)
        plan[stream].append(index)
        heapq.heappush(loads, (load + sizes[index], stream))
    return plan


async def open_channel(
    address: str,
    hello: SessionHello,
    tls_context: Optional[ssl.SSLContext] = None,
    cca: Optional[str] = None,
    socket_buffer: Optional[int] = None,
    timeout: float = 10.0,
) -> Tuple[asyncio.StreamReader, asyncio.StreamWriter, AppliedOptions]:
    """Connect, apply socket options and complete the HELLO exchange.

    Raises:
        TransferError: Peer unreachable or refused the session
        SocketOptionError: Requested congestion control or buffer rejected
    """
    loop = asyncio.get_running_loop()
    host, port = split_address(address)
    try:
        infos = await loop.getaddrinfo(host, port, type=socket.SOCK_STREAM)
    except OSError as e:
        raise TransferError(f"cannot resolve {address}: {e}") from e
    family, kind, proto, _, sockaddr = infos[0]

    sock = socket.socket(family, kind, proto)
    try:
        applied = apply_socket_options(sock, cca, socket_buffer)
        sock.setblocking(False)
        await asyncio.wait_for(loop.sock_connect(sock, sockaddr), timeout)
    except (OSError, asyncio.TimeoutError) as e:
        sock.close()
        raise TransferError(f"cannot reach {address}: {e!r}") from e
    except BaseException:
        sock.close()
        raise

    reader, writer = await asyncio.open_connection(sock=sock)
    try:
        write_frame(writer, FrameType.HELLO, hello.encode())
        await writer.drain()
        reply = await asyncio.wait_for(protocol.expect_frame(reader, FrameType.HELLO, FrameType.NACK), timeout)
        if reply.frame_type == FrameType.NACK:
            _, reason, detail = protocol.decode_nack(reply.payload)
            raise TransferError(f"{address} refused the session: {detail or reason.name}")
        theirs = SessionHello.decode(reply.payload)
        protocol.negotiate_version(hello.protocol_version, theirs.protocol_version)
        if hello.encryption == Encryption.TLS.value:
            await writer.start_tls(tls_context)
    except (asyncio.TimeoutError, *CONNECTION_ERRORS) as e:
        writer.close()
        raise TransferError(f"handshake with {address} failed: {e!r}") from e
    except BaseException:
        writer.close()
        raise
    return reader, writer, applied


def _default_tls_context() -> ssl.SSLContext:
    from wan.tls import client_context, ensure_lab_certificate

    cert, _ = ensure_lab_certificate()
    return client_context(cert)


class _Session:
    """Connection factory and clock shared by all streams of one session."""

    def __init__(
        self,
        spec: TransferSpec,
        manifest_digest: bytes,
        tls_context: Optional[ssl.SSLContext],
        connect_timeout: float,
    ):
        self.spec = spec
        self.session_id = os.urandom(16)
        self.manifest_digest = manifest_digest
        if spec.encryption == Encryption.TLS and tls_context is None:
            tls_context = _default_tls_context()
        self.tls_context = tls_context
        self.connect_timeout = connect_timeout
        self.chunk_size = min(spec.chunk_size, protocol.MAX_CHUNK_DATA)
        self.started: Optional[float] = None
        self.last_ack: Optional[float] = None
        self.applied: Optional[AppliedOptions] = None

    def hello(self, role: Role, stream_index: int = 0) -> SessionHello:
        sink = self.spec.sink
        return SessionHello(
            protocol_version=protocol.PROTOCOL_VERSION,
            mode=self.spec.mode.value,
            stream_count=self.spec.stream_count,
            encryption=self.spec.encryption.value,
            manifest_digest=self.manifest_digest,
            session_id=self.session_id,
            role=role,
            stream_index=stream_index,
            sink_discard=isinstance(sink, DiscardSink),
            sink_subdir="" if isinstance(sink, DiscardSink) else sink.subdir,
        )

    async def connect(self, role: Role, stream_index: int = 0):
        if self.started is None:
            self.started = asyncio.get_running_loop().time()
        reader, writer, applied = await open_channel(
            self.spec.peer_address,
            self.hello(role, stream_index),
            self.tls_context,
            self.spec.cca,
            self.spec.socket_buffer,
            self.connect_timeout,
        )
        if role == Role.DATA and self.applied is None:
            self.applied = applied
        return reader, writer

    def note_ack(self):
        self.last_ack = asyncio.get_running_loop().time()

    @property
    def wall_time(self) -> float:
        if self.started is None:
            return 0.0
        end = self.last_ack if self.last_ack is not None else asyncio.get_running_loop().time()
        return max(0.0, end - self.started)

    async def close_control(self, reader, writer) -> Dict:
        write_frame(writer, FrameType.BYE)
        await writer.drain()
        frame = await protocol.expect_frame(reader, FrameType.BYE)
        writer.close()
        return protocol.decode_summary(frame.payload)


async def _close_quietly(writer: asyncio.StreamWriter):
    writer.close()
    try:
        await writer.wait_closed()
    except Exception:
        pass


def _send_chunk(writer: asyncio.StreamWriter, file_index: int, offset: int, block: bytes):
    writer.write(protocol.frame_header(FrameType.CHUNK, protocol.CHUNK_HEADER_SIZE + len(block)))
    writer.write(protocol.encode_chunk_header(file_index, offset, len(block)))
    writer.write(block)


class _StreamWorker(abc.ABC):
    """One data connection with its acknowledgement reader and retry policy."""

    def __init__(self, session: _Session, index: int):
        self.session = session
        self.index = index
        self.bytes_ok = 0
        self.files_ok = 0
        self.failed: List[str] = []
        self.retries = 0
        self.inflight: Dict[int, str] = {}
        self._wakeup = asyncio.Event()

    async def run(self):
        reconnects = 0
        while True:
            try:
                await self._run_connection()
                return
            except (TransferError, *CONNECTION_ERRORS) as e:
                if reconnects >= MAX_RECONNECTS:
                    logger.error(f"Stream {self.index} lost for good: {e}")
                    self._fail_remaining(f"connection lost: {e}")
                    return
                reconnects += 1
                self.retries += 1
                logger.warning(f"Stream {self.index} lost ({e!r}); reconnecting")
                self._requeue_after_loss()

    async def _run_connection(self):
        reader, writer = await self.session.connect(Role.DATA, self.index)
        acks = asyncio.create_task(self._ack_loop(reader))
        try:
            await self._produce(writer, acks)
            write_frame(writer, FrameType.BYE)
            await writer.drain()
            await acks
        finally:
            if not acks.done():
                acks.cancel()
            await _close_quietly(writer)

    async def _wait_for_acks(self, acks: asyncio.Task):
        """Block until an ACK/NACK arrives; re-raise if the ack reader died."""
        self._wakeup.clear()
        waiter = asyncio.create_task(self._wakeup.wait())
        try:
            await asyncio.wait({waiter, acks}, return_when=asyncio.FIRST_COMPLETED)
        finally:
            waiter.cancel()
        if acks.done():
            acks.result()
            raise ProtocolError("receiver ended the stream with files still unacknowledged")

    async def _ack_loop(self, reader: asyncio.StreamReader):
        while True:
            frame = await protocol.read_frame(reader)
            if frame.frame_type == FrameType.ACK:
                index = protocol.decode_ack(frame.payload)
                path = self.inflight.pop(index, None)
                if path is None:
                    raise ProtocolError(f"ACK for file {index}, which is not in flight")
                self.session.note_ack()
                self._on_ack(index)
            elif frame.frame_type == FrameType.NACK:
                index, reason, detail = protocol.decode_nack(frame.payload)
                path = self.inflight.pop(index, None)
                if path is None:
                    raise TransferError(f"receiver rejected the stream: {detail or reason.name}")
                self._on_nack(index, path, reason, detail)
            elif frame.frame_type == FrameType.BYE:
                return
            else:
                raise ProtocolError(f"unexpected {frame.frame_type.name} from receiver")
            self._wakeup.set()

    @abc.abstractmethod
    async def _produce(self, writer: asyncio.StreamWriter, acks: asyncio.Task):
        ...

    @abc.abstractmethod
    def _on_ack(self, index: int):
        ...

    @abc.abstractmethod
    def _on_nack(self, index: int, path: str, reason: NackReason, detail: str):
        ...

    @abc.abstractmethod
    def _requeue_after_loss(self):
        ...

    @abc.abstractmethod
    def _fail_remaining(self, why: str):
        ...


class _BlockReader:
    """Reads file content from a directory or generates synthetic content."""

    def __init__(self, spec: TransferSpec, chunk_size: int):
        self.source = spec.source
        self.chunk_size = chunk_size

    async def open(self, entry: ManifestEntry):
        """File handle for a directory source, None for synthetic content.

        Raises:
            OSError: The source file vanished or cannot be read
        """
        if isinstance(self.source, SyntheticSource):
            return None
        return await asyncio.to_thread(open, Path(self.source.root) / entry.path, "rb")

    async def blocks(self, file_index: int, entry: ManifestEntry, handle):
        if handle is None:
            stream = ContentStream(self.source.spec.content_seed, file_index)
            remaining = entry.size
            while remaining > 0:
                block = await asyncio.to_thread(stream.read, min(self.chunk_size, remaining))
                remaining -= len(block)
                yield block
            return
        while True:
            block = await asyncio.to_thread(handle.read, self.chunk_size)
            if not block:
                return
            yield block


class _BulkStream(_StreamWorker):
    def __init__(self, session: _Session, index: int, files: List[Tuple[int, ManifestEntry]], reader: _BlockReader):
        super().__init__(session, index)
        self.entries = dict(files)
        self.order = {file_index: n for n, (file_index, _) in enumerate(files)}
        self.pending: Deque[int] = collections.deque(file_index for file_index, _ in files)
        self.resent: Set[int] = set()
        self.reader = reader

    async def _produce(self, writer, acks):
        while True:
            if acks.done():
                acks.result()
                raise ProtocolError("receiver closed the stream early")
            if self.pending:
                file_index = self.pending.popleft()
                self.inflight[file_index] = self.entries[file_index].path
                await self._send_file(writer, file_index)
            elif self.inflight:
                await self._wait_for_acks(acks)
            else:
                return

    async def _send_file(self, writer, file_index: int):
        entry = self.entries[file_index]
        try:
            handle = await self.reader.open(entry)
        except OSError as e:
            logger.error(f"Cannot read {entry.path}: {e}")
            self.inflight.pop(file_index, None)
            self.failed.append(entry.path)
            return

        write_frame(writer, FrameType.FILE_OPEN, protocol.encode_file_open(file_index, entry.size, entry.path))
        offset = 0
        digest = bytes.fromhex(entry.digest) if self.session.spec.verify else NO_DIGEST
        try:
            async for block in self.reader.blocks(file_index, entry, handle):
                _send_chunk(writer, file_index, offset, block)
                offset += len(block)
                await writer.drain()
        except CONNECTION_ERRORS:
            raise
        except OSError as e:
            # A short close makes the receiver reject the file with SIZE
            logger.error(f"Read of {entry.path} failed at byte {offset}: {e}")
            digest = NO_DIGEST
        finally:
            if handle is not None:
                handle.close()
        write_frame(writer, FrameType.FILE_CLOSE, protocol.encode_file_close(file_index, offset, digest))
        await writer.drain()

    def _on_ack(self, index: int):
        self.files_ok += 1
        self.bytes_ok += self.entries[index].size

    def _on_nack(self, index: int, path: str, reason: NackReason, detail: str):
        if reason == NackReason.DIGEST and index not in self.resent:
            self.resent.add(index)
            self.retries += 1
            logger.warning(f"Digest mismatch on {path}; sending it again")
            self.pending.append(index)
            return
        logger.error(f"File {path} failed: {reason.name} {detail}")
        self.failed.append(path)

    def _requeue_after_loss(self):
        lost = sorted(self.inflight, key=self.order.__getitem__)
        self.inflight.clear()
        self.pending.extendleft(reversed(lost))

    def _fail_remaining(self, why: str):
        for file_index in list(self.inflight) + list(self.pending):
            self.failed.append(self.entries[file_index].path)
        self.inflight.clear()
        self.pending.clear()


def _check_bulk_source(spec: TransferSpec, manifest: DatasetManifest):
    if not isinstance(spec.source, DirectorySource):
        return
    root = Path(spec.source.root)
    problems = []
    for entry in manifest.entries:
        try:
            size = (root / entry.path).stat().st_size
        except OSError:
            problems.append(f"{entry.path} missing")
            continue
        if size != entry.size:
            problems.append(f"{entry.path} is {size} bytes, manifest says {entry.size}")
        if len(problems) >= 5:
            break
    if problems:
        raise TransferError(f"source does not match the manifest: {'; '.join(problems)}")


async def transfer(
    spec: TransferSpec,
    manifest: DatasetManifest,
    tls_context: Optional[ssl.SSLContext] = None,
    connect_timeout: float = 10.0,
) -> TransferResult:
    """Move a dataset that is fully at rest at the source.

    Args:
        spec: Transfer parameters (bulk mode)
        manifest: Files to send with their sizes and digests
        tls_context: Client SSL context; the lab certificate is used when omitted
        connect_timeout: Seconds allowed per connection attempt

    Returns:
        Measured result; throughput covers the first HELLO to the last ACK

    Raises:
        TransferError: Wrong mode, source mismatch or unreachable peer
    """
    if spec.mode != Mode.BULK:
        raise TransferError("transfer() moves bulk datasets; use transfer_streaming() for streaming mode")
    _check_bulk_source(spec, manifest)

    session = _Session(spec, manifest.digest, tls_context, connect_timeout)
    control_reader, control_writer = await session.connect(Role.CONTROL)
    try:
        write_frame(control_writer, FrameType.MANIFEST, protocol.encode_manifest(len(manifest), manifest.total_bytes))
        await control_writer.drain()

        reader = _BlockReader(spec, session.chunk_size)
        plan = schedule_lpt([e.size for e in manifest.entries], spec.stream_count)
        workers = [
            _BulkStream(session, stream, [(i, manifest.entries[i]) for i in files], reader)
            for stream, files in enumerate(plan)
            if files
        ]
        logger.info(
            f"Sending {len(manifest)} files ({manifest.total_bytes} bytes) over {len(workers)} stream(s) "
            f"to {spec.peer_address}"
        )
        await asyncio.gather(*(w.run() for w in workers))
        summary = await session.close_control(control_reader, control_writer)
    except CONNECTION_ERRORS as e:
        raise TransferError(f"control connection to {spec.peer_address} lost: {e!r}") from e
    except OSError as e:
        raise TransferError(f"reading the source failed: {e}") from e
    finally:
        await _close_quietly(control_writer)

    per_stream = [0] * spec.stream_count
    for w in workers:
        per_stream[w.index] = w.bytes_ok
    result = TransferResult.build(
        bytes_moved=sum(per_stream),
        wall_time=session.wall_time,
        files_ok=sum(w.files_ok for w in workers),
        failed_files=[path for w in workers for path in w.failed],
        per_stream_bytes=per_stream,
        verified=spec.verify,
        retries=sum(w.retries for w in workers),
    )
    logger.info(
        f"Transfer finished: {result.bytes_moved} bytes in {result.wall_time:.3f}s "
        f"({result.throughput / 1e9:.3f} Gbps), {result.files_failed} failed; receiver saw {summary.get('files_ok')}"
    )
    return result


# --- streaming ------------------------------------------------------------


@dataclass
class _GrowingFile:
    path: str
    full_path: Path
    sent: int = 0
    digest: "hashlib._Hash" = field(default_factory=hashlib.sha256)
    opened: bool = False
    closed: bool = False
    done: bool = False
    shrunk: bool = False

    def reset(self):
        self.sent = 0
        self.digest = hashlib.sha256()
        self.opened = False


_SYNC = "sync"
_CLOSE = "close"
_FINISH = "finish"


class _StreamingStream(_StreamWorker):
    def __init__(self, session: _Session, index: int):
        super().__init__(session, index)
        self.files: Dict[int, _GrowingFile] = {}
        self.assigned_bytes = 0
        self.commands: Deque[Tuple[str, int]] = collections.deque()
        self._more = asyncio.Event()
        self.resent: Set[int] = set()
        self.finishing = False

    def track(self, file_index: int, path: str, full_path: Path):
        self.files[file_index] = _GrowingFile(path, full_path)

    def enqueue(self, command: str, file_index: int = -1):
        if command == _FINISH:
            self.finishing = True
        self.commands.append((command, file_index))
        self._more.set()

    def fail_unfinished(self):
        """Count files this stream never got to deliver (it died early)."""
        for growing in self.files.values():
            if not growing.done:
                growing.done = True
                self.failed.append(growing.path)

    async def _next_command(self, acks: asyncio.Task) -> Tuple[str, int]:
        while not self.commands:
            self._more.clear()
            waiter = asyncio.create_task(self._more.wait())
            try:
                await asyncio.wait({waiter, acks}, return_when=asyncio.FIRST_COMPLETED)
            finally:
                waiter.cancel()
            if acks.done():
                acks.result()
                raise ProtocolError("receiver closed the stream early")
        return self.commands.popleft()

    async def _produce(self, writer, acks):
        while True:
            command, file_index = await self._next_command(acks)
            if command == _FINISH:
                if self.inflight:
                    # Re-sends queued by a NACK go in front of the marker.
                    self.commands.appendleft((command, file_index))
                    await self._wait_for_acks(acks)
                    continue
                return
            growing = self.files[file_index]
            if growing.done or (command == _CLOSE and file_index in self.inflight):
                continue
            await self._sync(writer, file_index, growing)
            if command == _CLOSE:
                growing.closed = True
                self.inflight[file_index] = growing.path
                write_frame(
                    writer,
                    FrameType.FILE_CLOSE,
                    protocol.encode_file_close(file_index, growing.sent, growing.digest.digest()),
                )
                await writer.drain()

    async def _sync(self, writer, file_index: int, growing: _GrowingFile):
        """Send everything appended since the last sync, then a growth mark."""
        if not growing.opened:
            write_frame(writer, FrameType.FILE_OPEN, protocol.encode_file_open(file_index, None, growing.path))
            growing.opened = True
        try:
            size = (await asyncio.to_thread(growing.full_path.stat)).st_size
        except FileNotFoundError:
            size = 0
        if size < growing.sent:
            growing.shrunk = True
            write_frame(writer, FrameType.GROWTH_MARK, protocol.encode_growth_mark(file_index, size))
            await writer.drain()
            return
        if size > growing.sent:
            try:
                await self._send_appended(writer, file_index, growing, size)
            except CONNECTION_ERRORS:
                raise
            except OSError as e:
                # Picked up again on the next sync
                logger.warning(f"Cannot read {growing.path} past byte {growing.sent}: {e}")
        write_frame(writer, FrameType.GROWTH_MARK, protocol.encode_growth_mark(file_index, growing.sent))
        await writer.drain()

    async def _send_appended(self, writer, file_index: int, growing: _GrowingFile, size: int):
        handle = await asyncio.to_thread(open, growing.full_path, "rb")
        try:
            await asyncio.to_thread(handle.seek, growing.sent)
            while growing.sent < size:
                block = await asyncio.to_thread(handle.read, min(self.session.chunk_size, size - growing.sent))
                if not block:
                    break
                growing.digest.update(block)
                _send_chunk(writer, file_index, growing.sent, block)
                growing.sent += len(block)
                await writer.drain()
        finally:
            handle.close()

    def _on_ack(self, index: int):
        growing = self.files[index]
        growing.done = True
        self.files_ok += 1
        self.bytes_ok += growing.sent

    def _on_nack(self, index: int, path: str, reason: NackReason, detail: str):
        growing = self.files[index]
        if reason == NackReason.DIGEST and index not in self.resent:
            self.resent.add(index)
            self.retries += 1
            logger.warning(f"Digest mismatch on {path}; sending it again")
            growing.reset()
            self.commands.appendleft((_CLOSE, index))
            return
        growing.done = True
        logger.error(f"File {path} failed: {reason.name} {detail}")
        self.failed.append(path)

    def _requeue_after_loss(self):
        self.inflight.clear()
        resync = []
        for file_index, growing in self.files.items():
            if growing.done:
                continue
            growing.reset()
            resync.append((_CLOSE if growing.closed else _SYNC, file_index))
        self.commands.extendleft(reversed(resync))
        if self.finishing and (_FINISH, -1) not in self.commands:
            self.commands.append((_FINISH, -1))

    def _fail_remaining(self, why: str):
        for growing in self.files.values():
            if not growing.done:
                growing.done = True
                self.failed.append(growing.path)
        self.inflight.clear()
        self.commands.clear()


def _scan_sizes(root: Path) -> Dict[str, Tuple[Path, int]]:
    sizes = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name.startswith(".wanbench-") or name.endswith(".part"):
                continue
            full = Path(dirpath) / name
            try:
                sizes[full.relative_to(root).as_posix()] = (full, full.stat().st_size)
            except FileNotFoundError:
                continue
    return sizes


async def transfer_streaming(
    spec: TransferSpec,
    watch_root: Path,
    quiescence: float,
    done: Optional[asyncio.Event] = None,
    tls_context: Optional[ssl.SSLContext] = None,
    poll_interval: float = 0.05,
    connect_timeout: float = 10.0,
) -> TransferResult:
    """Move files while they are still being written.

    The session ends when `done` is set, when the end-of-source marker
    appears in watch_root, or when nothing has grown for `quiescence`
    seconds, whichever happens first.

    Args:
        spec: Transfer parameters (streaming mode, directory source)
        watch_root: Directory the writer is filling
        quiescence: Idle seconds that end the session
        done: Optional event the writer sets when it has finished
        tls_context: Client SSL context; the lab certificate is used when omitted
        poll_interval: Seconds between directory scans
        connect_timeout: Seconds allowed per connection attempt

    Returns:
        Measured result; digests are computed by the sender while reading

    Raises:
        TransferError: Wrong mode, missing watch root or unreachable peer
    """
    if spec.mode != Mode.STREAMING:
        raise TransferError("transfer_streaming() needs a streaming-mode spec")
    watch_root = Path(watch_root)
    if not watch_root.is_dir():
        raise TransferError(f"watch root {watch_root} does not exist")

    loop = asyncio.get_running_loop()
    session = _Session(spec, NO_DIGEST, tls_context, connect_timeout)
    control_reader, control_writer = await session.connect(Role.CONTROL)
    workers = [_StreamingStream(session, i) for i in range(spec.stream_count)]
    tasks = [asyncio.create_task(w.run()) for w in workers]
    known: Dict[str, Tuple[int, _StreamingStream, int]] = {}

    async def scan() -> bool:
        grew = False
        sizes = await asyncio.to_thread(_scan_sizes, watch_root)
        for rel, (full, size) in sizes.items():
            if rel not in known:
                alive = [w for w, t in zip(workers, tasks) if not t.done()] or workers
                worker = min(alive, key=lambda w: (w.assigned_bytes, w.index))
                file_index = len(known)
                worker.track(file_index, rel, full)
                known[rel] = (file_index, worker, -1)
            file_index, worker, last = known[rel]
            if size != last:
                worker.assigned_bytes += max(0, size - max(last, 0))
                worker.enqueue(_SYNC, file_index)
                known[rel] = (file_index, worker, size)
                grew = True
        return grew

    try:
        last_growth = loop.time()
        while True:
            if await scan():
                last_growth = loop.time()
            for task in tasks:
                if task.done():
                    task.result()
            if done is not None and done.is_set():
                break
            if (watch_root / END_OF_SOURCE_MARKER).exists():
                break
            if loop.time() - last_growth >= quiescence:
                logger.info(f"No growth under {watch_root} for {quiescence}s; ending the session")
                break
            await asyncio.sleep(poll_interval)

        await scan()
        for file_index, worker, _ in known.values():
            worker.enqueue(_CLOSE, file_index)
        for worker in workers:
            worker.enqueue(_FINISH)
        await asyncio.gather(*tasks)
        for worker in workers:
            worker.fail_unfinished()

        write_frame(control_writer, FrameType.END_OF_SOURCE)
        await control_writer.drain()
        await session.close_control(control_reader, control_writer)
    except CONNECTION_ERRORS as e:
        raise TransferError(f"control connection to {spec.peer_address} lost: {e!r}") from e
    except OSError as e:
        raise TransferError(f"reading the source failed: {e}") from e
    finally:
        for task in tasks:
            if not task.done():
                task.cancel()
        await _close_quietly(control_writer)

    per_stream = [w.bytes_ok for w in workers]
    result = TransferResult.build(
        bytes_moved=sum(per_stream),
        wall_time=session.wall_time,
        files_ok=sum(w.files_ok for w in workers),
        failed_files=[path for w in workers for path in w.failed],
        per_stream_bytes=per_stream,
        verified=True,
        retries=sum(w.retries for w in workers),
    )
    logger.info(
        f"Streaming session finished: {len(known)} files, {result.bytes_moved} bytes, "
        f"{result.files_failed} failed"
    )
    return result
