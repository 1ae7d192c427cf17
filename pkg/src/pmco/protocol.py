"""Client/edge wire protocol.

Every message is a frame: a 1-byte opcode, a 4-byte big-endian payload
length, then the payload.  Control payloads are UTF-8 JSON.  CKPT_PUSH and
CKPT_RESULT carry a 4-byte big-endian meta length, the JSON meta
(``app_id``, ``size``, ``migration_aware``, ``markerless`` and optionally
``interval_s``) and then ``size`` bytes of checkpoint image.

Session flow::

    client                          edge
    HELLO {client_id, arch, platforms}  ->
                                    <-  ADMIT_OK {cost, mips, platforms} | ADMIT_REJECT {reason}
    PROBE_UP <n random bytes>       ->
                                    <-  PROBE_ACK {bytes}
    PROBE_DOWN {size}               ->
                                    <-  PROBE_DOWN <size random bytes>
    PROBE_ACK {bytes}               ->
    CKPT_PUSH <meta, image>         ->
                                    <-  PROBE_ACK {digest}        (image verified)
                                    <-  CKPT_RESULT <meta, image> | ERROR {reason, detail}
    BYE                             ->

CKPT_PUSH is acknowledged with PROBE_ACK because the opcode set is fixed.
"""

from __future__ import annotations

import enum
import json
import os
import random
import socket
import struct
import time
from dataclasses import dataclass, field, replace

from .checkpoint.image import CheckpointImage, decode
from .decision import GlobalPreferences
from .errors import (ConnectionReset, DigestMismatch, DigestRejected, ImageFormatError,
                     ProtocolError, ProtocolTimeout, QuotaExceeded, ServerError,
                     VersionUnsupported)

DEFAULT_PORT = 7420
PROBE_SIZE = 256 * 1024
MAX_PAYLOAD = 1 << 30
DEFAULT_TIMEOUT = 30.0
RESULT_TIMEOUT = 600.0

_HEADER = struct.Struct(">BI")
_META_LEN = struct.Struct(">I")
_CHUNK = 64 * 1024


class Op(enum.IntEnum):
    HELLO = 1
    ADMIT_OK = 2
    ADMIT_REJECT = 3
    PROBE_UP = 4
    PROBE_DOWN = 5
    PROBE_ACK = 6
    CKPT_PUSH = 7
    CKPT_RESULT = 8
    BYE = 9
    ERROR = 15


# ERROR / ADMIT_REJECT reasons
PLATFORM_UNAVAILABLE = "platform-unavailable"
ARCH_UNSUPPORTED = "arch-unsupported"
SERVER_BUSY = "server-busy"
NOT_ADMITTED = "not-admitted"
DIGEST_REJECTED = "digest-rejected"
QUOTA_EXCEEDED = "quota-exceeded"
RESTORE_FAILURE = "restore-failure"
PROTOCOL_VIOLATION = "protocol-violation"
INTERNAL_ERROR = "internal-error"


def default_port() -> int:
    return int(os.environ.get("PMCO_PORT", DEFAULT_PORT))


def parse_address(address: str, port: int | None = None) -> tuple[str, int]:
    host, sep, p = address.rpartition(":")
    if not sep:
        host, p = address, str(port or default_port())
    host = host.strip("[]") or "127.0.0.1"
    try:
        return host, int(p)
    except ValueError:
        raise ValueError(f"malformed address {address!r}") from None


@dataclass(frozen=True)
class Frame:
    op: Op
    payload: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "op", _opcode(self.op))
        if len(self.payload) > MAX_PAYLOAD:
            raise ProtocolError(f"payload of {len(self.payload)} bytes exceeds limit")

    def json(self) -> dict:
        try:
            return json.loads(self.payload.decode("utf-8")) if self.payload else {}
        except (UnicodeDecodeError, ValueError) as exc:
            raise ProtocolError(f"{self.op.name} payload is not JSON: {exc}") from None

    @classmethod
    def of(cls, op: Op, body: dict | None = None) -> "Frame":
        return cls(op, json.dumps(body or {}, sort_keys=True).encode("utf-8"))

    def __len__(self) -> int:
        return _HEADER.size + len(self.payload)


def _opcode(value: int) -> Op:
    try:
        return Op(value)
    except ValueError:
        raise ProtocolError(f"unknown opcode {value}") from None


def encode_frame(frame: Frame) -> bytes:
    return _HEADER.pack(frame.op, len(frame.payload)) + frame.payload


class FrameDecoder:
    """Incremental parser: feed arbitrary chunks, collect whole frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while len(self._buf) >= _HEADER.size:
            op, length = _HEADER.unpack_from(self._buf, 0)
            op = _opcode(op)
            if length > MAX_PAYLOAD:
                raise ProtocolError(f"frame length {length} exceeds limit")
            end = _HEADER.size + length
            if len(self._buf) < end:
                break
            frames.append(Frame(op, bytes(self._buf[_HEADER.size:end])))
            del self._buf[:end]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


def error_frame(reason: str, detail: str = "") -> Frame:
    return Frame.of(Op.ERROR, {"reason": reason, "detail": detail})


def raise_for_error(frame: Frame) -> None:
    if frame.op is not Op.ERROR:
        return
    body = frame.json()
    reason = body.get("reason", "unknown")
    detail = body.get("detail", "")
    if reason == QUOTA_EXCEEDED:
        raise QuotaExceeded(reason, detail)
    if reason == DIGEST_REJECTED:
        raise DigestRejected(reason, detail)
    raise ServerError(reason, detail)


class FrameStream:
    """Frames over a connected stream socket, with byte counters.

    ``rate_limit`` (bytes/s) paces outgoing data to emulate a slow link.
    After each :meth:`recv` the attributes ``first_byte_at`` and
    ``last_byte_at`` hold ``time.perf_counter`` stamps of the frame's
    arrival.
    """

    def __init__(self, sock: socket.socket, rate_limit: float | None = None,
                 timeout: float | None = DEFAULT_TIMEOUT):
        self.sock = sock
        self.rate_limit = rate_limit
        self.bytes_sent = 0
        self.bytes_received = 0
        self.first_byte_at = 0.0
        self.last_byte_at = 0.0
        self.closed = False
        sock.settimeout(timeout)
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass

    def settimeout(self, timeout: float | None) -> None:
        self.sock.settimeout(timeout)

    def send(self, frame: Frame) -> None:
        data = memoryview(encode_frame(frame))
        try:
            if not self.rate_limit:
                self.sock.sendall(data)
            else:
                start = time.perf_counter()
                for off in range(0, len(data), _CHUNK):
                    chunk = data[off:off + _CHUNK]
                    self.sock.sendall(chunk)
                    due = start + (off + len(chunk)) / self.rate_limit
                    delay = due - time.perf_counter()
                    if delay > 0:
                        time.sleep(delay)
        except socket.timeout:
            raise ProtocolTimeout("timed out sending frame") from None
        except OSError as exc:
            raise ConnectionReset(f"connection lost while sending: {exc}") from None
        self.bytes_sent += len(data)

    def _recv_into(self, view: memoryview) -> None:
        got = 0
        while got < len(view):
            try:
                n = self.sock.recv_into(view[got:])
            except socket.timeout:
                raise ProtocolTimeout("timed out waiting for data") from None
            except OSError as exc:
                raise ConnectionReset(f"connection lost while receiving: {exc}") from None
            if n == 0:
                raise ConnectionReset("peer closed the connection")
            got += n

    def recv(self) -> Frame:
        header = bytearray(_HEADER.size)
        self._recv_into(memoryview(header))
        self.first_byte_at = time.perf_counter()
        op, length = _HEADER.unpack(header)
        op = _opcode(op)
        if length > MAX_PAYLOAD:
            raise ProtocolError(f"frame length {length} exceeds limit")
        payload = bytearray(length)
        self._recv_into(memoryview(payload))
        self.last_byte_at = time.perf_counter()
        self.bytes_received += _HEADER.size + length
        return Frame(op, bytes(payload))

    def expect(self, *ops: Op) -> Frame:
        frame = self.recv()
        if frame.op in ops:
            return frame
        raise_for_error(frame)
        raise ProtocolError(f"expected {'/'.join(o.name for o in ops)}, got {frame.op.name}")

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


@dataclass(frozen=True)
class CkptMeta:
    app_id: str
    size: int
    migration_aware: bool
    markerless: bool = False
    interval_s: float | None = None

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise ProtocolError(f"{PROTOCOL_VIOLATION}: checkpoint size must be > 0")

    def to_dict(self) -> dict:
        d = {"app_id": self.app_id, "size": self.size,
             "migration_aware": self.migration_aware, "markerless": self.markerless}
        if self.interval_s is not None:
            d["interval_s"] = self.interval_s
        return d


def pack_checkpoint(op: Op, meta: CkptMeta, image: bytes) -> Frame:
    if len(image) != meta.size:
        raise ProtocolError(f"meta size {meta.size} does not match image of {len(image)} bytes")
    raw_meta = json.dumps(meta.to_dict(), sort_keys=True).encode("utf-8")
    return Frame(op, _META_LEN.pack(len(raw_meta)) + raw_meta + image)


def unpack_checkpoint(frame: Frame) -> tuple[CkptMeta, bytes]:
    payload = frame.payload
    if len(payload) < _META_LEN.size:
        raise ProtocolError(f"{PROTOCOL_VIOLATION}: checkpoint frame without meta")
    (meta_len,) = _META_LEN.unpack_from(payload, 0)
    end = _META_LEN.size + meta_len
    if len(payload) < end:
        raise ProtocolError(f"{PROTOCOL_VIOLATION}: truncated checkpoint meta")
    try:
        d = json.loads(payload[_META_LEN.size:end].decode("utf-8"))
        interval = d.get("interval_s")
        meta = CkptMeta(app_id=str(d["app_id"]), size=int(d["size"]),
                        migration_aware=bool(d["migration_aware"]),
                        markerless=bool(d.get("markerless", False)),
                        interval_s=None if interval is None else float(interval))
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"{PROTOCOL_VIOLATION}: bad checkpoint meta: {exc}") from None
    image = payload[end:]
    if len(image) != meta.size:
        raise ProtocolError(f"{PROTOCOL_VIOLATION}: meta says {meta.size} bytes, "
                            f"frame carries {len(image)}")
    return meta, image


@dataclass
class TransferStats:
    nbytes: int = 0
    seconds: float = 0.0
    started_at: float = 0.0
    ended_at: float = 0.0

    @property
    def throughput(self) -> float:
        return throughput(self.nbytes, self.seconds)


def throughput(nbytes: int, seconds: float) -> float:
    """Bytes per second; a zero duration is clamped to one microsecond."""
    return nbytes / max(seconds, 1e-6)


@dataclass
class Session:
    """An admitted client/edge connection as seen from the client."""

    stream: FrameStream
    address: str
    cost: float = 0.0
    edge_mips: float | None = None
    platforms: tuple[str, ...] = ()
    prefs: GlobalPreferences | None = None
    admitted: bool = False
    last_upload: TransferStats = field(default_factory=TransferStats)
    last_download: TransferStats = field(default_factory=TransferStats)

    @property
    def connected(self) -> bool:
        return not self.stream.closed

    def close(self, bye: bool = True) -> None:
        if self.stream.closed:
            return
        if bye:
            try:
                self.stream.send(Frame(Op.BYE))
            except ProtocolError:
                pass
        self.stream.close()

    def _update(self, **changes) -> None:
        if self.prefs is not None:
            self.prefs = replace(self.prefs, **changes)


_PROBE_CACHE: dict[int, bytes] = {}


def probe_payload(size: int = PROBE_SIZE) -> bytes:
    """Fixed pseudo-random bytes (seed 0) so probes cannot be compressed away."""
    if size not in _PROBE_CACHE:
        _PROBE_CACHE[size] = random.Random(0).randbytes(size)
    return _PROBE_CACHE[size]


def probe_bandwidth(session: Session, direction: str, size: int = PROBE_SIZE) -> float:
    """Measure uplink (``"up"``) or downlink (``"down"``) throughput in bytes/s.

    The live preferences of the session are updated with the result.
    """
    if not session.admitted:
        raise ProtocolError("bandwidth probes need an admitted session")
    stream = session.stream
    if direction == "up":
        start = time.perf_counter()
        stream.send(Frame(Op.PROBE_UP, probe_payload(size)))
        stream.expect(Op.PROBE_ACK)
        elapsed = time.perf_counter() - start
        bw = throughput(size, elapsed)
        session._update(uplink=bw)
    elif direction == "down":
        start = time.perf_counter()
        stream.send(Frame.of(Op.PROBE_DOWN, {"size": size}))
        frame = stream.expect(Op.PROBE_DOWN)
        elapsed = stream.last_byte_at - start
        if len(frame.payload) != size:
            raise ProtocolError(f"download probe returned {len(frame.payload)} of {size} bytes")
        stream.send(Frame.of(Op.PROBE_ACK, {"bytes": size}))
        bw = throughput(size, elapsed)
        session._update(downlink=bw)
    else:
        raise ValueError(f"direction must be 'up' or 'down', not {direction!r}")
    return bw


def send_checkpoint(session: Session, meta: CkptMeta, image: CheckpointImage | bytes) -> float:
    """Push an image and wait for the edge to acknowledge its digest.

    Returns the achieved upload throughput and refreshes the session's
    uplink estimate.
    """
    raw = image.encode() if isinstance(image, CheckpointImage) else bytes(image)
    frame = pack_checkpoint(Op.CKPT_PUSH, meta, raw)
    stream = session.stream
    start = time.perf_counter()
    stream.send(frame)
    ack = stream.expect(Op.PROBE_ACK)
    end = time.perf_counter()
    expected = image.meta.state_digest if isinstance(image, CheckpointImage) else None
    if expected is not None and ack.json().get("digest") != expected:
        raise DigestRejected(DIGEST_REJECTED, "edge acknowledged a different digest")
    session.last_upload = TransferStats(len(frame), end - start, start, end)
    bw = session.last_upload.throughput
    session._update(uplink=bw)
    return bw


def recv_checkpoint(session: Session, timeout: float | None = RESULT_TIMEOUT
                    ) -> tuple[CkptMeta, CheckpointImage, float]:
    """Block for the CKPT_RESULT of the last push; verify and decode it."""
    stream = session.stream
    stream.settimeout(timeout)
    try:
        frame = stream.expect(Op.CKPT_RESULT)
    finally:
        stream.settimeout(DEFAULT_TIMEOUT)
    meta, raw = unpack_checkpoint(frame)
    try:
        image = decode(raw)
    except (DigestMismatch, ImageFormatError, VersionUnsupported) as exc:
        raise DigestRejected(DIGEST_REJECTED, f"result image rejected: {exc}") from None
    session.last_download = TransferStats(len(frame), stream.last_byte_at - stream.first_byte_at,
                                          stream.first_byte_at, stream.last_byte_at)
    bw = session.last_download.throughput
    session._update(downlink=bw)
    return meta, image, bw
