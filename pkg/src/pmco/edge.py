"""Edge server: admission control, service-time quotas and the offloading service loop."""

from __future__ import annotations

import argparse
import collections
import configparser
import logging
import os
import socketserver
import sys
import threading
import time
from dataclasses import dataclass, field

from . import tasks
from .checkpoint import CheckpointImage, Coordinator, Finished, decode
from .errors import (CheckpointError, ConnectionReset, DigestMismatch, ImageFormatError,
                     PMCOError, ProtocolError, RegistryParseError, RestoreFailure,
                     VersionUnsupported, WorkerCrash)
from .protocol import (ARCH_UNSUPPORTED, DIGEST_REJECTED, INTERNAL_ERROR, NOT_ADMITTED,
                       PLATFORM_UNAVAILABLE, PROTOCOL_VIOLATION, QUOTA_EXCEEDED,
                       RESTORE_FAILURE, SERVER_BUSY, CkptMeta, Frame, FrameStream, Op,
                       default_port, error_frame, pack_checkpoint, probe_payload,
                       unpack_checkpoint)

log = logging.getLogger(__name__)

PORTABLE_ARCH = "portable"
MAX_PROBE = 64 * 1024 * 1024


@dataclass(frozen=True)
class AdmissionPolicy:
    """What the edge can host and how much service a client may use.

    The quota is ``quota_s`` seconds of service per client in each window of
    ``quota_window_s`` seconds.  ``cost`` and ``mips`` are advertised to
    clients in ADMIT_OK.
    """

    supported_platforms: frozenset[str] = frozenset(t.platform for t in tasks.CATALOG.values())
    emulatable_archs: frozenset[str] = frozenset({PORTABLE_ARCH})
    queue: str = "fifo"
    quota_s: float = 60.0
    quota_window_s: float = 3600.0
    max_sessions: int = 4
    cost: float = 1.0
    mips: float = 2200.0
    default_interval_s: float = 1.0
    admit_timeout_s: float = 60.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "supported_platforms", frozenset(self.supported_platforms))
        object.__setattr__(self, "emulatable_archs", frozenset(self.emulatable_archs))
        if self.queue.lower() != "fifo":
            raise ValueError(f"unsupported queue discipline {self.queue!r}")
        if not self.quota_s > 0:
            raise ValueError("quota_s must be > 0")
        if not self.quota_window_s > 0:
            raise ValueError("quota_window_s must be > 0")
        if self.max_sessions < 1:
            raise ValueError("max_sessions must be >= 1")

    def check(self, hello: dict) -> str | None:
        """Rejection reason for a HELLO body, or None when it is acceptable."""
        if hello.get("arch") not in self.emulatable_archs:
            return ARCH_UNSUPPORTED
        required = set(hello.get("platforms") or ())
        if not required <= self.supported_platforms:
            return PLATFORM_UNAVAILABLE
        return None


def _tags(raw: str) -> frozenset[str]:
    return frozenset(t.strip() for t in raw.split(",") if t.strip())


def load_policy(path: str | os.PathLike) -> AdmissionPolicy:
    """Read a ``[policy]`` section written in the registry's key/value format."""
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise RegistryParseError(str(exc), getattr(exc, "lineno", None)) from None
    if "policy" not in parser:
        raise RegistryParseError("missing [policy] section")
    sec = parser["policy"]
    kwargs: dict = {}
    for key, raw in sec.items():
        if key in ("supported_platforms", "emulatable_archs"):
            kwargs[key] = _tags(raw)
        elif key == "queue":
            kwargs[key] = raw.strip()
        elif key == "max_sessions":
            kwargs[key] = int(raw)
        elif key in ("quota_s", "quota_window_s", "cost", "mips", "default_interval_s",
                     "admit_timeout_s"):
            kwargs[key] = float(raw)
        else:
            raise RegistryParseError(f"unknown policy key {key!r}")
    return AdmissionPolicy(**kwargs)


class SessionLedger:
    """Accumulated service seconds per client and quota window."""

    def __init__(self, window_s: float = 3600.0, clock=time.monotonic):
        self.window_s = window_s
        self.clock = clock
        self._origin = clock()
        self._used: dict[tuple[str, int], float] = collections.defaultdict(float)
        self._starts: dict[str, list[float]] = collections.defaultdict(list)
        self._lock = threading.Lock()

    def _window(self) -> int:
        return int((self.clock() - self._origin) // self.window_s)

    def start(self, client_id: str) -> float:
        now = self.clock()
        with self._lock:
            self._starts[client_id].append(now)
        return now

    def charge(self, client_id: str, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("service time cannot be negative")
        with self._lock:
            key = (client_id, self._window())
            self._used[key] += seconds
            return self._used[key]

    def used(self, client_id: str) -> float:
        with self._lock:
            return self._used.get((client_id, self._window()), 0.0)

    def over_quota(self, client_id: str, quota_s: float) -> bool:
        return self.used(client_id) >= quota_s

    def starts(self, client_id: str) -> list[float]:
        with self._lock:
            return list(self._starts[client_id])


class AdmissionQueue:
    """Counting slot pool whose waiters are served strictly first come, first served."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.active = 0
        self._waiters: collections.deque = collections.deque()
        self._cond = threading.Condition()

    def acquire(self, timeout: float | None = None) -> bool:
        me = object()
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            self._waiters.append(me)
            while not (self._waiters[0] is me and self.active < self.capacity):
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    self._waiters.remove(me)
                    self._cond.notify_all()
                    return False
                self._cond.wait(remaining)
            self._waiters.popleft()
            self.active += 1
            self._cond.notify_all()
            return True

    def release(self) -> None:
        with self._cond:
            if self.active <= 0:
                raise RuntimeError("release without acquire")
            self.active -= 1
            self._cond.notify_all()

    @property
    def waiting(self) -> int:
        with self._cond:
            return len(self._waiters)


@dataclass
class EdgeStats:
    admissions: list[str] = field(default_factory=list)
    rejections: list[tuple[str, str]] = field(default_factory=list)
    served: list[str] = field(default_factory=list)
    last_interval_images: int = 0
    errors: list[str] = field(default_factory=list)


class EdgeService:
    """State shared by all sessions of one edge server."""

    def __init__(self, policy: AdmissionPolicy | None = None, slowdown: float = 1.0,
                 coordinator: Coordinator | None = None):
        self.policy = policy or AdmissionPolicy()
        self.coordinator = coordinator or Coordinator(slowdown=slowdown)
        self.ledger = SessionLedger(self.policy.quota_window_s)
        self.slots = AdmissionQueue(self.policy.max_sessions)
        self.stats = EdgeStats()
        self._lock = threading.Lock()

    def _note(self, attr: str, value) -> None:
        with self._lock:
            getattr(self.stats, attr).append(value)

    def admit(self, hello: dict, timeout: float | None = None) -> Frame:
        """ADMIT_OK once a slot is free (FIFO), or ADMIT_REJECT with a reason."""
        client_id = str(hello.get("client_id", "?"))
        reason = self.policy.check(hello)
        if reason is None and not self.slots.acquire(
                self.policy.admit_timeout_s if timeout is None else timeout):
            reason = SERVER_BUSY
        if reason is not None:
            self._note("rejections", (client_id, reason))
            return Frame.of(Op.ADMIT_REJECT, {"reason": reason})
        self._note("admissions", client_id)
        return Frame.of(Op.ADMIT_OK, {"cost": self.policy.cost, "mips": self.policy.mips,
                                      "platforms": sorted(self.policy.supported_platforms)})

    def service(self, meta: CkptMeta, image: CheckpointImage) -> CheckpointImage:
        """Restart an offloaded image and produce the image to send back."""
        coord = self.coordinator
        if meta.migration_aware:
            handle = coord.restart(image, return_mode=True, aware=True)
        else:
            interval = meta.interval_s or self.policy.default_interval_s
            handle = coord.restart(image, interval_s=interval, return_mode=True, aware=False)
        try:
            out = coord.wait(handle)
        finally:
            coord.kill(handle)
        with self._lock:
            self.stats.last_interval_images = handle.images_taken
        if isinstance(out, Finished):
            raise CheckpointError("worker finished without handing back an image")
        return out

    def serve_session(self, stream: FrameStream) -> None:
        """Serve one client connection until BYE, disconnect or quota violation."""
        admitted = False
        client_id = None
        try:
            while True:
                try:
                    frame = stream.recv()
                except ConnectionReset:
                    return
                except ProtocolError as exc:
                    stream.send(error_frame(PROTOCOL_VIOLATION, str(exc)))
                    return
                op = frame.op
                if op is Op.BYE:
                    return
                if op is Op.HELLO:
                    if admitted:
                        stream.send(error_frame(PROTOCOL_VIOLATION, "already admitted"))
                        continue
                    hello = frame.json()
                    reply = self.admit(hello)
                    stream.send(reply)
                    if reply.op is Op.ADMIT_OK:
                        admitted = True
                        client_id = str(hello.get("client_id", "?"))
                    continue
                if not admitted:
                    # nothing from an unadmitted connection is ever restarted
                    stream.send(error_frame(NOT_ADMITTED, f"{op.name} before admission"))
                    continue
                if op is Op.PROBE_UP:
                    stream.send(Frame.of(Op.PROBE_ACK, {"bytes": len(frame.payload)}))
                elif op is Op.PROBE_DOWN:
                    size = int(frame.json().get("size", 0))
                    if not 0 < size <= MAX_PROBE:
                        stream.send(error_frame(PROTOCOL_VIOLATION, f"bad probe size {size}"))
                        continue
                    stream.send(Frame(Op.PROBE_DOWN, probe_payload(size)))
                elif op is Op.PROBE_ACK:
                    pass
                elif op is Op.CKPT_PUSH:
                    if not self._serve_push(stream, frame, client_id):
                        return
                else:
                    stream.send(error_frame(PROTOCOL_VIOLATION, f"unexpected {op.name}"))
        except (ConnectionReset, ProtocolError) as exc:
            log.debug("session %s ended: %s", client_id, exc)
        finally:
            if admitted:
                self.slots.release()
            stream.close()

    def _serve_push(self, stream: FrameStream, frame: Frame, client_id: str) -> bool:
        if self.ledger.over_quota(client_id, self.policy.quota_s):
            stream.send(error_frame(QUOTA_EXCEEDED,
                                    f"{self.ledger.used(client_id):.3f} s used of "
                                    f"{self.policy.quota_s:.3f} s"))
            return False
        try:
            meta, raw = unpack_checkpoint(frame)
        except ProtocolError as exc:
            stream.send(error_frame(PROTOCOL_VIOLATION, str(exc)))
            return True
        try:
            image = decode(raw)
        except (DigestMismatch, ImageFormatError, VersionUnsupported) as exc:
            self._note("errors", DIGEST_REJECTED)
            stream.send(error_frame(DIGEST_REJECTED, str(exc)))
            return True
        stream.send(Frame.of(Op.PROBE_ACK, {"digest": image.meta.state_digest}))

        started = self.ledger.start(client_id)
        try:
            result = self.service(meta, image)
        except RestoreFailure as exc:
            self._note("errors", RESTORE_FAILURE)
            stream.send(error_frame(RESTORE_FAILURE, str(exc)))
            return True
        except (WorkerCrash, CheckpointError, PMCOError) as exc:
            self._note("errors", INTERNAL_ERROR)
            stream.send(error_frame(INTERNAL_ERROR, str(exc)))
            return True
        finally:
            self.ledger.charge(client_id, self.ledger.clock() - started)
        raw_out = result.encode()
        out_meta = CkptMeta(app_id=meta.app_id, size=len(raw_out),
                            migration_aware=meta.migration_aware, markerless=meta.markerless)
        stream.send(pack_checkpoint(Op.CKPT_RESULT, out_meta, raw_out))
        self._note("served", meta.app_id)
        return True


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        self.server.service.serve_session(FrameStream(self.request, timeout=None))


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class EdgeServer:
    """Threaded TCP edge server; ``port=0`` picks a free port."""

    def __init__(self, policy: AdmissionPolicy | None = None, host: str = "127.0.0.1",
                 port: int | None = None, slowdown: float = 1.0,
                 coordinator: Coordinator | None = None):
        self.service = EdgeService(policy, slowdown=slowdown, coordinator=coordinator)
        self._server = _TCPServer((host, default_port() if port is None else port), _Handler)
        self._server.service = self.service
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    @property
    def stats(self) -> EdgeStats:
        return self.service.stats

    def start(self) -> "EdgeServer":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        kwargs={"poll_interval": 0.05}, daemon=True,
                                        name="pmco-edge")
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever(poll_interval=0.2)

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self.service.coordinator.shutdown()
        if self._thread is not None:
            self._thread.join(5)

    def __enter__(self) -> "EdgeServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="pmco-edge", description="Run a PMCO edge server.")
    ap.add_argument("--policy", help="policy file ([policy] section)")
    ap.add_argument("--host", default="0.0.0.0")
    ap.add_argument("--port", type=int, default=None,
                    help=f"listen port (default $PMCO_PORT or {default_port()})")
    ap.add_argument("--slowdown", type=float, default=1.0,
                    help="stretch worker compute by this factor")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        policy = load_policy(args.policy) if args.policy else AdmissionPolicy()
    except (OSError, ValueError, PMCOError) as exc:
        print(f"pmco-edge: {exc}", file=sys.stderr)
        return 2
    server = EdgeServer(policy, host=args.host, port=args.port, slowdown=args.slowdown)
    log.info("edge server listening on %s (max %d sessions, quota %.0f s / %.0f s)",
             server.address, policy.max_sessions, policy.quota_s, policy.quota_window_s)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
