"""Client agent: server selection, bandwidth probing and the offloading loop."""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import socket
import sys
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Iterator

from . import registry as reg_mod
from . import tasks
from .checkpoint import CheckpointImage, Coordinator, Finished
from .decision import AppPreferences, GlobalPreferences, OffloadFlag, offload_benefit, should_offload
from .edge import PORTABLE_ARCH
from .errors import (AllRejected, CheckpointError, PMCOError, ProtocolError, ServerError,
                     TaskFinishedFirst, Unreachable)
from .protocol import (DEFAULT_TIMEOUT, CkptMeta, Frame, FrameStream, Op, Session, parse_address,
                       probe_bandwidth, recv_checkpoint, send_checkpoint)

log = logging.getLogger(__name__)

LOCAL = "local"
OFFLOADED = "offloaded"
FORCED = "forced"
FALLBACK = "fallback"

PHASES = ("compute", "checkpoint", "upload", "remote", "download", "restart")


@dataclass(frozen=True)
class ServerDescriptor:
    address: str
    cost: float | None = None
    edge_mips: float | None = None
    platforms: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        parse_address(self.address)


@dataclass
class OffloadOutcome:
    app_id: str
    mode_taken: str
    result: bytes
    timings: dict[str, float] = field(default_factory=lambda: dict.fromkeys(PHASES, 0.0))
    total_s: float = 0.0
    bytes_up: int = 0
    bytes_down: int = 0
    decision_benefit: float | None = None
    error: str | None = None

    @property
    def offloaded(self) -> bool:
        return self.mode_taken in (OFFLOADED, FORCED)


def load_servers(path) -> list[ServerDescriptor]:
    """Candidate list: ``[server:<name>]`` sections with an ``address`` key, in file order."""
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    out = []
    for name in parser.sections():
        if not name.startswith("server:"):
            continue
        sec = parser[name]
        out.append(ServerDescriptor(address=sec["address"].strip()))
    return out


def hello_body(client_id: str, apps: list[AppPreferences] | None = None) -> dict:
    platforms = sorted({tasks.platform_of(a.task) for a in apps or [] if a.task in tasks.CATALOG})
    return {"client_id": client_id, "arch": PORTABLE_ARCH, "platforms": platforms}


def _connect(address: str, hello: dict, timeout: float) -> tuple[Session | None, str | None]:
    host, port = parse_address(address)
    sock = socket.create_connection((host, port), timeout=timeout)
    stream = FrameStream(sock, timeout=timeout)
    try:
        stream.send(Frame.of(Op.HELLO, hello))
        reply = stream.expect(Op.ADMIT_OK, Op.ADMIT_REJECT)
    except (ProtocolError, ServerError):
        stream.close()
        raise
    body = reply.json()
    if reply.op is Op.ADMIT_REJECT:
        stream.close()
        return None, str(body.get("reason", "rejected"))
    stream.settimeout(DEFAULT_TIMEOUT)
    return Session(stream=stream, address=address, cost=float(body.get("cost", 0.0)),
                   edge_mips=body.get("mips"), platforms=tuple(body.get("platforms", ())),
                   admitted=True), None


def select_server(candidates: list[ServerDescriptor | str], hello: dict,
                  max_cost: float = float("inf"), timeout: float = 10.0) -> Session:
    """Admitted candidate with the lowest advertised cost not above ``max_cost``.

    Ties go to the earlier candidate.  Sessions that are not chosen get BYE.
    """
    sessions: list[Session] = []
    reasons: dict[str, str] = {}
    unreachable = 0
    for cand in candidates:
        address = cand.address if isinstance(cand, ServerDescriptor) else cand
        try:
            session, reason = _connect(address, hello, timeout)
        except (OSError, ProtocolError) as exc:
            unreachable += 1
            reasons[address] = f"unreachable: {exc}"
            continue
        if session is None:
            reasons[address] = reason
        elif session.cost > max_cost:
            reasons[address] = f"cost {session.cost} above {max_cost}"
            session.close()
        else:
            sessions.append(session)
    if not sessions:
        if candidates and unreachable == len(candidates):
            raise Unreachable(f"no candidate reachable: {reasons}")
        raise AllRejected(reasons)
    best = min(sessions, key=lambda s: s.cost)  # min() keeps the first of equal costs
    for s in sessions:
        if s is not best:
            s.close()
    return best


class Client:
    """Offloading agent bound to one registry, one coordinator and at most one session."""

    def __init__(self, registry: reg_mod.PreferenceRegistry, coordinator: Coordinator | None = None,
                 session: Session | None = None, client_id: str | None = None,
                 result_timeout: float = 600.0):
        self.registry = registry
        self.coordinator = coordinator or Coordinator()
        self.session = session
        self.client_id = client_id or f"client-{uuid.uuid4().hex[:8]}"
        self.result_timeout = result_timeout
        self.prefs: GlobalPreferences = registry.globals
        if session is not None and session.prefs is None:
            session.prefs = self.prefs

    @property
    def connected(self) -> bool:
        return self.session is not None and self.session.connected

    def attach(self, session: Session) -> None:
        self.session = session
        session.prefs = self.prefs

    def hello(self) -> dict:
        return hello_body(self.client_id, self.registry.apps)

    def probe(self) -> tuple[float, float]:
        up = probe_bandwidth(self.session, "up")
        down = probe_bandwidth(self.session, "down")
        self.prefs = self.session.prefs
        return up, down

    def benefit(self, app: AppPreferences) -> float:
        return offload_benefit(self.prefs, app)

    # -- one candidate -----------------------------------------------------

    def execute(self, app: AppPreferences) -> OffloadOutcome:
        """One pass of the connected loop for ``app``: launch, decide, maybe ship."""
        coord = self.coordinator
        t0 = time.perf_counter()
        out = OffloadOutcome(app.app_id, LOCAL, b"")
        handle = coord.launch(app.app_id, app.task, app.task_args, aware=app.migration_aware)
        image: CheckpointImage | None = None
        decided_at = None

        if app.migration_aware:
            def decide(marker: int) -> bool:
                nonlocal decided_at
                out.decision_benefit = self.benefit(app)
                take = self.connected and should_offload(
                    out.decision_benefit, self.prefs.benefit_threshold, app.flag)
                decided_at = time.perf_counter()
                if take:
                    out.timings["compute"] += decided_at - t0
                return take

            event = coord.await_marker(handle, decide)
            if isinstance(event, Finished):
                out.result = event.result
                out.timings["compute"] = time.perf_counter() - t0
                out.total_s = out.timings["compute"]
                return out
            image = event
        else:
            out.decision_benefit = self.benefit(app)
            take = self.connected and should_offload(
                out.decision_benefit, self.prefs.benefit_threshold, app.flag)
            if not take:
                fin = coord.wait(handle)
                out.result = fin.result
                out.timings["compute"] = time.perf_counter() - t0
                out.total_s = out.timings["compute"]
                return out
            decided_at = time.perf_counter()
            out.timings["compute"] = decided_at - t0
            try:
                image = coord.signal_checkpoint(handle)
            except TaskFinishedFirst as exc:
                out.result = exc.result
                out.timings["compute"] = time.perf_counter() - t0
                out.total_s = out.timings["compute"]
                return out
        coord.kill(handle)
        out.timings["checkpoint"] = time.perf_counter() - decided_at
        forced = app.flag is OffloadFlag.FORCED and not (
            out.decision_benefit > self.prefs.benefit_threshold)
        out.mode_taken = FORCED if forced else OFFLOADED
        self._ship(app, image, out)
        out.total_s = time.perf_counter() - t0
        return out

    def _ship(self, app: AppPreferences, image: CheckpointImage, out: OffloadOutcome) -> None:
        session = self.session
        stream = session.stream
        sent0, recv0 = stream.bytes_sent, stream.bytes_received
        try:
            meta = CkptMeta(app_id=app.app_id, size=len(image.encode()),
                            migration_aware=app.migration_aware,
                            markerless=not tasks.create_task(app.task, app.task_args).has_markers,
                            interval_s=None if app.migration_aware else app.interval_s)
            send_checkpoint(session, meta, image)
            out.timings["upload"] = session.last_upload.seconds
            _, result_image, _ = recv_checkpoint(session, timeout=self.result_timeout)
            out.timings["remote"] = max(0.0, session.last_download.started_at
                                        - session.last_upload.ended_at)
            out.timings["download"] = session.last_download.seconds
            self.prefs = session.prefs
        except (ProtocolError, ServerError, OSError) as exc:
            log.warning("offloading %s failed (%s); continuing locally", app.app_id, exc)
            out.mode_taken = FALLBACK
            out.error = str(exc)
            if isinstance(exc, (OSError, ConnectionError)) or not isinstance(exc, ServerError):
                session.close(bye=False)
            elif getattr(exc, "reason", "") == "quota-exceeded":
                session.close(bye=False)
            result_image = image
        finally:
            out.bytes_up = stream.bytes_sent - sent0
            out.bytes_down = stream.bytes_received - recv0
        t = time.perf_counter()
        fin = self.coordinator.wait(self.coordinator.restart(result_image))
        out.timings["restart"] = time.perf_counter() - t
        out.result = fin.result

    def execute_locally(self, app: AppPreferences, mode: str = FALLBACK) -> OffloadOutcome:
        """Run ``app`` to completion on the device under the coordinator, markers passed through."""
        t0 = time.perf_counter()
        handle = self.coordinator.launch(app.app_id, app.task, app.task_args,
                                         aware=app.migration_aware)
        fin = self.coordinator.wait(handle)
        elapsed = time.perf_counter() - t0
        out = OffloadOutcome(app.app_id, mode, fin.result, total_s=elapsed)
        out.timings["compute"] = elapsed
        return out

    def execute_safely(self, app: AppPreferences) -> OffloadOutcome:
        """:meth:`execute`, falling back to local execution if the runtime fails."""
        try:
            return self.execute(app)
        except (CheckpointError, PMCOError) as exc:
            log.warning("%s failed under the coordinator (%s); executing locally", app.app_id, exc)
            out = self.execute_locally(app)
            out.error = str(exc)
            return out

    # -- loops -------------------------------------------------------------

    def run_offloading_loop(self, epochs: int | None = None) -> Iterator[OffloadOutcome]:
        """Connected loop: every offload candidate once per epoch while connected."""
        epoch = 0
        while self.connected and (epochs is None or epoch < epochs):
            cursor = None
            yielded = False
            while self.connected:
                nxt = reg_mod.next_candidate(self.registry, cursor, offload_only=True)
                if nxt is None:
                    break
                app, cursor = nxt
                yielded = True
                yield self.execute_safely(app)
            epoch += 1
            if not yielded and epochs is None:
                time.sleep(1.0)

    def run_disconnected_loop(self, epochs: int | None = 1,
                              reconnect: Callable[[], Session | None] | None = None
                              ) -> Iterator[OffloadOutcome]:
        """Local execution of every entry, whatever its flags.

        ``reconnect`` is tried before each candidate; when it returns a
        session the loop stops so the connected loop can take over.
        """
        epoch = 0
        while epochs is None or epoch < epochs:
            cursor = None
            while True:
                if reconnect is not None:
                    session = reconnect()
                    if session is not None:
                        self.attach(session)
                        return
                nxt = reg_mod.next_candidate(self.registry, cursor, offload_only=False)
                if nxt is None:
                    break
                app, cursor = nxt
                yield self.execute_locally(app)
            epoch += 1
            if epochs is None and not self.registry.apps:
                time.sleep(1.0)


def run_agent(client: Client, servers: list[ServerDescriptor], epochs: int) -> Iterator[OffloadOutcome]:
    """Select a server, probe, then alternate connected and disconnected loops for ``epochs`` passes."""
    done = 0

    def reconnect() -> Session | None:
        try:
            session = select_server(servers, client.hello(), client.prefs.max_cost)
        except (AllRejected, Unreachable, ProtocolError):
            return None
        client.attach(session)
        client.probe()
        return session

    if servers:
        reconnect()
    while done < epochs:
        if client.connected:
            for outcome in client.run_offloading_loop(epochs=1):
                yield outcome
            done += 1
        else:
            for outcome in client.run_disconnected_loop(
                    epochs=1, reconnect=reconnect if servers else None):
                yield outcome
            if not client.connected:
                done += 1
    if client.session is not None:
        client.session.close()


OUTCOME_FIELDS = ["app_id", "mode", "total_s", *[f"t_{p}_s" for p in PHASES],
                  "bytes_up", "bytes_down", "benefit_j", "result_digest", "error"]


def outcome_row(o: OffloadOutcome) -> dict:
    row = {"app_id": o.app_id, "mode": o.mode_taken, "total_s": f"{o.total_s:.6f}",
           "bytes_up": o.bytes_up, "bytes_down": o.bytes_down,
           "benefit_j": "" if o.decision_benefit is None else f"{o.decision_benefit:.6f}",
           "result_digest": o.result.hex(), "error": o.error or ""}
    for p in PHASES:
        row[f"t_{p}_s"] = f"{o.timings.get(p, 0.0):.6f}"
    return row


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="pmco-client", description="Run the PMCO client agent.")
    ap.add_argument("--registry", required=True, help="preference registry file")
    ap.add_argument("--servers", help="candidate edge servers file ([server:<name>] address=...)")
    ap.add_argument("--mode", choices=["local", "local-pmco", "pmco"], default="pmco",
                    help="local: plain execution; local-pmco: through the framework without "
                         "offloading; pmco: offload when beneficial")
    ap.add_argument("--iterations", type=int, default=1, help="passes over the registry")
    ap.add_argument("--slowdown", type=float, default=1.0, help="stretch local compute")
    ap.add_argument("--out", help="write one CSV row per executed candidate")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        registry = reg_mod.load(args.registry)
        servers = load_servers(args.servers) if args.servers else []
    except (OSError, PMCOError, configparser.Error, KeyError) as exc:
        print(f"pmco-client: {exc}", file=sys.stderr)
        return 2

    coordinator = Coordinator(slowdown=args.slowdown)
    client = Client(registry, coordinator)
    if args.mode == "local":
        outcomes = _plain_loop(client, args.iterations)
    elif args.mode == "local-pmco":
        outcomes = (client.execute(app) for _ in range(args.iterations) for app in registry.apps)
    else:
        outcomes = run_agent(client, servers, args.iterations)

    writer = None
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else None
    try:
        if fh:
            writer = csv.DictWriter(fh, fieldnames=OUTCOME_FIELDS)
            writer.writeheader()
        for o in outcomes:
            log.info("%s: %s in %.3f s (benefit %s J) result %s", o.app_id, o.mode_taken,
                     o.total_s, "n/a" if o.decision_benefit is None else f"{o.decision_benefit:.3f}",
                     o.result.hex()[:16])
            if writer:
                writer.writerow(outcome_row(o))
    finally:
        if fh:
            fh.close()
        coordinator.shutdown()
    return 0


def _plain_loop(client: Client, iterations: int) -> Iterator[OffloadOutcome]:
    from .checkpoint import run_plain
    for _ in range(iterations):
        for app in client.registry.apps:
            t0 = time.perf_counter()
            fin = run_plain(client.coordinator, app.app_id, app.task, app.task_args)
            elapsed = time.perf_counter() - t0
            out = OffloadOutcome(app.app_id, LOCAL, fin.result, total_s=elapsed)
            out.timings["compute"] = elapsed
            yield out


if __name__ == "__main__":
    sys.exit(main())
