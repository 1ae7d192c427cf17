import math
import socket
import threading
import time

import pytest

from pmco import protocol, tasks
from pmco.checkpoint import CheckpointImage, Coordinator
from pmco.edge import AdmissionPolicy, AdmissionQueue, EdgeServer, SessionLedger, load_policy
from pmco.errors import ConnectionReset, QuotaExceeded, RegistryParseError
from pmco.protocol import (CkptMeta, Frame, FrameStream, Op, Session, pack_checkpoint,
                           recv_checkpoint, send_checkpoint)

import oracles

HELLO = {"client_id": "c", "arch": "portable", "platforms": ["matmul-catalog"]}


def open_stream(srv) -> FrameStream:
    host, port = protocol.parse_address(srv.address)
    return FrameStream(socket.create_connection((host, port)), timeout=30)


def admitted(srv, client_id="c") -> Session:
    stream = open_stream(srv)
    stream.send(Frame.of(Op.HELLO, {**HELLO, "client_id": client_id}))
    stream.expect(Op.ADMIT_OK)
    return Session(stream, srv.address, admitted=True)


def spin_image(coord, args, app_id="s") -> CheckpointImage:
    return coord.signal_checkpoint(coord.launch(app_id, "spin", args, aware=False))


def push(session, img, interval=None):
    raw = img.encode()
    send_checkpoint(session, CkptMeta(img.meta.app_id, len(raw), img.migration_aware,
                                      interval_s=interval), img)
    return recv_checkpoint(session, timeout=60)


def test_policy_checks():
    p = AdmissionPolicy()
    assert p.check(HELLO) is None
    assert p.check({**HELLO, "platforms": ["gpu-catalog"]}) == "platform-unavailable"
    assert p.check({**HELLO, "arch": "arm64-v8"}) == "arch-unsupported"
    with pytest.raises(ValueError):
        AdmissionPolicy(quota_s=0)
    with pytest.raises(ValueError):
        AdmissionPolicy(max_sessions=0)


def test_policy_file(tmp_path):
    f = tmp_path / "policy.ini"
    f.write_text("[policy]\nquota_s = 5\nmax_sessions = 2\nsupported_platforms = matmul-catalog\n")
    p = load_policy(f)
    assert p.quota_s == 5 and p.max_sessions == 2
    assert p.supported_platforms == {"matmul-catalog"}
    f.write_text("[policy]\nshiny = 1\n")
    with pytest.raises(RegistryParseError):
        load_policy(f)


def test_ledger_accumulates_per_window():
    now = [0.0]
    led = SessionLedger(window_s=10, clock=lambda: now[0])
    led.start("a")
    led.charge("a", 3)
    led.charge("a", 2.5)
    assert led.used("a") == 5.5 and led.over_quota("a", 5)
    assert led.used("b") == 0
    with pytest.raises(ValueError):
        led.charge("a", -1)
    now[0] = 10.5
    assert led.used("a") == 0 and led.starts("a") == [0.0]


def test_admission_queue_is_first_come_first_served():
    q = AdmissionQueue(1)
    assert q.acquire()
    order = []

    def waiter(name):
        assert q.acquire(timeout=10)
        order.append(name)
        time.sleep(0.05)
        q.release()

    threads = []
    for name in "abcd":
        t = threading.Thread(target=waiter, args=(name,))
        t.start()
        threads.append(t)
        while q.waiting < len(threads):
            time.sleep(0.005)
    q.release()
    for t in threads:
        t.join(5)
    assert order == list("abcd")
    assert not q.acquire(timeout=0.0) or q.release() is None


def test_admit_and_reject_over_the_wire():
    with EdgeServer(port=0) as srv:
        s = admitted(srv)
        s.close()
        stream = open_stream(srv)
        stream.send(Frame.of(Op.HELLO, {**HELLO, "platforms": ["quantum-catalog"]}))
        reply = stream.expect(Op.ADMIT_REJECT)
        assert reply.json()["reason"] == "platform-unavailable"
        stream.close()


def test_queued_connections_admitted_in_arrival_order():
    with EdgeServer(AdmissionPolicy(max_sessions=2), port=0) as srv:
        first, second = admitted(srv, "c1"), admitted(srv, "c2")
        waiting = []
        for cid in ("c3", "c4"):
            s = open_stream(srv)
            s.send(Frame.of(Op.HELLO, {**HELLO, "client_id": cid}))
            waiting.append(s)
            while srv.service.slots.waiting < len(waiting):
                time.sleep(0.01)
        first.close()
        waiting[0].expect(Op.ADMIT_OK)
        second.close()
        waiting[1].expect(Op.ADMIT_OK)
        assert srv.stats.admissions == ["c1", "c2", "c3", "c4"]
        for s in waiting:
            s.close()


def test_full_server_rejects_after_admission_timeout():
    with EdgeServer(AdmissionPolicy(max_sessions=1, admit_timeout_s=0.2), port=0) as srv:
        holder = admitted(srv)
        stream = open_stream(srv)
        stream.send(Frame.of(Op.HELLO, HELLO))
        assert stream.expect(Op.ADMIT_REJECT).json()["reason"] == "server-busy"
        stream.close()
        holder.close()


def test_unadmitted_push_never_spawns_a_worker(coordinator):
    edge_coord = Coordinator()
    with EdgeServer(port=0, coordinator=edge_coord) as srv:
        img = coordinator.await_marker(coordinator.launch("m", "matmul", {"n": 10}))
        raw = img.encode()
        stream = open_stream(srv)
        for _ in range(3):
            stream.send(pack_checkpoint(Op.CKPT_PUSH, CkptMeta("m", len(raw), True), raw))
            reply = stream.recv()
            assert reply.op is Op.ERROR and reply.json()["reason"] == "not-admitted"
        stream.close()
        assert edge_coord.spawned == 0


def test_aware_image_comes_back_as_the_product(coordinator):
    with EdgeServer(port=0) as srv:
        s = admitted(srv)
        img = coordinator.await_marker(coordinator.launch("m", "matmul", {"n": 64, "seed": 5}))
        meta, result, bw = push(s, img)
        assert meta.app_id == "m" and result.meta.marker_id == 2 and bw > 0
        fin = coordinator.wait(coordinator.restart(result))
        assert fin.result == oracles.product_digest(64, 5)
        assert srv.stats.served == ["m"]
        s.close()


def test_corrupt_push_is_rejected_and_session_continues(coordinator):
    with EdgeServer(port=0) as srv:
        s = admitted(srv)
        img = coordinator.await_marker(coordinator.launch("m", "matmul", {"n": 16}))
        raw = bytearray(img.encode())
        raw[-1] ^= 0xFF
        s.stream.send(pack_checkpoint(Op.CKPT_PUSH, CkptMeta("m", len(raw), True), bytes(raw)))
        reply = s.stream.recv()
        assert reply.op is Op.ERROR and reply.json()["reason"] == "digest-rejected"
        meta, result, _ = push(s, img)
        assert result.meta.marker_id == 2
        s.close()


def test_non_aware_image_returns_after_finish_with_interval_images(coordinator):
    args = {"steps": 200, "inner": 100, "pace_s": 0.01}
    with EdgeServer(port=0) as srv:
        s = admitted(srv)
        img = spin_image(coordinator, args)
        t0 = time.perf_counter()
        _, result, _ = push(s, img, interval=0.5)
        remote = time.perf_counter() - t0
        assert result.meta.finished and not result.migration_aware
        n = srv.stats.last_interval_images
        assert math.floor(remote / 0.5) - 1 <= n <= math.ceil(remote / 0.5) + 1
        fin = coordinator.wait(coordinator.restart(result))
        assert fin.result == tasks.run_to_completion(tasks.SpinTask(**args))
        s.close()


def test_quota_refuses_the_next_request_and_closes(coordinator):
    args = {"steps": 40, "inner": 100, "pace_s": 0.01}
    with EdgeServer(AdmissionPolicy(quota_s=0.2), port=0) as srv:
        s = admitted(srv)
        img = spin_image(coordinator, args)
        # the first request runs past the quota but is allowed to complete
        _, result, _ = push(s, img, interval=10)
        assert result.meta.finished
        assert srv.service.ledger.used("c") >= 0.2
        with pytest.raises(QuotaExceeded):
            push(s, img, interval=10)
        with pytest.raises(ConnectionReset):
            s.stream.recv()
        s.close()
