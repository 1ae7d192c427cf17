import time

import pytest

from pmco import tasks
from pmco.checkpoint import CheckpointImage, Coordinator, Finished, Status, run_plain
from pmco.errors import (AlreadyCheckpointed, DigestMismatch, InvalidTaskState, RestoreFailure,
                         TaskFinishedFirst, UnknownTask, WorkerCrash)

import oracles

SLOW_SPIN = {"steps": 400, "inner": 2000, "pace_s": 0.005}


def test_launch_reports_running_and_unknown_task_fails(coordinator):
    h = coordinator.launch("m", "matmul", {"n": 20})
    assert h.status is Status.RUNNING and h.pid
    coordinator.kill(h)
    with pytest.raises(UnknownTask):
        coordinator.launch("x", "no-such-task")


def test_marker_checkpoint_restart_equals_uninterrupted(coordinator):
    h = coordinator.launch("m", "matmul", {"n": 50, "seed": 11})
    img = coordinator.await_marker(h)
    assert isinstance(img, CheckpointImage)
    assert img.meta.marker_id == 1 and img.migration_aware
    assert h.status is Status.CHECKPOINTED
    fin = coordinator.wait(coordinator.restart(img))
    assert fin.result == oracles.product_digest(50, 11)


def test_declining_every_marker_finishes_locally(coordinator):
    h = coordinator.launch("m", "matmul", {"n": 30})
    seen = []
    out = coordinator.await_marker(h, decide=lambda m: seen.append(m) or False)
    assert isinstance(out, Finished) and seen == [1]
    assert h.status is Status.FINISHED
    assert out.result == oracles.product_digest(30, 0)


def test_markerless_task_finishes_directly(coordinator):
    h = coordinator.launch("s", "spin", {"steps": 3, "inner": 10})
    out = coordinator.await_marker(h)
    assert isinstance(out, Finished)
    assert out.result == tasks.run_to_completion(tasks.SpinTask(3, 10))


def test_signal_mid_computation_then_restart(coordinator):
    args = {"steps": 60, "inner": 2000, "pace_s": 0.005}
    h = coordinator.launch("s", "spin", args, aware=False)
    time.sleep(0.1)
    img = coordinator.signal_checkpoint(h)
    assert not img.migration_aware and h.status is Status.CHECKPOINTED
    blob = tasks.SpinTask(**args)
    blob.restore_state(img.state)
    assert 0 < blob.step < 60
    with pytest.raises(AlreadyCheckpointed):
        coordinator.signal_checkpoint(h)
    fin = coordinator.wait(coordinator.restart(img))
    assert fin.result == tasks.run_to_completion(tasks.SpinTask(**args))


def test_signal_after_finish_reports_result(coordinator):
    h = coordinator.launch("s", "spin", {"steps": 1, "inner": 10}, aware=False)
    time.sleep(0.3)
    with pytest.raises(TaskFinishedFirst) as err:
        coordinator.signal_checkpoint(h)
    assert err.value.result == tasks.run_to_completion(tasks.SpinTask(1, 10))
    assert h.status is Status.FINISHED


def test_worker_abort_is_a_crash_with_diagnostics(coordinator):
    h = coordinator.launch("s", "spin", {"steps": 10, "inner": 10, "fail_at_step": 2}, aware=False)
    with pytest.raises(WorkerCrash) as err:
        coordinator.wait(h, timeout=30)
    assert "SIGABRT" in str(err.value)
    assert err.value.exitcode == -6


def test_kill_is_idempotent_and_noop_when_finished(coordinator):
    h = coordinator.launch("s", "spin", SLOW_SPIN, aware=False)
    coordinator.kill(h)
    assert h.status is Status.KILLED and not h.process.is_alive()
    coordinator.kill(h)
    assert h.status is Status.KILLED
    done = coordinator.launch("m", "matmul", {"n": 3}, plain=True)
    coordinator.wait(done)
    coordinator.kill(done)
    assert done.status is Status.FINISHED
    with pytest.raises(InvalidTaskState):
        done._set_status(Status.RUNNING)


def test_restart_rejects_corrupt_or_foreign_images(coordinator):
    img = coordinator.await_marker(coordinator.launch("m", "matmul", {"n": 8}))
    raw = bytearray(img.encode())
    raw[-3] ^= 0x40
    with pytest.raises(DigestMismatch):
        coordinator.restart(bytes(raw))
    alien = CheckpointImage.create("m", "matmul", 1, b"not a matmul state", task_args={"n": 8})
    with pytest.raises(RestoreFailure):
        coordinator.restart(alien)


def test_interval_checkpoints_while_restarted(coordinator):
    args = {"steps": 300, "inner": 100, "pace_s": 0.005}
    h = coordinator.launch("s", "spin", args, aware=False)
    img = coordinator.signal_checkpoint(h)
    t0 = time.monotonic()
    r = coordinator.restart(img, interval_s=0.25)
    fin = coordinator.wait(r)
    d = time.monotonic() - t0
    assert isinstance(fin, Finished)
    assert int(d / 0.25) - 1 <= r.images_taken <= int(d / 0.25) + 1
    assert fin.result == tasks.run_to_completion(tasks.SpinTask(**args))


def test_return_mode_hands_back_finished_image(coordinator):
    h = coordinator.launch("s", "spin", {"steps": 20, "inner": 10}, aware=False)
    img = coordinator.signal_checkpoint(h)
    out = coordinator.wait(coordinator.restart(img, interval_s=10, return_mode=True))
    assert isinstance(out, CheckpointImage) and out.meta.finished
    fin = coordinator.wait(coordinator.restart(out))
    assert fin.result == tasks.run_to_completion(tasks.SpinTask(20, 10))


def test_plain_run_and_stateless_restart():
    first = Coordinator()
    h = first.launch("s", "spin", SLOW_SPIN, aware=False)
    pid = h.pid
    first.shutdown()
    assert h.status is Status.KILLED and not h.process.is_alive()
    second = Coordinator()
    try:
        # a new coordinator knows nothing of the old worker or its state
        assert second.active() == []
        assert all(x.pid != pid for x in second.active())
        fin = run_plain(second, "m", "matmul", {"n": 12, "seed": 4})
        assert fin.result == oracles.product_digest(12, 4)
    finally:
        second.shutdown()


def test_slowdown_stretches_compute():
    args = {"steps": 20, "inner": 200000}
    with Coordinator() as fast, Coordinator(slowdown=3.0) as slow:
        run_plain(fast, "w", "spin", {"steps": 1, "inner": 1})
        t = time.perf_counter()
        run_plain(fast, "s", "spin", args)
        base = time.perf_counter() - t
        t = time.perf_counter()
        run_plain(slow, "s", "spin", args)
        stretched = time.perf_counter() - t
    assert stretched > 2.0 * base
