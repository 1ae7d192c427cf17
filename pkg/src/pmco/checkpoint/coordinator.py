"""Coordinator: launches workers, relays checkpoint requests, restarts images.

The coordinator keeps no durable state.  Handles live in memory only; if
the coordinator goes away its workers see the pipe close and exit, so a
task has to be started again from scratch (or from an image that was
explicitly written somewhere).
"""

from __future__ import annotations

import enum
import io
import logging
import multiprocessing as mp
import os
import signal
import threading
import time
import weakref
from dataclasses import dataclass, field
from multiprocessing import context, forkserver, popen_forkserver, reduction, spawn, util

from .. import tasks
from ..errors import (AlreadyCheckpointed, CheckpointError, DigestMismatch, InvalidTaskState,
                      RestoreFailure, SpawnFailure, TaskFinishedFirst, WorkerCrash,
                      WorkerUnresponsive)
from .image import CheckpointImage, decode, state_digest
from .worker import AWARE, NON_AWARE, PLAIN, WorkerSpec, worker_main

log = logging.getLogger(__name__)

_MP = mp.get_context("forkserver")
_MP.set_forkserver_preload(["pmco.checkpoint.worker"])



class _WorkerPopen(popen_forkserver.Popen):
    """Forkserver launch that does not replay the parent's ``__main__`` in the child.

    Workers only need the preloaded worker module.  Replaying the main
    script re-imports whatever the launcher imported (test runners, scipy)
    on every spawn, and fails outright when the script came from stdin.
    """

    def _launch(self, process_obj):
        prep = spawn.get_preparation_data(process_obj._name)
        prep.pop("init_main_from_path", None)
        prep.pop("init_main_from_name", None)
        buf = io.BytesIO()
        context.set_spawning_popen(self)
        try:
            reduction.dump(prep, buf)
            reduction.dump(process_obj, buf)
        finally:
            context.set_spawning_popen(None)
        self.sentinel, w = forkserver.connect_to_new_process(self._fds)
        parent_w = os.dup(w)
        self.finalizer = util.Finalize(self, util.close_fds, (parent_w, self.sentinel))
        with open(w, "wb", closefd=True) as f:
            f.write(buf.getbuffer())
        self.pid = forkserver.read_signed(self.sentinel)


class _WorkerProcess(context.ForkServerProcess):
    @staticmethod
    def _Popen(process_obj):
        return _WorkerPopen(process_obj)


POLL_SLICE = 0.05


class Status(str, enum.Enum):
    RUNNING = "running"
    CHECKPOINTED = "checkpointed"
    FINISHED = "finished"
    KILLED = "killed"


@dataclass(frozen=True)
class Finished:
    result: bytes


@dataclass(eq=False)
class TaskHandle:
    app_id: str
    task: str
    mode: str
    process: object
    conn: object
    status: Status = Status.RUNNING
    marker: int = 0
    interval_s: float | None = None
    return_mode: bool = False
    images_taken: int = 0
    result: bytes | None = None
    latest_image: bytes | None = field(default=None, repr=False)
    started_at: float = field(default_factory=time.perf_counter)
    ready_at: float | None = None

    @property
    def aware(self) -> bool:
        return self.mode == AWARE

    @property
    def pid(self) -> int | None:
        return self.process.pid

    def _set_status(self, status: Status) -> None:
        if self.status is not Status.RUNNING:
            raise InvalidTaskState(f"{self.app_id}: cannot go from {self.status.value} "
                                   f"to {status.value}")
        self.status = status


def _describe_exit(code: int | None) -> str:
    if code is None:
        return "still running"
    if code < 0:
        try:
            return f"killed by signal {signal.Signals(-code).name}"
        except ValueError:
            return f"killed by signal {-code}"
    return f"exit status {code}"


class Coordinator:
    """Supervises worker processes.

    ``slowdown`` stretches every worker's compute by that factor (emulating a
    slower CPU); ``level`` is the gzip level for images (``"auto"`` stores
    incompressible states); ``timeout`` bounds how long a worker may take to
    answer a control message.
    """

    def __init__(self, slowdown: float = 1.0, level: int | str = "auto",
                 timeout: float = 60.0):
        if slowdown < 1.0:
            raise ValueError("slowdown must be >= 1")
        self.slowdown = float(slowdown)
        self.level = level
        self.timeout = timeout
        self._handles: weakref.WeakSet[TaskHandle] = weakref.WeakSet()
        self._lock = threading.Lock()
        self.spawned = 0

    # -- launching ---------------------------------------------------------

    def _spawn(self, spec: WorkerSpec, interval_s: float | None = None) -> TaskHandle:
        parent, child = _MP.Pipe(duplex=True)
        proc = _WorkerProcess(target=worker_main, args=(child, spec), daemon=True,
                           name=f"pmco-worker-{spec.app_id}")
        try:
            proc.start()
        except OSError as exc:
            parent.close()
            raise SpawnFailure(f"cannot start worker for {spec.app_id}: {exc}") from exc
        finally:
            child.close()
        with self._lock:
            self.spawned += 1
        handle = TaskHandle(app_id=spec.app_id, task=spec.task, mode=spec.mode, process=proc,
                            conn=parent, interval_s=interval_s, return_mode=spec.return_mode)
        self._handles.add(handle)
        msg = self._recv(handle, self.timeout)
        if msg[0] != "ready":
            self._reap(handle)
            self._raise_worker_error(handle, msg)
        handle.marker = msg[1]
        handle.ready_at = time.perf_counter()
        return handle

    def launch(self, app_id: str, task: str, task_args: dict | None = None, *,
               aware: bool = True, plain: bool = False) -> TaskHandle:
        """Start ``task`` from scratch in a supervised worker process.

        ``plain`` runs it without any marker interaction (the task as it would
        run outside the framework).
        """
        if task not in tasks.CATALOG:
            raise tasks.UnknownTask(f"unknown task {task!r}")
        mode = PLAIN if plain else (AWARE if aware else NON_AWARE)
        spec = WorkerSpec(app_id=app_id, task=task, task_args=dict(task_args or {}),
                          mode=mode, slowdown=self.slowdown, level=self.level)
        return self._spawn(spec)

    def restart(self, image: CheckpointImage | bytes, interval_s: float | None = None, *,
                return_mode: bool = False,
                aware: bool | None = None) -> TaskHandle:
        """Start a new worker from ``image``, resuming after its marker.

        For non-aware images with ``interval_s`` the coordinator requests a
        checkpoint every ``interval_s`` seconds while the task is driven by
        :meth:`wait`.  ``return_mode`` makes the worker hand back an image at
        its return marker or at completion instead of a plain result.
        """
        if isinstance(image, (bytes, bytearray, memoryview)):
            image = decode(bytes(image))
        elif not _verified(image):
            raise DigestMismatch(f"state digest mismatch for image of {image.meta.app_id!r}")
        if image.meta.task not in tasks.CATALOG:
            raise tasks.UnknownTask(f"image refers to unknown task {image.meta.task!r}")
        aware = image.migration_aware if aware is None else aware
        spec = WorkerSpec(app_id=image.meta.app_id, task=image.meta.task,
                          task_args=dict(image.meta.task_args), image=image.encode(),
                          mode=AWARE if aware else NON_AWARE, return_mode=return_mode,
                          slowdown=self.slowdown, level=self.level)
        try:
            return self._spawn(spec, interval_s=None if aware else interval_s)
        except WorkerCrash:
            raise
        except CheckpointError as exc:
            if isinstance(exc, RestoreFailure):
                raise
            raise RestoreFailure(str(exc)) from exc

    # -- messaging ---------------------------------------------------------

    def _recv(self, handle: TaskHandle, timeout: float | None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if handle.conn.poll(POLL_SLICE):
                try:
                    return handle.conn.recv()
                except (EOFError, OSError):
                    break
            if not handle.process.is_alive():
                if handle.conn.poll(0):
                    continue
                break
            if deadline is not None and time.monotonic() > deadline:
                raise WorkerUnresponsive(f"{handle.app_id}: no answer within {timeout:.1f} s")
        handle.process.join(1.0)
        code = handle.process.exitcode
        self._reap(handle)
        if handle.status is Status.RUNNING:
            handle.status = Status.KILLED
        raise WorkerCrash(f"worker for {handle.app_id} died ({_describe_exit(code)})",
                          exitcode=code, diagnostics=_describe_exit(code))

    def _send(self, handle: TaskHandle, msg) -> bool:
        try:
            handle.conn.send(msg)
            return True
        except (BrokenPipeError, OSError):
            return False

    @staticmethod
    def _raise_worker_error(handle: TaskHandle, msg):
        if msg[0] == "error":
            kind, detail = msg[1], msg[2]
            if kind == "restore-failure":
                raise RestoreFailure(f"{handle.app_id}: {detail}")
            raise WorkerCrash(f"{handle.app_id}: task failed", exitcode=None, diagnostics=detail)
        raise CheckpointError(f"{handle.app_id}: unexpected worker message {msg[0]!r}")

    def _finish(self, handle: TaskHandle, result: bytes) -> Finished:
        handle._set_status(Status.FINISHED)
        handle.result = result
        self._reap(handle)
        return Finished(result)

    def _image(self, handle: TaskHandle, raw: bytes, stopped: bool) -> CheckpointImage:
        handle.images_taken += 1
        handle.latest_image = raw
        img = decode(raw, verify=False)
        object.__setattr__(img, "_verified", True)
        handle.marker = img.meta.marker_id
        if stopped:
            handle._set_status(Status.CHECKPOINTED)
            self._reap(handle)
        return img

    def _require_running(self, handle: TaskHandle) -> None:
        if handle.status is Status.CHECKPOINTED:
            raise AlreadyCheckpointed(f"{handle.app_id} is already checkpointed")
        if handle.status is Status.FINISHED:
            raise TaskFinishedFirst(handle.result)
        if handle.status is not Status.RUNNING:
            raise InvalidTaskState(f"{handle.app_id} is {handle.status.value}")

    # -- operations --------------------------------------------------------

    def await_marker(self, handle: TaskHandle, decide=None) -> CheckpointImage | Finished:
        """Block until the worker checkpoints at a marker or finishes.

        ``decide(marker)`` is consulted at every marker except return markers;
        True makes the worker self-checkpoint there, False lets it continue.
        Without ``decide`` the first marker is taken.
        """
        if handle.mode != AWARE:
            raise InvalidTaskState(f"{handle.app_id} is not migration-aware")
        self._require_running(handle)
        while True:
            msg = self._recv(handle, None)
            kind = msg[0]
            if kind == "marker":
                handle.marker = msg[1]
                take = True if decide is None else bool(decide(msg[1]))
                if not self._send(handle, ("checkpoint", True) if take else ("continue",)):
                    continue
            elif kind == "image":
                return self._image(handle, msg[1], msg[2])
            elif kind == "finished":
                return self._finish(handle, msg[1])
            else:
                self._reap(handle)
                self._raise_worker_error(handle, msg)

    def signal_checkpoint(self, handle: TaskHandle) -> CheckpointImage:
        """Ask the worker to checkpoint at its next safe point and stop."""
        self._require_running(handle)
        self._send(handle, ("checkpoint", True))
        while True:
            msg = self._recv(handle, self.timeout)
            kind = msg[0]
            if kind == "image":
                return self._image(handle, msg[1], msg[2])
            if kind == "finished":
                self._finish(handle, msg[1])
                raise TaskFinishedFirst(msg[1])
            if kind == "marker":
                self._send(handle, ("checkpoint", True))
                continue
            self._reap(handle)
            self._raise_worker_error(handle, msg)

    def wait(self, handle: TaskHandle, timeout: float | None = None) -> Finished | CheckpointImage:
        """Drive the worker to its end, serving interval checkpoints on the way.

        Returns :class:`Finished`, or, for a worker restarted in return mode,
        the image it handed back.  Markers are passed through.
        """
        self._require_running(handle)
        deadline = None if timeout is None else time.monotonic() + timeout
        interval = handle.interval_s
        next_tick = time.monotonic() + interval if interval else None
        while True:
            wait_for = POLL_SLICE * 4
            if next_tick is not None:
                wait_for = max(0.0, next_tick - time.monotonic())
            if deadline is not None and time.monotonic() > deadline:
                raise WorkerUnresponsive(f"{handle.app_id} did not finish in time")
            msg = None
            if handle.conn.poll(wait_for):
                msg = self._recv(handle, self.timeout)
            elif not handle.process.is_alive():
                msg = self._recv(handle, self.timeout)
            if next_tick is not None and time.monotonic() >= next_tick:
                self._send(handle, ("checkpoint", False))
                next_tick += interval
                while next_tick <= time.monotonic():
                    next_tick += interval
            if msg is None:
                continue
            kind = msg[0]
            if kind == "marker":
                self._send(handle, ("continue",))
            elif kind == "image":
                if msg[2]:
                    return self._image(handle, msg[1], True)
                handle.images_taken += 1
                handle.latest_image = msg[1]
            elif kind == "finished":
                return self._finish(handle, msg[1])
            else:
                self._reap(handle)
                self._raise_worker_error(handle, msg)

    def kill(self, handle: TaskHandle) -> None:
        """Terminate the worker; idempotent, and a no-op for finished tasks."""
        self._send(handle, ("kill",))
        self._reap(handle)
        if handle.status is Status.RUNNING:
            handle.status = Status.KILLED

    def _reap(self, handle: TaskHandle) -> None:
        proc = handle.process
        proc.join(0.5 if proc.is_alive() else 0)
        if proc.is_alive():
            proc.terminate()
            proc.join(2.0)
        if proc.is_alive():
            proc.kill()
            proc.join()
        try:
            handle.conn.close()
        except OSError:
            pass

    def active(self) -> list[TaskHandle]:
        return [h for h in list(self._handles) if h.status is Status.RUNNING]

    def shutdown(self) -> None:
        for handle in list(self._handles):
            self.kill(handle)
        self._handles = weakref.WeakSet()

    def __enter__(self) -> "Coordinator":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def _verified(image: CheckpointImage) -> bool:
    if getattr(image, "_verified", False):
        return True
    ok = (len(image.state) == image.meta.uncompressed_len
          and state_digest(image.state) == image.meta.state_digest)
    if ok:
        object.__setattr__(image, "_verified", True)
    return ok


def run_plain(coordinator: Coordinator, app_id: str, task: str,
              task_args: dict | None = None) -> Finished:
    handle = coordinator.launch(app_id, task, task_args, plain=True)
    result = coordinator.wait(handle)
    assert isinstance(result, Finished)
    return result
