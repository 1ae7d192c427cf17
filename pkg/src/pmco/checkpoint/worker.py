"""Worker-process side of the checkpoint runtime.

The worker owns its task state.  It talks to the coordinator over a
``multiprocessing`` pipe with small tuples:

worker -> coordinator
    ("ready", marker)                      state restored, about to run
    ("marker", ordinal)                    aware mode, waiting for a verdict
    ("image", raw_bytes, stopped)          checkpoint taken
    ("finished", result)                   task completed
    ("error", kind, detail)                restore/runtime failure

coordinator -> worker
    ("continue",) / ("checkpoint", stop) / ("kill",)
"""

from __future__ import annotations

import time
import traceback
from dataclasses import dataclass, field

from .. import tasks
from ..errors import PMCOError, RestoreFailure
from .image import CheckpointImage, decode

PLAIN = "plain"
AWARE = "aware"
NON_AWARE = "non-aware"

# fewer, longer sleeps keep wake-up costs out of the emulated slowdown
SLEEP_QUANTUM = 0.02


@dataclass
class WorkerSpec:
    app_id: str
    task: str
    task_args: dict = field(default_factory=dict)
    image: bytes | None = None
    mode: str = AWARE
    # edge side: checkpoint at the first return marker or at completion
    return_mode: bool = False
    slowdown: float = 1.0
    level: int | str = "auto"


class _Stop(Exception):
    pass


class _CoordinatorGone(Exception):
    pass


class WorkerContext:
    """Safe-point hook handed to ``task.run``.

    Emulates a slower CPU: after each stretch of work it sleeps
    ``(slowdown - 1)`` times the stretch's duration.  Time spent blocked on
    the coordinator is not charged.
    """

    def __init__(self, conn, spec: WorkerSpec, task):
        self.conn = conn
        self.spec = spec
        self.task = task
        self._mark = time.perf_counter()
        self._debt = 0.0

    def reset(self) -> None:
        self._mark = time.perf_counter()

    def throttle(self, flush: bool = False) -> None:
        now = time.perf_counter()
        if self.spec.slowdown > 1.0:
            self._debt += (self.spec.slowdown - 1.0) * (now - self._mark)
            if self._debt >= SLEEP_QUANTUM or (flush and self._debt > 0):
                time.sleep(self._debt)
                after = time.perf_counter()
                # oversleeping is credited against the next stretch
                self._debt -= after - now
                now = after
        self._mark = now

    def safe_point(self) -> None:
        self.throttle()
        if self.conn.poll():
            self._handle(self._recv())

    def _recv(self):
        try:
            return self.conn.recv()
        except (EOFError, OSError):
            raise _CoordinatorGone() from None

    def _handle(self, msg) -> None:
        if msg[0] == "checkpoint":
            stop = bool(msg[1])
            self.emit_image(stopped=stop)
            if stop:
                raise _Stop()
        elif msg[0] == "kill":
            raise _CoordinatorGone()

    def emit_image(self, stopped: bool, finished: bool = False) -> None:
        self.reset()
        img = CheckpointImage.create(
            self.spec.app_id, self.task.name, self.task.marker, self.task.serialize_state(),
            migration_aware=self.spec.mode == AWARE, finished=finished,
            task_args=self.spec.task_args, level=self.spec.level)
        self.throttle(flush=True)
        self.conn.send(("image", img.encode(), stopped))
        self.reset()

    def ask(self, msg):
        self.throttle(flush=True)
        self.conn.send(msg)
        reply = self._recv()
        self.reset()
        return reply


def _restore(spec: WorkerSpec):
    task = tasks.create_task(spec.task, spec.task_args)
    if spec.image is not None:
        # the coordinator verified the digest before spawning us
        img = decode(spec.image, verify=False)
        if img.meta.task != spec.task:
            raise RestoreFailure(f"image holds task {img.meta.task!r}, not {spec.task!r}")
        task.restore_state(img.state)
    return task


def _drive(conn, spec: WorkerSpec, task, ctx: WorkerContext) -> None:
    while True:
        event = task.run(ctx)
        if isinstance(event, tasks.Finished):
            if spec.return_mode:
                ctx.emit_image(stopped=True, finished=True)
            else:
                ctx.throttle(flush=True)
                conn.send(("finished", event.result))
            return
        marker = event.ordinal
        if marker in task.return_markers:
            if spec.return_mode and spec.mode == AWARE:
                ctx.emit_image(stopped=True)
                return
            continue
        if spec.mode == AWARE:
            reply = ctx.ask(("marker", marker))
            if reply[0] == "checkpoint":
                ctx.emit_image(stopped=True)
                return
            if reply[0] == "kill":
                return


def worker_main(conn, spec: WorkerSpec) -> None:
    try:
        started = time.perf_counter()
        try:
            task = _restore(spec)
        except PMCOError as exc:
            conn.send(("error", "restore-failure", str(exc)))
            return
        except Exception as exc:  # task constructors and restore hooks are foreign code
            conn.send(("error", "restore-failure", f"{type(exc).__name__}: {exc}"))
            return
        if spec.slowdown > 1.0:
            time.sleep((spec.slowdown - 1.0) * (time.perf_counter() - started))
        conn.send(("ready", task.marker))
        ctx = WorkerContext(conn, spec, task)
        try:
            _drive(conn, spec, task, ctx)
        except (_Stop, _CoordinatorGone):
            pass
        except Exception:
            conn.send(("error", "task-failure", traceback.format_exc()))
    except (BrokenPipeError, EOFError, ConnectionResetError):
        pass
    finally:
        conn.close()
