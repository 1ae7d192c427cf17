"""Task catalog: cooperating workloads that can serialize and restore themselves.

A task advances through dense migration markers (1, 2, ...); marker 0 is
program start.  ``run`` executes until the next marker or completion and
calls ``ctx.safe_point()`` at loop-iteration granularity, which is where
coordinator-signalled checkpoints are served.

Matrix elements come from a 64-bit linear congruential generator,
``s <- s * 6364136223846793005 + 1442695040888963407 (mod 2**64)``, each
value being ``(s >> 11) / 2**53`` in [0, 1).  The generator is seeded with
the task seed; A is filled row-major first, then B from the same stream.
The result digest is the SHA-256 of the product serialized row-major as
little-endian float64.
"""

from __future__ import annotations

import hashlib
import os
import struct
import sys
import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from numba import njit

from .errors import RestoreFailure, UnknownTask

LCG_MUL = 6364136223846793005
LCG_INC = 1442695040888963407


@njit("void(u8, f8[::1])", cache=True)
def _lcg_fill(seed, out):
    s = seed
    a = np.uint64(6364136223846793005)
    c = np.uint64(1442695040888963407)
    shift = np.uint64(11)
    scale = 1.0 / 9007199254740992.0
    for i in range(out.size):
        s = s * a + c
        out[i] = (s >> shift) * scale


@njit("void(f8[:, ::1], f8[:, ::1], f8[:, ::1], i8, i8)", cache=True)
def _multiply_rows(a, b, c, r0, r1):
    n = a.shape[1]
    m = b.shape[1]
    for i in range(r0, r1):
        for k in range(n):
            aik = a[i, k]
            for j in range(m):
                c[i, j] += aik * b[k, j]


@njit("f8(f8, i8)", cache=True)
def _logistic(x, steps):
    for _ in range(steps):
        x = 3.99 * x * (1.0 - x)
    return x


def lcg_matrices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    buf = np.empty(2 * n * n, dtype=np.float64)
    _lcg_fill(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), buf)
    return buf[: n * n].reshape(n, n).copy(), buf[n * n:].reshape(n, n).copy()


def _le_bytes(m: np.ndarray):
    """Buffer of ``m`` as little-endian float64, without a copy where possible."""
    if sys.byteorder == "little" and m.flags.c_contiguous and m.dtype == np.float64:
        return m.data
    return np.ascontiguousarray(m, dtype="<f8").tobytes()


def product_digest(c: np.ndarray) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(c, dtype="<f8").tobytes()).digest()


@dataclass(frozen=True)
class ReachedMarker:
    ordinal: int


@dataclass(frozen=True)
class Finished:
    result: bytes


class RunContext(Protocol):
    def safe_point(self) -> None: ...


class _NullContext:
    def safe_point(self) -> None:
        pass


class MarkerTask(Protocol):
    name: str
    platform: str
    return_markers: frozenset[int]

    @property
    def marker(self) -> int: ...

    @property
    def has_markers(self) -> bool: ...

    def serialize_state(self) -> bytes: ...

    def restore_state(self, blob: bytes) -> None: ...

    def run(self, ctx: RunContext) -> ReachedMarker | Finished: ...


class MatmulTask:
    """n x n matrix product with a marker before the multiply loop (1) and a
    return marker once the product is complete (2)."""

    name = "matmul"
    platform = "matmul-catalog"
    return_markers = frozenset({2})
    has_markers = True

    _HEADER = struct.Struct("<4sQQBQ")
    _MAGIC = b"MMv1"

    def __init__(self, n: int, seed: int = 0):
        if int(n) < 1:
            raise ValueError("matrix dimension must be >= 1")
        self.n = int(n)
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.phase = 0
        self.row = 0
        self.a = self.b = self.c = None

    @property
    def marker(self) -> int:
        return self.phase

    def serialize_state(self) -> bytes:
        parts = [self._HEADER.pack(self._MAGIC, self.n, self.seed, self.phase, self.row)]
        if self.phase == 1:
            parts += [_le_bytes(self.a), _le_bytes(self.b)]
            if self.row > 0:
                parts.append(_le_bytes(self.c))
        elif self.phase == 2:
            parts.append(_le_bytes(self.c))
        return b"".join(parts)

    def restore_state(self, blob: bytes) -> None:
        try:
            magic, n, seed, phase, row = self._HEADER.unpack_from(blob, 0)
        except struct.error as exc:
            raise RestoreFailure(f"matmul state too short: {exc}") from None
        if magic != self._MAGIC or phase > 2 or row > n:
            raise RestoreFailure("not a matmul state blob")
        nn = n * n * 8
        body = memoryview(blob)[self._HEADER.size:]
        expected = {0: 0, 1: 2 * nn + (nn if row > 0 else 0), 2: nn}[phase]
        if len(body) != expected:
            raise RestoreFailure(f"matmul state body is {len(body)} bytes, expected {expected}")

        def mat(i):
            return np.frombuffer(body[i * nn:(i + 1) * nn], dtype="<f8").reshape(n, n).copy()

        self.n, self.seed, self.phase, self.row = n, seed, phase, row
        self.a = self.b = self.c = None
        if phase == 1:
            self.a, self.b = mat(0), mat(1)
            self.c = mat(2) if row > 0 else np.zeros((n, n))
        elif phase == 2:
            self.c = mat(0)

    def run(self, ctx: RunContext | None = None) -> ReachedMarker | Finished:
        ctx = ctx or _NullContext()
        if self.phase == 0:
            self.a, self.b = lcg_matrices(self.n, self.seed)
            self.c = np.zeros((self.n, self.n))
            self.phase, self.row = 1, 0
            ctx.safe_point()
            return ReachedMarker(1)
        if self.phase == 1:
            while self.row < self.n:
                _multiply_rows(self.a, self.b, self.c, self.row, self.row + 1)
                self.row += 1
                ctx.safe_point()
            self.phase = 2
            self.a = self.b = None
            return ReachedMarker(2)
        return Finished(product_digest(self.c))


class SpinTask:
    """Iterated logistic-map kernel for interval (non-aware) checkpointing.

    Each of ``steps`` steps runs ``inner`` map iterations and then sleeps
    ``pace_s`` seconds, which makes its duration easy to dial in.  With
    ``marker_every`` > 0 a marker is placed every that many steps.
    ``fail_at_step`` aborts the worker process at that step (fault injection).
    """

    name = "spin"
    platform = "kernel-catalog"
    return_markers = frozenset()

    _STATE = struct.Struct("<4sdQQ")
    _MAGIC = b"SPv1"

    def __init__(self, steps: int = 100, inner: int = 20000, pace_s: float = 0.0,
                 x0: float = 0.3, marker_every: int = 0, fail_at_step: int = -1):
        self.steps = int(steps)
        self.inner = int(inner)
        self.pace_s = float(pace_s)
        self.marker_every = int(marker_every)
        self.fail_at_step = int(fail_at_step)
        self.x = float(x0)
        self.step = 0
        self._marker = 0

    @property
    def marker(self) -> int:
        return self._marker

    @property
    def has_markers(self) -> bool:
        return 0 < self.marker_every < self.steps

    def serialize_state(self) -> bytes:
        return self._STATE.pack(self._MAGIC, self.x, self.step, self._marker)

    def restore_state(self, blob: bytes) -> None:
        try:
            magic, x, step, marker = self._STATE.unpack(blob)
        except struct.error as exc:
            raise RestoreFailure(f"spin state malformed: {exc}") from None
        if magic != self._MAGIC or step > self.steps:
            raise RestoreFailure("not a spin state blob for this task")
        self.x, self.step, self._marker = x, step, marker

    def run(self, ctx: RunContext | None = None) -> ReachedMarker | Finished:
        ctx = ctx or _NullContext()
        while self.step < self.steps:
            if (self.marker_every > 0 and self.step > 0
                    and self.step == (self._marker + 1) * self.marker_every):
                self._marker += 1
                return ReachedMarker(self._marker)
            self.x = _logistic(self.x, self.inner)
            if self.pace_s > 0:
                time.sleep(self.pace_s)
            self.step += 1
            if self.step == self.fail_at_step:
                os.abort()
            ctx.safe_point()
        return Finished(struct.pack("<dQ", self.x, self.step))


CATALOG: dict[str, type] = {
    MatmulTask.name: MatmulTask,
    SpinTask.name: SpinTask,
}


def create_task(name: str, args: dict | None = None) -> MarkerTask:
    try:
        cls = CATALOG[name]
    except KeyError:
        raise UnknownTask(f"unknown task {name!r}; catalog has {sorted(CATALOG)}") from None
    return cls(**(args or {}))


def platform_of(name: str) -> str:
    try:
        return CATALOG[name].platform
    except KeyError:
        raise UnknownTask(f"unknown task {name!r}") from None


def run_to_completion(task: MarkerTask) -> bytes:
    """Run a task in-process ignoring markers; the uninterrupted reference run."""
    while True:
        event = task.run()
        if isinstance(event, Finished):
            return event.result
