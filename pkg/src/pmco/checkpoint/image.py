"""Checkpoint image container.

Byte layout, all integers big-endian::

    magic        4s   b"PMCO"
    version      u16  1
    flags        u8   bit0 migration-aware, bit1 gzip-compressed
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON
    payload_len  u64
    payload      payload_len bytes (gzip stream when compressed)

The meta JSON carries ``app_id``, ``task``, ``marker_id``, ``created_at``
(unix millis), ``state_digest`` (SHA-256 hex of the uncompressed state),
``uncompressed_len``, ``finished`` and ``task_args``, plus ``image_crc32``: a
CRC-32 (8 hex digits) over the fixed header, the meta with that field's
digits zeroed and the payload length, and also over the payload when it is
gzip.  Together with the state digest this means a flipped byte anywhere in
the image is rejected, including in the meta and in the gzip header.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import re
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import DigestMismatch, ImageFormatError, VersionUnsupported

MAGIC = b"PMCO"
VERSION = 1
FLAG_MIGRATION_AWARE = 0x01
FLAG_COMPRESSED = 0x02
FILE_SUFFIX = ".pmco"

DEFAULT_LEVEL = 6
# level "auto" stores states whose sample saves under 10% with zlib level 1
_SAMPLE_CHUNK = 16 * 1024
_SAMPLE_CHUNKS = 4
_SAMPLE_BYTES = _SAMPLE_CHUNK * _SAMPLE_CHUNKS
_STORE_RATIO = 0.90

_HEAD = struct.Struct(">4sHBI")
_PAYLOAD_LEN = struct.Struct(">Q")
_MAX_U32 = 0xFFFFFFFF
_CRC_FIELD = b'"image_crc32":"'
_CRC_BLANK = "00000000"
_HEX8 = re.compile(rb"[0-9a-f]{8}")


def state_digest(state: bytes) -> str:
    return hashlib.sha256(state).hexdigest()


@dataclass(frozen=True)
class ImageMeta:
    app_id: str
    task: str
    marker_id: int
    state_digest: str
    uncompressed_len: int
    created_at: int = field(default_factory=lambda: int(time.time() * 1000))
    finished: bool = False
    task_args: dict = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        if not (0 <= self.marker_id <= _MAX_U32):
            raise ImageFormatError(f"marker_id out of range: {self.marker_id}")
        if self.uncompressed_len < 0:
            raise ImageFormatError("uncompressed_len must be >= 0")

    def to_json(self, **transport) -> bytes:
        return json.dumps({
            **transport,
            "app_id": self.app_id,
            "task": self.task,
            "marker_id": self.marker_id,
            "created_at": self.created_at,
            "state_digest": self.state_digest,
            "uncompressed_len": self.uncompressed_len,
            "finished": self.finished,
            "task_args": self.task_args,
        }, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_json(cls, raw: bytes) -> "ImageMeta":
        try:
            d = json.loads(raw.decode("utf-8"))
            return cls(app_id=str(d["app_id"]), task=str(d["task"]),
                       marker_id=int(d["marker_id"]), state_digest=str(d["state_digest"]),
                       uncompressed_len=int(d["uncompressed_len"]),
                       created_at=int(d["created_at"]), finished=bool(d.get("finished", False)),
                       task_args=dict(d.get("task_args") or {}))
        except (ValueError, KeyError, TypeError) as exc:
            raise ImageFormatError(f"bad image meta: {exc}") from None


@dataclass(frozen=True)
class CheckpointImage:
    """A task state snapshot plus its meta header.

    ``state`` holds the uncompressed state blob; compression happens in
    :meth:`encode`.  The encoded bytes are cached, and an image produced by
    :func:`decode` remembers the bytes it came from, so re-sending an image
    does not recompress it.
    """

    meta: ImageMeta
    state: bytes
    migration_aware: bool = True
    compressed: bool = True
    version: int = VERSION
    _raw: bytes | None = field(default=None, compare=False, repr=False)

    @classmethod
    def create(cls, app_id: str, task: str, marker_id: int, state: bytes, *,
               migration_aware: bool = True, finished: bool = False,
               task_args: dict | None = None,
               level: int | str = "auto") -> "CheckpointImage":
        """Build an image for ``state``.

        ``level`` is a gzip level 1-9, 0 for store-only, or ``"auto"``: level 6
        unless a sample of the state barely compresses, then store-only.
        """
        meta = ImageMeta(app_id=app_id, task=task, marker_id=marker_id,
                         state_digest=state_digest(state), uncompressed_len=len(state),
                         finished=finished, task_args=dict(task_args or {}))
        if level == "auto":
            compressed = _worth_compressing(state)
            level = DEFAULT_LEVEL
        else:
            compressed = int(level) > 0
        img = cls(meta=meta, state=state, migration_aware=migration_aware,
                  compressed=compressed)
        object.__setattr__(img, "_raw", _encode(img, int(level)))
        object.__setattr__(img, "_verified", True)
        return img

    @property
    def flags(self) -> int:
        return ((FLAG_MIGRATION_AWARE if self.migration_aware else 0)
                | (FLAG_COMPRESSED if self.compressed else 0))

    def encode(self) -> bytes:
        if self._raw is None:
            object.__setattr__(self, "_raw", _encode(self, DEFAULT_LEVEL))
        return self._raw

    def __len__(self) -> int:
        return len(self.encode())

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        if path.suffix != FILE_SUFFIX:
            path = path.with_name(path.name + FILE_SUFFIX)
        path.write_bytes(self.encode())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "CheckpointImage":
        return decode(Path(path).read_bytes())


def _worth_compressing(state: bytes) -> bool:
    if len(state) <= _SAMPLE_BYTES:
        sample = state
    else:
        # chunks spread over the whole state, so a compressible head alone does not decide
        step = (len(state) - _SAMPLE_CHUNK) // (_SAMPLE_CHUNKS - 1)
        sample = b"".join(state[i * step:i * step + _SAMPLE_CHUNK] for i in range(_SAMPLE_CHUNKS))
    if len(sample) < 64:
        return True
    return len(zlib.compress(sample, 1)) < _STORE_RATIO * len(sample)


def _encode(img: CheckpointImage, level: int) -> bytes:
    if img.version != VERSION:
        raise VersionUnsupported(f"cannot encode image version {img.version}")
    if img.compressed:
        payload = gzip.compress(img.state, compresslevel=level or DEFAULT_LEVEL, mtime=0)
    else:
        payload = img.state
    meta = img.meta.to_json(image_crc32=_CRC_BLANK)
    head = _HEAD.pack(MAGIC, img.version, img.flags, len(meta))
    plen = _PAYLOAD_LEN.pack(len(payload))
    crc = _image_crc(head, meta, plen, payload if img.compressed else b"")
    # the first match is the top-level key: quotes inside string values are escaped
    at = meta.index(_CRC_FIELD) + len(_CRC_FIELD)
    meta = meta[:at] + b"%08x" % crc + meta[at + 8:]
    return b"".join((head, meta, plen, payload))


def _image_crc(head: bytes, meta: bytes, plen: bytes, payload) -> int:
    crc = zlib.crc32(head)
    crc = zlib.crc32(meta, crc)
    crc = zlib.crc32(plen, crc)
    return zlib.crc32(payload, crc)


def _check_crc(data: bytes, raw_meta: bytes, payload, compressed: bool) -> None:
    at = raw_meta.find(_CRC_FIELD)
    if at < 0:
        raise ImageFormatError("image meta lacks image_crc32")
    at += len(_CRC_FIELD)
    digits = raw_meta[at:at + 8]
    if not _HEX8.fullmatch(digits):
        raise DigestMismatch("image checksum field is corrupt")
    stored = int(digits, 16)
    blanked = raw_meta[:at] + _CRC_BLANK.encode() + raw_meta[at + 8:]
    off = _HEAD.size + len(raw_meta)
    crc = _image_crc(data[:_HEAD.size], blanked, data[off:off + _PAYLOAD_LEN.size],
                     payload if compressed else b"")
    if crc != stored:
        raise DigestMismatch("image checksum mismatch")


def _header(data: bytes) -> tuple[int, int, bytes]:
    if len(data) < _HEAD.size:
        raise ImageFormatError("image shorter than its fixed header")
    magic, version, flags, meta_len = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ImageFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionUnsupported(f"unsupported image version {version}")
    end = _HEAD.size + meta_len
    if len(data) < end + _PAYLOAD_LEN.size:
        raise ImageFormatError("image truncated inside meta header")
    return version, flags, bytes(data[_HEAD.size:end])


def peek_meta(data: bytes) -> tuple[int, int, ImageMeta]:
    """Parse header and meta without touching the payload: (version, flags, meta)."""
    version, flags, raw_meta = _header(data)
    return version, flags, ImageMeta.from_json(raw_meta)


def decode(data: bytes, verify: bool = True) -> CheckpointImage:
    version, flags, raw_meta = _header(data)
    meta = ImageMeta.from_json(raw_meta)
    off = _HEAD.size + len(raw_meta)
    (payload_len,) = _PAYLOAD_LEN.unpack_from(data, off)
    off += _PAYLOAD_LEN.size
    if len(data) != off + payload_len:
        raise ImageFormatError(
            f"payload length mismatch: header says {payload_len}, have {len(data) - off}")
    payload = memoryview(data)[off:]
    compressed = bool(flags & FLAG_COMPRESSED)
    if verify:
        _check_crc(data, raw_meta, payload, compressed)
    if compressed:
        try:
            state = gzip.decompress(payload)
        except (OSError, EOFError, zlib.error) as exc:
            raise DigestMismatch(f"corrupt compressed payload: {exc}") from None
    else:
        state = bytes(payload)
    if verify:
        if len(state) != meta.uncompressed_len or state_digest(state) != meta.state_digest:
            raise DigestMismatch(f"state digest mismatch for image of {meta.app_id!r}")
    img = CheckpointImage(meta=meta, state=state,
                          migration_aware=bool(flags & FLAG_MIGRATION_AWARE),
                          compressed=compressed, version=version)
    object.__setattr__(img, "_raw", bytes(data))
    object.__setattr__(img, "_verified", verify)
    return img
