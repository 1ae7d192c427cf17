import os
import random
import struct

import pytest
from hypothesis import given, settings, strategies as st

from pmco import tasks
from pmco.checkpoint import image as image_mod
from pmco.checkpoint.image import CheckpointImage, decode, peek_meta
from pmco.errors import CheckpointError, DigestMismatch, ImageFormatError, VersionUnsupported


def make(state: bytes, **kw) -> CheckpointImage:
    return CheckpointImage.create("app", "matmul", 1, state, task_args={"n": 4}, **kw)


def test_header_layout():
    img = make(b"abc", level=6)
    raw = img.encode()
    magic, version, flags, meta_len = struct.unpack_from(">4sHBI", raw)
    assert (magic, version) == (b"PMCO", 1)
    assert flags == image_mod.FLAG_MIGRATION_AWARE | image_mod.FLAG_COMPRESSED
    _, _, meta = peek_meta(raw)
    assert meta.marker_id == 1 and meta.uncompressed_len == 3
    (payload_len,) = struct.unpack_from(">Q", raw, 11 + meta_len)
    assert payload_len == len(raw) - 11 - meta_len - 8
    assert raw[11 + meta_len + 8:][:2] == b"\x1f\x8b"  # gzip stream


@settings(max_examples=100, deadline=None)
@given(state=st.binary(max_size=4096), aware=st.booleans(), level=st.sampled_from([0, 1, 6, 9, "auto"]),
       marker=st.integers(0, 2**32 - 1))
def test_round_trip(state, aware, level, marker):
    img = CheckpointImage.create("a", "spin", marker, state, migration_aware=aware, level=level,
                                 task_args={"steps": 3})
    back = decode(img.encode())
    assert back.state == state
    assert back.meta == img.meta
    assert back.migration_aware == aware
    assert back.compressed == img.compressed
    assert back.encode() == img.encode()


def test_compression_shrinks_zero_matrices_and_stores_noise():
    zeros = bytes(8 * 300 * 300)
    img = make(zeros)
    assert img.compressed and len(img.encode()) < len(zeros) // 50
    noise = os.urandom(1 << 20)
    stored = make(noise)
    assert not stored.compressed
    assert decode(stored.encode()).state == noise
    assert make(noise, level=6).compressed


def test_marker_range_checked():
    with pytest.raises(ImageFormatError):
        CheckpointImage.create("a", "matmul", 2**32, b"")


def test_write_and_read_files(tmp_path):
    img = make(b"state bytes")
    path = img.write(tmp_path / "snap")
    assert path.suffix == ".pmco"
    assert CheckpointImage.read(path).state == b"state bytes"


@pytest.mark.parametrize("level", [0, 6])
def test_every_flipped_byte_position_rejected(level):
    state = tasks.MatmulTask(8).serialize_state()
    raw = make(state, level=level).encode()
    for pos in range(len(raw)):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises(CheckpointError):
            decode(bytes(bad))


def test_random_flips_rejected_100_of_100():
    t = tasks.MatmulTask(64, seed=3)
    t.run()
    raw = make(t.serialize_state()).encode()
    rng = random.Random(7)
    rejected = 0
    for _ in range(100):
        bad = bytearray(raw)
        bad[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
        try:
            decode(bytes(bad))
        except CheckpointError:
            rejected += 1
    assert rejected == 100


def test_truncation_and_version():
    raw = make(b"x" * 100).encode()
    with pytest.raises(ImageFormatError):
        decode(raw[:-1])
    with pytest.raises(ImageFormatError):
        decode(raw[:5])
    with pytest.raises(VersionUnsupported):
        decode(raw[:4] + struct.pack(">H", 2) + raw[6:])


def test_corrupt_payload_is_a_digest_mismatch():
    raw = bytearray(make(bytes(range(256)) * 8, level=0).encode())
    raw[-10] ^= 0xFF
    with pytest.raises(DigestMismatch):
        decode(bytes(raw))


def test_unverified_decode_skips_checks():
    raw = bytearray(make(b"payload!" * 16, level=0).encode())
    raw[-1] ^= 0xFF
    assert decode(bytes(raw), verify=False).state[-1] == ord("!") ^ 0xFF
