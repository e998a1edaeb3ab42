import random
import struct
import zlib

import pytest
from hypothesis import given, settings, strategies as st

from gpucrsim.config import DEVICE_ADDR_BASE
from gpucrsim.errors import CorruptImage, InvariantViolation
from gpucrsim.harness.fuzz import mutate, random_image
from gpucrsim.image import (FLAG_DEDUP, HEADER, MAGIC, Allocation, CheckpointImage, GpuRecord,
                            RecordKind, read_image, section_sizes, validate, write_image)


def _one_buffer_image(kind=RecordKind.INLINE, size=100):
    alloc = Allocation(1, DEVICE_ADDR_BASE, size)
    page = bytes(range(128))
    if kind is RecordKind.DEDUP_REF:
        rec = GpuRecord(1, kind, first_page=7, n_pages=1, crc=zlib.crc32(page[:size]))
        return CheckpointImage(host_pages={7: page}, gpu=[rec], allocations=[alloc], flags=FLAG_DEDUP)
    return CheckpointImage(host_pages={7: page}, gpu=[GpuRecord(1, kind, data=b"\x01" * size)],
                           allocations=[alloc])


def test_empty_image_is_64_bytes():
    data = write_image(CheckpointImage())
    assert len(data) == 64
    assert section_sizes(data) == {"header": 32, "host": 0, "gpu": 0, "dag": 16, "meta": 16}
    magic, version, flags, *_, cursor = HEADER.unpack_from(data)
    assert (magic, version, flags, cursor) == (MAGIC, 1, 0, -1)
    assert read_image(data) == CheckpointImage()


def test_dedup_ref_excludes_buffer_bytes():
    inline = write_image(_one_buffer_image(RecordKind.INLINE))
    dedup = write_image(_one_buffer_image(RecordKind.DEDUP_REF))
    assert len(inline) - len(dedup) == (8 + 100) - 16
    img = read_image(dedup)
    assert img.buffer_bytes(1) == bytes(range(100))
    assert img.dedup_saved() == 100 and img.inline_bytes() == 0


def test_write_read_write_is_identical():
    img = _one_buffer_image(RecordKind.DEDUP_REF)
    data = write_image(img)
    assert write_image(read_image(data)) == data


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_images_round_trip(seed):
    img = random_image(random.Random(seed))
    data = write_image(img)
    back = read_image(data)
    assert back == img
    assert write_image(back) == data


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mutations_never_crash_the_parser(seed):
    rng = random.Random(seed)
    data = write_image(random_image(rng))
    bad = mutate(data, rng)
    try:
        img = read_image(bad)
    except CorruptImage as exc:
        assert 0 <= exc.offset <= len(bad)
    else:
        # a mutation can land on free-form payload bytes or reorder records;
        # whatever parses must be coherent and re-encode canonically
        validate(img)
        assert read_image(write_image(img)) == img


def test_flipped_dedup_crc_is_detected():
    data = bytearray(write_image(_one_buffer_image(RecordKind.DEDUP_REF)))
    gpu_at = 32 + section_sizes(bytes(data))["host"]
    crc_at = gpu_at + 5 + 8 + 4
    data[crc_at] ^= 0x01
    with pytest.raises(CorruptImage, match="crc") as info:
        read_image(bytes(data))
    assert info.value.offset == gpu_at


def test_unsupported_version():
    data = bytearray(write_image(CheckpointImage()))
    struct.pack_into("<H", data, 4, 2)
    with pytest.raises(CorruptImage, match="unsupported") as info:
        read_image(bytes(data))
    assert info.value.offset == 4


@pytest.mark.parametrize("edit,reason", [
    (lambda d: b"NOPE" + d[4:], "magic"),
    (lambda d: d[:20], "truncated header"),
    (lambda d: d[:-1], "truncated section"),
    (lambda d: d + b"\x00", "trailing"),
])
def test_framing_errors(edit, reason):
    data = write_image(_one_buffer_image())
    with pytest.raises(CorruptImage, match=reason):
        read_image(edit(data))


def test_unknown_flag_rejected():
    data = bytearray(write_image(CheckpointImage()))
    struct.pack_into("<H", data, 6, 0x80)
    with pytest.raises(CorruptImage, match="flags"):
        read_image(bytes(data))


@pytest.mark.parametrize("img,reason", [
    (CheckpointImage(gpu=[GpuRecord(1, RecordKind.INLINE, data=b"x")]), "unallocated"),
    (CheckpointImage(allocations=[Allocation(1, DEVICE_ADDR_BASE, 4)]), "without a buffer record"),
    (CheckpointImage(allocations=[Allocation(1, DEVICE_ADDR_BASE, 4)],
                     gpu=[GpuRecord(1, RecordKind.INLINE, data=b"xyz")]), "expected 4"),
    (CheckpointImage(allocations=[Allocation(1, DEVICE_ADDR_BASE, 4)],
                     gpu=[GpuRecord(1, RecordKind.RECOMPUTE, node_ids=(9,))]), "missing dag node"),
    (CheckpointImage(allocations=[Allocation(1, DEVICE_ADDR_BASE, 4)],
                     gpu=[GpuRecord(1, RecordKind.DEDUP_REF, first_page=3, n_pages=1)]),
     "missing host page"),
    (CheckpointImage(flags=0x4), "unknown flags"),
])
def test_writer_refuses_inconsistent_images(img, reason):
    with pytest.raises(InvariantViolation, match=reason):
        write_image(img)


@pytest.mark.parametrize("kind", [RecordKind.INLINE, RecordKind.DEDUP_REF])
def test_encoded_sizes_match_records(kind):
    img = _one_buffer_image(kind)
    assert section_sizes(write_image(img))["gpu"] == img.gpu[0].encoded_size()
