import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpucrsim.config import (DEVICE_ADDR_BASE, GB, KiB, MiB, SimConfig, load_config,
                             parse_config_text, transfer_ns)
from gpucrsim.errors import InvalidLocator, Livelock, OutOfDeviceMemory, PastTime
from gpucrsim.sim.clock import SimClock
from gpucrsim.sim.engines import Channel, ChecksumEngine, Priority, Transfer
from gpucrsim.sim.memory import ALIGN, ChunkState, Device, HostMemory


# clock

def test_zero_delay_event_fires_on_next_step():
    clock, seen = SimClock(), []
    clock.after(0, lambda: seen.append(clock.now))
    assert clock.step()
    assert seen == [0]


def test_ties_fire_in_insertion_order():
    clock, seen = SimClock(), []
    clock.schedule(lambda: seen.append("a"), 5)
    clock.schedule(lambda: seen.append("b"), 5)
    clock.schedule(lambda: seen.append("early"), 4)
    clock.run_until()
    assert seen == ["early", "a", "b"]


def test_cancelled_event_never_fires():
    clock, seen = SimClock(), []
    eid = clock.schedule(lambda: seen.append(1), 10)
    clock.schedule(lambda: seen.append(2), 20)
    clock.cancel(eid)
    assert len(clock) == 1
    clock.run_until()
    assert seen == [2]


def test_empty_queue_runs_to_zero():
    assert SimClock().run_until() == 0


def test_run_until_time_leaves_later_event():
    clock, seen = SimClock(), []
    clock.schedule(lambda: seen.append(1), 101)
    assert clock.run_until(time=100) == 100
    assert seen == []
    clock.run_until()
    assert seen == [1]


def test_run_until_predicate():
    clock, seen = SimClock(), []
    for t in range(10):
        clock.schedule(lambda t=t: seen.append(t), t)
    clock.run_until(until=lambda: len(seen) == 3)
    assert seen == [0, 1, 2]


def test_scheduling_in_the_past_is_rejected():
    clock = SimClock()
    clock.schedule(lambda: None, 10)
    clock.run_until()
    with pytest.raises(PastTime):
        clock.schedule(lambda: None, 9)


def test_livelock_guard():
    clock = SimClock(max_events=50)

    def again():
        clock.after(0, again)

    clock.after(0, again)
    with pytest.raises(Livelock):
        clock.run_until()


# config

def test_transfer_time_arithmetic():
    assert transfer_ns(22 * GB, 22 * GB) == 10**9
    assert transfer_ns(1, 10**9) == 1
    assert transfer_ns(3, 2 * 10**9) == 2  # rounded up


def test_default_pcie_moves_4_6_gb_in_about_206_ms():
    ms = transfer_ns(int(4.6 * GB), SimConfig().pcie_bw) / 1e6
    assert ms == pytest.approx(206, rel=0.02)


def test_config_text_and_json_agree():
    a = parse_config_text("pcie_bw = 1e9\n# comment\ndedup = false\ndirty_threshold=0.5\n")
    b = parse_config_text(json.dumps({"pcie_bw": 10**9, "dedup": False, "dirty_threshold": 0.5}))
    assert a == b
    assert a.pcie_bw == 10**9 and a.dedup is False
    assert parse_config_text("") == SimConfig()


def test_unknown_config_key_rejected():
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config_text("no_such_knob = 1")
    with pytest.raises(ValueError):
        SimConfig().with_overrides(bogus=3)


def test_config_from_environment(tmp_path, monkeypatch):
    path = tmp_path / "c.conf"
    path.write_text("context_pool_size = 0\n")
    monkeypatch.setenv("GPUCRSIM_CONFIG", str(path))
    assert load_config().context_pool_size == 0
    monkeypatch.delenv("GPUCRSIM_CONFIG")
    assert load_config() == SimConfig()


# device memory

def _device(capacity=80 * GB, chunk=64 * KiB):
    return Device(capacity, chunk)


def test_allocations_are_disjoint_and_aligned():
    dev = _device()
    a, b = dev.alloc(4096), dev.alloc(4096)
    assert b.base >= a.base + 4096
    assert a.base % ALIGN == 0 and b.base % ALIGN == 0
    assert a.base == DEVICE_ADDR_BASE


def test_zero_size_allocation_rejected():
    with pytest.raises(ValueError):
        _device().alloc(0)


def test_gpt2_train_buffer_count_fits_desk_scale():
    # 1044 buffers totalling 30.8 MB (the training row at 1/1000 scale)
    dev = Device(80 * 10**6, 64 * KiB)
    sizes = [30_800_000 // 1044] * 1044
    bufs = [dev.alloc(s) for s in sizes]
    assert len(dev.active()) == 1044
    assert all(a.end <= b.base for a, b in zip(bufs, bufs[1:]))


def test_out_of_memory():
    dev = Device(10_000, 1024)
    dev.alloc(6000)
    with pytest.raises(OutOfDeviceMemory):
        dev.alloc(6000)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 5000), min_size=1, max_size=20), st.data())
def test_lookup_matches_linear_scan(sizes, data):
    dev = Device(10**9, 1024)
    bufs = [dev.alloc(s) for s in sizes]
    for h in data.draw(st.lists(st.sampled_from([b.handle for b in bufs]), unique=True, max_size=5)):
        dev.free(h)
    live = [b for b in bufs if b.handle in {a.handle for a in dev.active()}]
    probes = [DEVICE_ADDR_BASE - 1] + [b.base for b in bufs] + [b.end for b in bufs] + \
             [b.end - 1 for b in bufs] + data.draw(st.lists(
                 st.integers(DEVICE_ADDR_BASE, bufs[-1].end + 10), max_size=20))
    for addr in probes:
        expect = [b for b in live if b.base <= addr < b.end]
        got = dev.lookup(addr)
        assert (got is None and not expect) or (expect and got is expect[0])


def test_free_twice_is_an_error():
    dev = _device()
    b = dev.alloc(100)
    dev.free(b.handle)
    assert dev.lookup(b.base) is None
    with pytest.raises(InvalidLocator):
        dev.free(b.handle)


def test_install_rejects_overlap_and_low_base():
    dev = _device()
    b = dev.alloc(1000)
    with pytest.raises(InvalidLocator):
        dev.install(99, b.base + 10, 10)
    with pytest.raises(InvalidLocator):
        dev.install(99, 4096, 10)
    c = dev.install(99, b.base + 4096, 10)
    assert dev.lookup(c.base) is c


def test_chunk_bookkeeping():
    dev = Device(10**6, 100)
    b = dev.alloc(250)
    assert b.n_chunks == 3 and b.chunk_span(2) == (200, 250)
    assert b.remaining_bytes() == 250
    b.chunks[0] = ChunkState.COPIED
    assert b.remaining_bytes() == 150 and not b.fully_copied()
    b.chunks[:] = ChunkState.COPIED
    assert b.fully_copied()
    b.reset_chunks()
    assert b.remaining_bytes() == 250


# host memory

def test_host_dirty_bits_and_versions():
    host = HostMemory(64)
    before = host.read(100, 10).copy()
    assert not host.hw_dirty
    host.write(60, np.arange(10, dtype=np.uint8))  # straddles pages 0 and 1
    assert host.hw_dirty == {0, 1}
    assert host.version[0] == 1 and host.version[1] == 1
    assert list(host.read(60, 10)) == list(range(10))
    assert np.array_equal(host.read(100, 10), before)
    host.clear_dirty([0])
    assert host.hw_dirty == {1}
    with pytest.raises(InvalidLocator):
        host.read(DEVICE_ADDR_BASE - 4, 8)


def test_untouched_host_pages_are_deterministic():
    assert np.array_equal(HostMemory(64).read(0, 256), HostMemory(64).read(0, 256))


# engines

def _channel(bw=10**9, chunk=1000, aware=True):
    clock = SimClock()
    return clock, Channel("pcie", clock, bw, chunk, priority_aware=aware)


def test_single_transfer_time():
    clock, ch = _channel()
    tr = ch.submit(Transfer(5000, Priority.APP))
    clock.run_until()
    assert tr.finished_at == 5000 and ch.bytes_moved == 5000 and ch.idle()


def test_app_transfer_overtakes_queued_checkpoint():
    clock, ch = _channel()
    ck = ch.submit(Transfer(10_000, Priority.CKPT))
    clock.run_until(time=1500)
    app = ch.submit(Transfer(2000, Priority.APP))
    clock.run_until()
    # app waits only for the chunk in flight
    assert app.finished_at == 2000 + 2000
    assert ck.finished_at == 12_000
    assert app.finished_at < ck.finished_at


def test_blind_channel_is_fifo():
    clock, ch = _channel(aware=False)
    ck = ch.submit(Transfer(10_000, Priority.CKPT))
    app = ch.submit(Transfer(2000, Priority.APP))
    clock.run_until()
    assert ck.finished_at < app.finished_at


def test_device_copy_beats_pcie():
    cfg = SimConfig()
    clock = SimClock()
    dev = Channel("dev", clock, cfg.device_bw, cfg.chunk_size)
    pcie = Channel("pcie", clock, cfg.pcie_bw, cfg.chunk_size)
    a = dev.submit(Transfer(1 * 1024 * MiB, Priority.CKPT))
    b = pcie.submit(Transfer(1 * 1024 * MiB, Priority.CKPT))
    clock.run_until()
    assert a.finished_at < b.finished_at


def test_promote_and_cancel():
    clock, ch = _channel()
    first = ch.submit(Transfer(1000, Priority.CKPT))
    x = ch.submit(Transfer(1000, Priority.CKPT))
    y = ch.submit(Transfer(1000, Priority.CKPT))
    z = ch.submit(Transfer(1000, Priority.CKPT))
    ch.promote(y)
    ch.cancel(z)
    clock.run_until()
    assert first.finished_at < y.finished_at < x.finished_at
    assert not z.done and z.cancelled


def test_zero_byte_transfer_rejected():
    _, ch = _channel()
    with pytest.raises(InvalidLocator):
        ch.submit(Transfer(0, Priority.APP))


def test_checksum_engine_is_serial():
    clock = SimClock()
    eng = ChecksumEngine(clock, 10**9)
    done = []
    assert eng.submit(100, lambda: done.append(clock.now)) == 100
    assert eng.submit(50, lambda: done.append(clock.now)) == 150
    clock.run_until()
    assert done == [100, 150]
