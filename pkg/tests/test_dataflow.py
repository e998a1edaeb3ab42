import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpucrsim.api import (ApiCall, ApiKind, DATAFLOW_KINDS, RULES, RuleAction, dump_trace,
                          load_trace, rule_for)
from gpucrsim.config import DEVICE_ADDR_BASE
from gpucrsim.dag import EdgeKind, KernelDag, NodeState
from gpucrsim.errors import BadState, CorruptDag, FreedBuffer, PendingKernels
from gpucrsim.harness.fuzz import random_dag
from gpucrsim.sim import effects
from gpucrsim.sim.memory import Device, HostMemory
from gpucrsim.speculation import (AccessSpec, Confidence, KernelClass, KNOWN_KERNELS, Phase,
                                  classify, infer_access, validate)

EXACT = Confidence.EXACT


def _spec(reads=(), writes=(), conf=EXACT):
    return AccessSpec(frozenset(reads), frozenset(writes), conf)


def _launch(seq, stream=0, reads=(), writes=(), name="k"):
    return ApiCall(seq=seq, kind=ApiKind.LAUNCH_OPAQUE, stream=stream, kernel_name=name,
                   duration_ns=100, true_reads=list(reads), true_writes=list(writes))


# api surface

def test_rule_table_is_total():
    assert set(RULES) == set(ApiKind)
    for kind in ApiKind:
        assert rule_for(kind) is RULES[kind]
    for kind in DATAFLOW_KINDS:
        assert rule_for(kind).action is RuleAction.ADD_NODE


@pytest.mark.parametrize("kind,action,scope", [
    (ApiKind.GET_DEVICE, RuleAction.SKIP, None),
    (ApiKind.MALLOC, RuleAction.REGISTER, None),
    (ApiKind.DEVICE_SYNCHRONIZE, RuleAction.CLEAR_DAG, "device"),
    (ApiKind.STREAM_SYNCHRONIZE, RuleAction.CLEAR_DAG, "stream"),
])
def test_rule_actions(kind, action, scope):
    rule = rule_for(kind)
    assert rule.action is action and rule.scope == scope


def test_launch_opaque_uses_speculative_extractor():
    assert rule_for(ApiKind.LAUNCH_OPAQUE).extractor == "speculative"
    assert rule_for(ApiKind.MEMCPY_H2D).extractor == "exact"


def test_trace_jsonl_round_trip(tmp_path):
    calls = [
        ApiCall(0, ApiKind.MALLOC, bytes=4096),
        ApiCall(1, ApiKind.LAUNCH_OPAQUE, stream=2, kernel_name="vec_add",
                args=[(DEVICE_ADDR_BASE, 8), (7, 4)], duration_ns=900,
                true_reads=[1], true_writes=[1]),
        ApiCall(2, ApiKind.DEVICE_SYNCHRONIZE),
    ]
    path = tmp_path / "t.jsonl"
    dump_trace(calls, path)
    assert load_trace(path) == calls


# speculation

@pytest.fixture
def two_buffer_table():
    dev = Device(10**9, 1024)
    dev.install(1, 0x70000000A000, 4096)
    dev.install(2, 0x70000000B000, 4096)
    return dev


def test_vec_add_arguments_resolve_to_both_buffers(two_buffer_table):
    call = ApiCall(0, ApiKind.LAUNCH_OPAQUE, kernel_name="vec_add",
                   args=[(0x70000000A000, 8), (0x70000000B000, 8), (1024, 8)])
    spec = infer_access(call, two_buffer_table)
    assert spec.reads == spec.writes == {1, 2}
    assert spec.confidence is Confidence.SPECULATED


def test_four_byte_args_and_no_pointers(two_buffer_table):
    call = ApiCall(0, ApiKind.LAUNCH_OPAQUE, kernel_name="k",
                   args=[(0x70000000A000, 4), (5, 8)])
    spec = infer_access(call, two_buffer_table)
    assert not spec.reads and not spec.writes


def test_interior_pointer_counts(two_buffer_table):
    call = ApiCall(0, ApiKind.LAUNCH_OPAQUE, args=[(0x70000000AFFF, 8), (0x70000000C000, 8)])
    assert infer_access(call, two_buffer_table).writes == {1}


def test_known_kernel_roles(two_buffer_table):
    a, b = 0x70000000A000, 0x70000000B000
    call = ApiCall(0, ApiKind.LAUNCH_KNOWN, kernel_name="scale_copy", args=[(a, 8), (b, 8), (b, 8)])
    spec = infer_access(call, two_buffer_table)
    assert spec.reads == {1} and spec.writes == {2} and spec.confidence is EXACT
    assert set(KNOWN_KERNELS["gemm_accumulate"]) >= {"r", "rw", "s"}


@pytest.mark.parametrize("kind,expected", [
    (ApiKind.MEMCPY_D2H, KernelClass.MEMORY_MOVE),
    (ApiKind.MEMCPY_H2D, KernelClass.MEMORY_MOVE),
    (ApiKind.LAUNCH_KNOWN, KernelClass.KNOWN),
    (ApiKind.LAUNCH_OPAQUE, KernelClass.OPAQUE),
    (ApiKind.GET_DEVICE, KernelClass.NON_DATAFLOW),
    (ApiKind.MALLOC, KernelClass.NON_DATAFLOW),
])
def test_classify(kind, expected):
    assert classify(ApiCall(0, kind)) is expected


def test_memcpy_sets_are_exact(two_buffer_table):
    a, b = 0x70000000A000, 0x70000000B000
    d2d = ApiCall(0, ApiKind.MEMCPY_D2D, args=[(b, 8), (a, 8)], bytes=16)
    spec = infer_access(d2d, two_buffer_table)
    assert spec.reads == {1} and spec.writes == {2}
    report = validate(0, spec, [1], [2], Phase.RESTORE)
    assert report.ok


@pytest.mark.parametrize("true_writes,spec_writes,missed", [
    ({2}, {1, 2}, set()),
    ({3}, {1, 2}, {3}),
])
def test_checkpoint_validation(true_writes, spec_writes, missed):
    spec = _spec(spec_writes, spec_writes, Confidence.SPECULATED)
    rep = validate(7, spec, [], true_writes, Phase.CHECKPOINT)
    assert rep.missed == missed and rep.ok == (not missed)


def test_restore_validation_also_checks_reads():
    spec = _spec({1}, {1}, Confidence.SPECULATED)
    assert validate(0, spec, [2], [1], Phase.CHECKPOINT).ok
    assert validate(0, spec, [2], [1], Phase.RESTORE).missed == {2}


# kernel dag

def test_read_write_edges():
    dag = KernelDag()
    k0 = dag.add_kernel(_launch(0), _spec({1}, {1, 2}))
    b1, b2 = dag.buffer_nodes[1], dag.buffer_nodes[2]
    assert {(b1, k0, EdgeKind.READ), (k0, b1, EdgeKind.WRITE), (k0, b2, EdgeKind.WRITE)} == dag.edges


def test_fifo_edge_without_shared_buffers():
    dag = KernelDag()
    k0 = dag.add_kernel(_launch(0), _spec({1}, {1}))
    k1 = dag.add_kernel(_launch(1), _spec({2}, {2}))
    k2 = dag.add_kernel(_launch(2, stream=3), _spec({4}, {4}))
    assert (k0, k1, EdgeKind.FIFO) in dag.edges
    assert not any(b == k2 and k is EdgeKind.FIFO for _, b, k in dag.edges)
    assert dag.kernels[k1].deps == {k0} and not dag.kernels[k2].deps


def test_cross_stream_data_dependency():
    dag = KernelDag()
    k0 = dag.add_kernel(_launch(0, stream=1), _spec((), {5}))
    k1 = dag.add_kernel(_launch(1, stream=2), _spec({5}, {6}))
    k2 = dag.add_kernel(_launch(2, stream=3), _spec((), {5}))
    assert k0 in dag.kernels[k1].deps
    assert {k0, k1} <= dag.kernels[k2].deps  # write after read and after write


def test_completion_returns_write_set_and_collects():
    dag = KernelDag()
    k0 = dag.add_kernel(_launch(0), _spec({1}, {1, 2}))
    k1 = dag.add_kernel(_launch(1), _spec({3}, {3}))
    assert not dag.ready(k1)
    dag.mark_running(k0)
    with pytest.raises(BadState):
        dag.mark_running(k0)
    assert dag.on_kernel_complete(k0) == {1, 2}
    assert k0 not in dag.kernels and dag.ready(k1)
    dag.mark_running(k1)
    assert dag.on_kernel_complete(k1) == {3}
    assert len(dag) == 0


def test_clear_requires_done_and_sees_done_set():
    dag = KernelDag()
    dag.keep_done = True
    k0 = dag.add_kernel(_launch(0), _spec({1}, {1}))
    k1 = dag.add_kernel(_launch(1, stream=1), _spec({2}, {2}))
    with pytest.raises(PendingKernels):
        dag.clear()
    for k in (k0, k1):
        dag.mark_running(k)
        dag.on_kernel_complete(k)
    seen = []
    dag.clear(scope="stream", stream=1, pre_clear=lambda nodes: seen.extend(n.id for n in nodes))
    assert seen == [k1] and list(dag.kernels) == [k0]
    dag.clear(pre_clear=lambda nodes: seen.extend(n.id for n in nodes))
    assert seen == [k1, k0] and len(dag) == 0


def test_freed_buffer_rejected():
    with pytest.raises(FreedBuffer):
        KernelDag().add_kernel(_launch(0), _spec({1}, {2}), is_active=lambda h: h != 2)


def _valid_orders(dag: KernelDag, handles):
    """Brute force: orders where each kernel's inputs precede the buffers it
    first produces, and buffers no pending kernel touches come last."""
    before, seen = set(), set()
    for node in dag.kernel_order():
        fresh = node.spec.writes - node.spec.reads - seen
        before |= {(r, w) for r in node.spec.reads for w in fresh}
        seen |= node.spec.touched
    touched = sorted(seen)
    rest = sorted(set(handles) - seen)
    out = set()
    for perm in itertools.permutations(touched):
        pos = {h: i for i, h in enumerate(perm)}
        if all(pos[a] < pos[b] for a, b in before):
            out.add(perm + tuple(rest))
    return out


def test_topo_order_chain():
    dag = KernelDag()
    dag.add_kernel(_launch(0), _spec({0}, {1}))
    dag.add_kernel(_launch(1), _spec({1}, {2}))
    assert dag.topo_order_buffers() == [0, 1, 2]
    assert _valid_orders(dag, [0, 1, 2]) == {(0, 1, 2)}


def test_topo_order_empty_dag_is_handle_order():
    assert KernelDag().topo_order_buffers([5, 1, 3]) == [1, 3, 5]


def test_topo_order_two_chains_is_a_valid_interleaving():
    dag = KernelDag()
    dag.add_kernel(_launch(0, stream=1), _spec({0}, {1}))
    dag.add_kernel(_launch(1, stream=2), _spec({10}, {11}))
    dag.add_kernel(_launch(2, stream=1), _spec({1}, {2}))
    dag.add_kernel(_launch(3, stream=2), _spec({11}, {12}))
    order = tuple(dag.topo_order_buffers())
    valid = _valid_orders(dag, [])
    assert len(valid) > 1 and order in valid


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_topo_order_membership_random(seed):
    rng = random.Random(seed)
    handles = list(range(1, rng.randint(2, 7)))
    dag = random_dag(rng, handles, rng.randint(0, 5))
    extra = handles + [99]
    order = tuple(dag.topo_order_buffers(extra))
    assert sorted(order) == sorted(set(extra) | {h for n in dag.kernels.values() for h in n.spec.touched})
    assert order in _valid_orders(dag, extra)


def test_empty_dag_wire_format():
    data = KernelDag().serialize()
    assert len(data) == 16
    assert KernelDag.deserialize(data) == KernelDag()


def test_three_node_round_trip():
    dag = KernelDag()
    dag.add_kernel(_launch(0, reads=[1], writes=[2]), _spec({1}, {2}))
    k = dag.add_kernel(_launch(1), _spec({2}, {3}, Confidence.SPECULATED))
    dag.add_kernel(_launch(2, stream=4), _spec((), {1}))
    dag.mark_running(k)
    back = KernelDag.deserialize(dag.serialize())
    assert back == dag
    assert back.kernels[k].state is NodeState.RUNNING
    assert back.serialize() == dag.serialize()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_dag_round_trip(seed):
    rng = random.Random(seed)
    dag = random_dag(rng, list(range(1, 8)), rng.randint(0, 8))
    data = dag.serialize()
    assert KernelDag.deserialize(data) == dag
    cut = rng.randrange(len(data))
    with pytest.raises(CorruptDag):
        KernelDag.deserialize(data[:cut])


def test_bad_magic_and_version():
    data = bytearray(KernelDag().serialize())
    with pytest.raises(CorruptDag):
        KernelDag.deserialize(b"XDAG" + bytes(data[4:]))
    data[4] = 2
    with pytest.raises(CorruptDag):
        KernelDag.deserialize(bytes(data))


def test_pending_copy_keeps_ids_and_drops_launched():
    dag = KernelDag()
    dag.keep_done = True
    k0 = dag.add_kernel(_launch(0), _spec({1}, {2}))
    k1 = dag.add_kernel(_launch(1), _spec({2}, {3}))
    k2 = dag.add_kernel(_launch(2), _spec({3}, {4}))
    dag.mark_running(k0)
    dag.on_kernel_complete(k0)
    copy = dag.pending_copy()
    assert sorted(copy.kernels) == [k1, k2]
    assert all(copy.buffer_nodes[h] == dag.buffer_nodes[h] for h in (2, 3, 4))
    assert copy.kernels[k2].deps == {k1}
    copy.check_acyclic()


# kernel effects

def _device_with(n, size=64):
    dev = Device(10**9, 1024)
    for _ in range(n):
        dev.alloc(size)
    return dev


def test_kernel_outputs_are_deterministic_and_read_dependent():
    call = _launch(3, reads=[1], writes=[2])
    a, b = _device_with(2), _device_with(2)
    assert all(np.array_equal(x, y) for x, y in
               zip(effects.kernel_outputs(call, a).values(), effects.kernel_outputs(call, b).values()))
    b.get(1).data[5] ^= 1
    assert not np.array_equal(effects.kernel_outputs(call, a)[2], effects.kernel_outputs(call, b)[2])


def test_kernel_outputs_depend_on_seq_and_handle():
    dev = _device_with(3)
    out0 = effects.kernel_outputs(_launch(0, reads=[1], writes=[2, 3]), dev)
    out1 = effects.kernel_outputs(_launch(1, reads=[1], writes=[2, 3]), dev)
    assert not np.array_equal(out0[2], out0[3])
    assert not np.array_equal(out0[2], out1[2])


def test_keystream_prefix_property():
    long = effects.keystream(1234, 1000)
    assert np.array_equal(effects.keystream(1234, 37), long[:37])
    assert len(effects.keystream(0, 0)) == 0


def test_whole_buffer_h2d_records_upstream():
    dev, host = _device_with(2, size=8192), HostMemory(4096)
    dst = dev.get(1).base
    call = ApiCall(0, ApiKind.MEMCPY_H2D, args=[(dst, 8), (4096, 8)], bytes=8192, true_writes=[1])
    effects.host_write_at_issue(call, host)
    assert host.hw_dirty == {1, 2}
    effects.apply(call, dev, host)
    up = dev.get(1).upstream
    assert (up.first_page, up.n_pages) == (1, 2)
    assert np.array_equal(dev.get(1).data, host.read(4096, 8192))
    partial = ApiCall(1, ApiKind.MEMCPY_H2D, args=[(dst, 8), (4096, 8)], bytes=100, true_writes=[1])
    effects.apply(partial, dev, host)
    assert dev.get(1).upstream is None
