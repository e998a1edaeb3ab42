"""Synthetic workload traces.

Profiles follow the buffer and kernel counts of common training and inference
applications, scaled down (bytes x1/1000, kernels /10, durations /100) so a
run takes seconds of host time. Generation is a pure function of the profile.
"""

from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass, replace

from gpucrsim.api import ApiCall, ApiKind, DATAFLOW_KINDS
from gpucrsim.config import DEVICE_ADDR_BASE, HOST_ADDR_BASE
from gpucrsim.sim.memory import ALIGN
from gpucrsim.speculation import KNOWN_KERNELS

OPAQUE_NAMES = ("vec_add", "fused_gelu", "dropout_fwd", "bias_act", "embedding_bwd",
                "reduce_sum", "cross_entropy")
ADVERSARIAL_NAMES = ("indirect_scatter", "gather_index", "sparse_update")
PAGE = 4096


@dataclass(frozen=True)
class WorkloadProfile:
    name: str
    n_buffers: int
    total_bytes: int
    n_kernels: int
    training: bool = True
    duration: str = "lognormal"          # "lognormal" | "fixed"
    p50_ns: int = 500
    p99_ns: int = 2_000
    n_streams: int = 1
    write_locality: float = 0.3
    param_fraction: float = 0.3
    opaque_fraction: float = 0.15
    adversarial_rate: float = 0.0
    iterations: int = 10
    eval_fraction: float = 0.0           # trailing read-mostly window (training)
    seed: int = 0

    def __post_init__(self):
        for f in ("write_locality", "param_fraction", "opaque_fraction", "adversarial_rate",
                  "eval_fraction"):
            v = getattr(self, f)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{f} must be in [0, 1], got {v}")
        if self.n_buffers < 1:
            raise ValueError("n_buffers must be at least 1")
        if self.n_kernels < 1 or self.iterations < 1 or self.n_streams < 1:
            raise ValueError("n_kernels, iterations and n_streams must be positive")

    def with_(self, **kw) -> "WorkloadProfile":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def _scaled(name, gb, buffers, kernels, training, **kw) -> WorkloadProfile:
    # bytes x1/1000, kernel count /10, durations /100 (p99 200 us -> 2 us)
    return WorkloadProfile(name=name, n_buffers=buffers, total_bytes=int(gb * 1e9 / 1000),
                           n_kernels=max(1, round(kernels / 10)), training=training,
                           p50_ns=500, p99_ns=2_000, **kw)


GPT2_INFER_PARAM_FRACTION = 1 - 709.0 / 6244.0

PROFILES: dict[str, WorkloadProfile] = {p.name: p for p in (
    _scaled("resnet-train-desk", 1.3, 224, 3_562, True, n_streams=2, write_locality=0.4,
            param_fraction=0.3, eval_fraction=0.25, iterations=6),
    _scaled("resnet-infer-desk", 0.3544, 52, 1_221, False, param_fraction=0.6,
            write_locality=0.2, iterations=8),
    _scaled("gpt2-train-desk", 30.8, 1_044, 125_482, True, n_streams=2, write_locality=0.35,
            param_fraction=0.25, eval_fraction=0.25, iterations=8),
    _scaled("gpt2-infer-desk", 6.5, 249, 72_710, False, param_fraction=GPT2_INFER_PARAM_FRACTION,
            write_locality=0.15, iterations=8),
    _scaled("bert-train-desk", 15.6, 409, 14_754, True, n_streams=2, write_locality=0.35,
            param_fraction=0.3, eval_fraction=0.25, iterations=6),
    _scaled("bert-infer-desk", 5.8, 271, 3_025, False, param_fraction=0.8,
            write_locality=0.15, iterations=6),
    _scaled("ppo-train-desk", 5.6, 97, 628_886, True, write_locality=0.5,
            param_fraction=0.3, eval_fraction=0.25, iterations=10),
    _scaled("llama2-infer-desk", 51.7, 328, 825_627, False, param_fraction=0.95,
            write_locality=0.1, iterations=8),
)}


def fuzz_profile(seed: int, adversarial_rate: float = 0.0) -> WorkloadProfile:
    """Small random profile for oracle campaigns."""
    r = random.Random(seed * 7919 + 17)
    return WorkloadProfile(
        name=f"fuzz-{seed}", n_buffers=r.randint(4, 14), total_bytes=r.randint(4, 48) * 1024,
        n_kernels=r.randint(24, 70), training=r.random() < 0.7,
        duration=r.choice(["lognormal", "fixed"]), p50_ns=r.randint(200, 3_000),
        p99_ns=r.randint(3_000, 20_000), n_streams=r.randint(1, 3),
        write_locality=r.uniform(0.1, 0.9), param_fraction=r.uniform(0.0, 0.7),
        opaque_fraction=r.uniform(0.0, 0.6), adversarial_rate=adversarial_rate,
        iterations=r.randint(2, 5), eval_fraction=r.choice([0.0, 0.0, 0.3]), seed=seed)


class _Builder:
    def __init__(self, profile: WorkloadProfile):
        self.p = profile
        self.rng = random.Random(profile.seed)
        self.calls: list[ApiCall] = []
        self.next_addr = DEVICE_ADDR_BASE
        self.next_handle = 1
        self.next_host = HOST_ADDR_BASE
        self.base: dict[int, int] = {}
        self.size: dict[int, int] = {}
        self.kernels = 0
        p = profile
        if p.duration == "lognormal":
            self.mu = math.log(p.p50_ns)
            self.sigma = max(1e-9, math.log(max(p.p99_ns, p.p50_ns) / p.p50_ns) / 2.326)

    def emit(self, kind, **kw) -> ApiCall:
        call = ApiCall(seq=len(self.calls), kind=kind, **kw)
        self.calls.append(call)
        if kind in DATAFLOW_KINDS:
            self.kernels += 1
        return call

    def malloc(self, size: int) -> int:
        h = self.next_handle
        self.next_handle += 1
        self.base[h] = self.next_addr
        self.size[h] = size
        self.next_addr += -(-size // ALIGN) * ALIGN
        self.emit(ApiKind.MALLOC, bytes=size)
        return h

    def host_region(self, n: int) -> int:
        addr = self.next_host
        self.next_host += -(-n // PAGE) * PAGE
        return addr

    def duration(self) -> int:
        if self.p.duration == "fixed":
            return self.p.p50_ns
        return max(1, int(self.rng.lognormvariate(self.mu, self.sigma)))

    def h2d(self, h: int, stream: int = 0) -> None:
        n = self.size[h]
        src = self.host_region(n)
        self.emit(ApiKind.MEMCPY_H2D, stream=stream,
                  args=[(self.base[h], 8), (src, 8), (n, 8)], bytes=n, true_writes=[h])

    def d2h(self, h: int, stream: int = 0) -> None:
        n = self.size[h]
        dst = self.host_region(n)
        self.emit(ApiKind.MEMCPY_D2H, stream=stream,
                  args=[(dst, 8), (self.base[h], 8), (n, 8)], bytes=n, true_reads=[h])

    def d2d(self, dst: int, src: int, stream: int = 0) -> None:
        n = min(self.size[dst], self.size[src])
        self.emit(ApiKind.MEMCPY_D2D, stream=stream,
                  args=[(self.base[dst], 8), (self.base[src], 8), (n, 8)], bytes=n,
                  true_reads=[src], true_writes=[dst])

    def pointer(self, h: int) -> int:
        # anywhere inside the allocation, as a kernel would index into it
        return self.base[h] + self.rng.randrange(0, self.size[h])

    def known(self, stream: int, reads: list[int], writes: list[int]) -> bool:
        """Emit a vendor-library launch if some signature fits; False otherwise."""
        rng = self.rng
        fits = []
        for name, roles in KNOWN_KERNELS.items():
            nr = sum(r == "r" for r in roles)
            nw = sum(r == "w" for r in roles)
            nrw = sum(r == "rw" for r in roles)
            if nrw == 0 and nr <= len(reads) and nw == 1 and len(writes) >= 1:
                fits.append(name)
        if not fits or not reads:
            return False
        name = rng.choice(sorted(fits))
        roles = KNOWN_KERNELS[name]
        ins = list(reads)
        out = writes[0]
        args, tr = [], []
        for role in roles:
            if role == "r":
                h = ins.pop(0) if ins else reads[0]
                args.append((self.base[h], 8))
                tr.append(h)
            elif role == "w":
                args.append((self.base[out], 8))
            else:
                args.append((rng.randint(1, 4096), 4))
        self.emit(ApiKind.LAUNCH_KNOWN, stream=stream, kernel_name=name, args=args,
                  duration_ns=self.duration(), true_reads=sorted(set(tr)), true_writes=[out])
        return True

    def accumulate(self, stream: int, grad: int, param_like: int) -> None:
        rng = self.rng
        name = "adam_step"
        args = [(self.base[param_like], 8), (self.base[grad], 8), (self.base[param_like], 8),
                (rng.randint(1, 4096), 4)]
        self.emit(ApiKind.LAUNCH_KNOWN, stream=stream, kernel_name=name, args=args,
                  duration_ns=self.duration(), true_reads=sorted({param_like, grad}),
                  true_writes=[param_like])

    def opaque(self, stream: int, reads: list[int], writes: list[int], hidden_pool: list[int]) -> None:
        rng = self.rng
        ptrs = sorted(set(reads) | set(writes))
        args = [(self.pointer(h), 8) for h in ptrs]
        # scalar arguments: element counts, strides, flags
        for _ in range(rng.randint(0, 3)):
            if rng.random() < 0.5:
                args.append((rng.randint(0, 1 << 20), 8))
            else:
                args.append((rng.randint(0, 1 << 16), 4))
        rng.shuffle(args)
        true_reads, true_writes = set(reads), set(writes)
        name = rng.choice(OPAQUE_NAMES)
        if self.p.adversarial_rate and rng.random() < self.p.adversarial_rate:
            hidden = [h for h in hidden_pool if h not in ptrs]
            if hidden:
                extra = rng.choice(hidden)
                true_writes.add(extra)
                true_reads.add(extra)
                name = rng.choice(ADVERSARIAL_NAMES)
        self.emit(ApiKind.LAUNCH_OPAQUE, stream=stream, kernel_name=name, args=args,
                  duration_ns=self.duration(), true_reads=sorted(true_reads),
                  true_writes=sorted(true_writes))


def _split_sizes(rng: random.Random, total: int, n: int) -> list[int]:
    if n <= 0:
        return []
    weights = [rng.uniform(0.5, 1.5) for _ in range(n)]
    s = sum(weights)
    sizes = [max(64, int(total * w / s)) for w in weights]
    return sizes


def gen_workload(profile: WorkloadProfile) -> list[ApiCall]:
    """Deterministic trace for a profile; exactly ``n_kernels`` dataflow calls."""
    p = profile
    b = _Builder(p)
    rng = b.rng
    n_params = 0
    if p.n_buffers >= 2 and p.param_fraction > 0:
        n_params = min(p.n_buffers - 1, max(1, round(p.n_buffers * p.param_fraction)))
    param_sizes = _split_sizes(rng, int(p.total_bytes * p.param_fraction), n_params)
    other_sizes = _split_sizes(rng, p.total_bytes - sum(param_sizes), p.n_buffers - n_params)
    params = [b.malloc(s) for s in param_sizes]
    work = [b.malloc(s) for s in other_sizes]
    for s in range(1, p.n_streams):
        b.emit(ApiKind.STREAM_CREATE, stream=s)
    streams = list(range(p.n_streams))
    # each stream owns a slice of the writable buffers; params are shared, read-only
    own = {s: [h for i, h in enumerate(work) if i % p.n_streams == s] for s in streams}
    own = {s: v for s, v in own.items() if v}
    streams = sorted(own) or [0]
    if not own:
        own = {0: list(work)}

    budget = p.n_kernels
    loads = params[:budget]
    for h in loads:
        b.h2d(h)
    if loads:
        b.emit(ApiKind.DEVICE_SYNCHRONIZE)
    remaining = budget - len(loads)
    if remaining <= 0 or not work:
        # degenerate: pad with parameter reads written nowhere is impossible, so
        # spend the rest of the budget on device-to-host copies
        while b.kernels < budget:
            b.d2h((params + work)[b.kernels % len(params + work)])
        b.emit(ApiKind.DEVICE_SYNCHRONIZE)
        return b.calls

    eval_k = int(remaining * p.eval_fraction) if p.training else 0
    main_k = remaining - eval_k
    iters = max(1, min(p.iterations, main_k))
    per_iter = [main_k // iters + (1 if i < main_k % iters else 0) for i in range(iters)]

    def body(n_k: int, writable: dict[int, list[int]], allow_io: bool) -> None:
        emitted = 0
        if allow_io and n_k >= 3:
            s0 = streams[0]
            b.h2d(writable[s0][0] if writable[s0] else own[s0][0], stream=s0)
            emitted += 1
        reserve = 1 if (allow_io and n_k - emitted >= 2) else 0
        while emitted < n_k - reserve:
            s = streams[emitted % len(streams)]
            mine = own[s]
            wset = writable.get(s) or mine[:1]
            pool = params + mine
            nr = rng.randint(1, min(3, len(pool)))
            reads = rng.sample(pool, nr)
            writes = [rng.choice(wset)]
            if rng.random() < 0.25 and len(wset) > 1:
                writes.append(rng.choice([h for h in wset if h != writes[0]]))
            # custom kernels work on activations; weights go through vendor kernels
            act_reads = rng.sample(wset, min(len(wset), nr))
            r = rng.random()
            if r < p.opaque_fraction:
                b.opaque(s, act_reads, writes, hidden_pool=mine)
            elif r < p.opaque_fraction + 0.05 and len(mine) > 1:
                src = rng.choice(pool)
                if src != writes[0]:
                    b.d2d(writes[0], src, stream=s)
                elif not b.known(s, reads, writes):
                    b.opaque(s, act_reads, writes, hidden_pool=[])
            elif p.training and r > 0.93:
                b.accumulate(s, rng.choice(mine), writes[0])
            elif not b.known(s, [h for h in reads if h != writes[0]] or reads, writes):
                b.opaque(s, act_reads, writes, hidden_pool=[])
            emitted += 1
        if reserve:
            s0 = streams[0]
            b.d2h(rng.choice(own[s0]), stream=s0)
        b.emit(ApiKind.DEVICE_SYNCHRONIZE)

    n_write = max(1, round(p.write_locality * p.n_buffers))
    for k in per_iter:
        writable = {}
        for s in streams:
            share = max(1, round(n_write * len(own[s]) / max(1, len(work))))
            writable[s] = rng.sample(own[s], min(share, len(own[s])))
        body(k, writable, allow_io=True)
    if eval_k:
        scratch = {s: own[s][:1] for s in streams}
        body(eval_k, scratch, allow_io=False)
    assert b.kernels == budget, (b.kernels, budget)
    return b.calls


def sync_points(trace: list[ApiCall]) -> list[int]:
    return [c.seq for c in trace if c.kind is ApiKind.DEVICE_SYNCHRONIZE]


def eval_window_start(trace: list[ApiCall]) -> int:
    """Seq of the last iteration boundary (start of the trailing eval window)."""
    syncs = sync_points(trace)
    return syncs[-2] if len(syncs) >= 2 else syncs[-1]


def fuzz_config(seed: int, base=None):
    """Randomized protocol knobs so campaigns cover delay, staging, staging
    exhaustion, and DAG retention paths."""
    from gpucrsim.config import SimConfig, GB, MiB

    r = random.Random(seed * 104729 + 3)
    base = base or SimConfig()
    return base.with_overrides(
        chunk_size=512,
        pcie_bw=r.choice([1, 4, 22]) * GB,
        cow_delay_threshold_ns=r.choice([0, 200, 2_000, 500_000]),
        dirty_threshold=r.uniform(0.05, 0.6),
        device_capacity=4 * MiB,
        staging_fraction=r.choice([1 / 16, 1 / 256, 1 / 4096]),
    )
