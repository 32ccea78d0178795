"""Closed-loop workloads: single-lock microbenchmark, a bucket-locked KVS
under YCSB mixes, and a global-lock transaction stand-in."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .audit import Auditor
from .cluster import Cluster, ClusterOptions
from .coherence import PAGE_BYTES, OpCtx
from .locks import CohortLock, GcpLock, Lock, LockKind, SimThread, make_lock
from .sim import ConfigError, NetworkProfile, Signal


class WorkloadKind(str, enum.Enum):
    MICROBENCH = "Microbench"
    KVS_YCSB = "KvsYcsb"
    GLOBAL_LOCK = "GlobalLock"

    @classmethod
    def parse(cls, name: str) -> "WorkloadKind":
        for k in cls:
            if str(name).lower() in (k.value.lower(), k.name.lower()):
                return k
        raise ConfigError(f"unknown workload kind {name!r}; expected one of {[k.value for k in cls]}")


@dataclass
class WorkloadSpec:
    kind: WorkloadKind = WorkloadKind.MICROBENCH
    blades: int = 2
    threads_per_blade: int = 1
    ops_per_thread: int = 1000
    read_ratio: float = 0.0
    data_bytes: int = PAGE_BYTES
    buckets: int = 10_000
    keys: int = 100_000
    zipf_theta: float = 0.99
    cs_extra_ns: int = 0
    think_ns: int = 0
    warmup_ops: int = 10
    locks: int = 1              # microbench only: ops pick one of this many locks uniformly
    prefill: bool = True        # KVS only: each blade reads every bucket once before measuring
    start_jitter_ns: int = 2000  # seeded per-thread delay before the first operation

    def __post_init__(self) -> None:
        if not isinstance(self.kind, WorkloadKind):
            self.kind = WorkloadKind.parse(self.kind)

    def validate(self) -> None:
        def need(cond, field_name, what):
            if not cond:
                raise ConfigError(f"WorkloadSpec.{field_name} {what}")
        need(self.blades >= 1, "blades", "must be >= 1")
        need(self.threads_per_blade >= 1, "threads_per_blade", "must be >= 1")
        need(self.ops_per_thread >= 0, "ops_per_thread", "must be >= 0")
        need(self.warmup_ops >= 0, "warmup_ops", "must be >= 0")
        need(0.0 <= self.read_ratio <= 1.0, "read_ratio", "must lie in [0, 1]")
        need(self.data_bytes >= 0, "data_bytes", "must be >= 0")
        need(self.buckets >= 1, "buckets", "must be >= 1")
        need(self.keys >= 1, "keys", "must be >= 1")
        need(0.0 < self.zipf_theta < 1.0, "zipf_theta", "must lie in (0, 1)")
        need(self.cs_extra_ns >= 0, "cs_extra_ns", "must be >= 0")
        need(self.think_ns >= 0, "think_ns", "must be >= 0")
        need(self.start_jitter_ns >= 0, "start_jitter_ns", "must be >= 0")
        need(self.locks >= 1, "locks", "must be >= 1")

    @property
    def total_threads(self) -> int:
        return self.blades * self.threads_per_blade


@dataclass
class RunResult:
    spec: WorkloadSpec
    lock: str
    profile: str
    completed_ops: int = 0
    elapsed_sim_ns: int = 0
    latencies: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    transactions_per_acquisition: float = 0.0
    messages_total: int = 0
    bytes_total: int = 0
    per_blade_ops: list = field(default_factory=list)
    per_blade_tx: list = field(default_factory=list)
    lock_tx: int = 0
    critical_tx: int = 0
    data_tx: int = 0
    warmup_tx: int = 0
    remote_acquisitions: int = 0
    write_acq_tx_mean: float = 0.0
    handovers: int = 0
    grants_per_lock: dict = field(default_factory=dict)
    global_acquires: int = 0
    local_passes: int = 0
    op_lock_tx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    op_critical_tx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    op_blade: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    events: int = 0
    trace_hash: str = ""
    violations: list = field(default_factory=list)
    max_queue_len: int = 0

    @property
    def throughput_ops_s(self) -> float:
        if self.elapsed_sim_ns <= 0:
            return 0.0
        return self.completed_ops * 1e9 / self.elapsed_sim_ns

    def percentile(self, q: float) -> float:
        if not len(self.latencies):
            return 0.0
        return float(np.percentile(self.latencies, q))


class ZipfGenerator:
    """YCSB-style zipfian ranks over ``n`` items (rank 0 hottest)."""

    def __init__(self, n: int, theta: float = 0.99):
        if n < 1 or not 0.0 < theta < 1.0:
            raise ConfigError("zipf needs n >= 1 and theta in (0, 1)")
        self.n = n
        self.theta = theta
        ranks = np.arange(1, n + 1, dtype=np.float64)
        self.zetan = float(np.sum(ranks ** -theta))
        zeta2 = 1.0 + 0.5 ** theta
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1.0 - (2.0 / n) ** (1.0 - theta)) / (1.0 - zeta2 / self.zetan) if n > 2 else 0.0
        self._half_pow = 0.5 ** theta

    def mass(self, rank: int) -> float:
        return (rank + 1) ** -self.theta / self.zetan

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random(size)
        uz = u * self.zetan
        out = np.floor(self.n * np.power(np.maximum(self.eta * u - self.eta + 1.0, 0.0), self.alpha))
        out = np.minimum(out, self.n - 1).astype(np.int64)
        out[uz < 1.0 + self._half_pow] = min(1, self.n - 1)
        out[uz < 1.0] = 0
        return out


def bucket_of(keys: np.ndarray, buckets: int) -> np.ndarray:
    """FNV-1a style scramble so hot keys land on unrelated buckets."""
    h = (keys.astype(np.uint64) ^ np.uint64(0xCBF29CE484222325)) * np.uint64(0x100000001B3)
    h ^= h >> np.uint64(29)
    return (h % np.uint64(buckets)).astype(np.int64)


class _Barrier:
    def __init__(self, sim, parties: int, on_release):
        self.sim = sim
        self.left = parties
        self.sig = Signal(sim)
        self.on_release = on_release

    def wait(self):
        self.left -= 1
        if self.left == 0:
            self.on_release()
            self.sig.fire()
        yield self.sig


def _incr(v):
    return v + 1


class _Driver:
    def __init__(self, spec: WorkloadSpec, lock_kind: LockKind, profile: NetworkProfile, seed: int,
                 options: ClusterOptions, cohort_budget: int, cohort_inner: LockKind | str,
                 audit: bool | Auditor):
        spec.validate()
        self.spec = spec
        self.kind = lock_kind
        if audit is True:
            audit = Auditor()
        self.audit: Auditor | None = audit or None
        self.cluster = Cluster(spec.blades, profile, seed=seed, options=options, audit=self.audit)
        self.sim = self.cluster.sim
        self.cohort_budget = cohort_budget
        self.cohort_inner = cohort_inner
        self.locks: dict[int, Lock] = {}
        self.seed = seed
        n = spec.blades * spec.threads_per_blade * spec.ops_per_thread
        self.lat = np.zeros(n, dtype=np.int64)
        self.op_lock = np.zeros(n, dtype=np.int32)
        self.op_crit = np.zeros(n, dtype=np.int32)
        self.op_blade = np.zeros(n, dtype=np.int32)
        self.op_tx = np.zeros(n, dtype=np.int32)
        self.op_excl = np.zeros(n, dtype=bool)
        self.op_acqw = np.zeros(n, dtype=np.int32)
        self.op_data = np.zeros(n, dtype=np.int32)
        self.done = 0
        self.grants: dict[int, int] = {}
        self.excl_count: dict[int, int] = {}
        self.t_start = 0
        self.t_end = 0
        self.snap = (0, 0, 0)
        self.warmup_tx = 0

    def lock(self, lid: int) -> Lock:
        lk = self.locks.get(lid)
        if lk is None:
            lk = self.locks[lid] = make_lock(self.kind, self.cluster, lid, data_bytes=self.spec.data_bytes,
                                             cohort_budget=self.cohort_budget,
                                             cohort_inner=self.cohort_inner)
        return lk

    def _plan(self, tid: int, slot: int, total: int) -> tuple[np.ndarray, np.ndarray, int, int]:
        """Lock picks, exclusive flags, warm-up length and start delay for one thread."""
        s = self.spec
        rng = np.random.default_rng([self.seed, tid])
        delay = int(rng.integers(0, s.start_jitter_ns + 1)) if s.start_jitter_ns else 0
        picks, excl = self._draw(rng, total)
        if s.kind is WorkloadKind.KVS_YCSB and s.prefill:
            mine = np.arange(slot, s.buckets, s.threads_per_blade, dtype=np.int64)
            picks = np.concatenate([mine, picks])
            excl = np.concatenate([np.zeros(len(mine), dtype=bool), excl])
            return picks, excl, len(mine) + s.warmup_ops, delay
        return picks, excl, s.warmup_ops, delay

    def _draw(self, rng: np.random.Generator, total: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.spec
        if s.kind is WorkloadKind.GLOBAL_LOCK:
            return np.zeros(total, dtype=np.int64), np.ones(total, dtype=bool)
        if s.kind is WorkloadKind.KVS_YCSB:
            keys = self.zipf.draw(rng, total)
            picks = bucket_of(keys, s.buckets)
        elif s.locks > 1:
            picks = rng.integers(0, s.locks, total)
        else:
            picks = np.zeros(total, dtype=np.int64)
        excl = rng.random(total) >= s.read_ratio
        return picks, excl

    def _release_barrier(self) -> None:
        self.t_start = self.sim.now
        self.snap = (self.sim.messages_total, self.sim.bytes_total, self.cluster.counter.total)
        self.warmup_tx = self.cluster.counter.total

    def thread(self, th: SimThread, picks, excl, warm: int, delay: int, barrier: _Barrier | None):
        s = self.spec
        sim = self.sim
        audit = self.audit
        if delay:
            yield delay
        extra = s.cs_extra_ns
        think = s.think_ns
        for i in range(len(picks)):
            if i == warm and barrier is not None:
                yield from barrier.wait()
            lid = int(picks[i])
            lock = self.locks.get(lid) or self.lock(lid)
            x = bool(excl[i])
            measured = i >= warm
            ctx = OpCtx(th.tid, th.blade, i, measured)
            t0 = sim.now
            yield from lock.acquire(th, ctx, x)
            if not lock.shared_ok:
                x = True
            if audit:
                audit.cs_enter(lid, th.blade, x)
            if lock.has_data:
                if x:
                    old = yield from lock.data_update(th, ctx, _incr)
                else:
                    old = yield from lock.data_read(th, ctx)
                if audit:
                    audit.data_seen(lid, old, x)
            t1 = sim.now
            if extra:
                yield extra
            if audit:
                audit.cs_exit(lid, x)
            if x:
                self.excl_count[lid] = self.excl_count.get(lid, 0) + 1
            yield from lock.release(th, ctx)
            if measured:
                k = self.done
                self.done += 1
                self.lat[k] = t1 - t0
                self.op_lock[k] = ctx.lock_tx
                self.op_crit[k] = ctx.critical_tx
                self.op_blade[k] = th.blade
                self.op_tx[k] = ctx.total_tx
                self.op_data[k] = ctx.data_tx
                self.op_excl[k] = x
                self.op_acqw[k] = ctx.acq_w_tx
                self.grants[lid] = self.grants.get(lid, 0) + 1
                self.t_end = sim.now
            if think:
                yield think

    def run(self) -> RunResult:
        s = self.spec
        if s.kind is WorkloadKind.KVS_YCSB:
            self.zipf = ZipfGenerator(s.keys, s.zipf_theta)
        if s.kind is not WorkloadKind.KVS_YCSB:
            for lid in range(s.locks if s.kind is WorkloadKind.MICROBENCH else 1):
                self.lock(lid)
        total = s.warmup_ops + s.ops_per_thread
        plans = []
        tid = 0
        for t in range(s.threads_per_blade):
            for b in range(s.blades):
                plans.append((SimThread(tid, b), *self._plan(tid, t, total)))
                tid += 1
        warm_any = any(p[3] for p in plans)
        barrier = _Barrier(self.sim, len(plans), self._release_barrier) if warm_any else None
        for th, picks, excl, warm, delay in plans:
            self.cluster.spawn(self.thread(th, picks, excl, warm, delay, barrier), f"t{th.tid}")
        self.cluster.run()
        return self._result()

    def _stored_value(self, lock: Lock) -> Any:
        inner = lock.inner if isinstance(lock, CohortLock) else lock
        if isinstance(inner, GcpLock) and inner.coupled:
            return self.cluster.peek(inner.line)
        if inner.data_line is None:
            return None
        return self.cluster.peek(inner.data_line)

    def _result(self) -> RunResult:
        s = self.spec
        sim = self.sim
        n = self.done
        expected = s.total_threads * s.ops_per_thread
        if n != expected:
            raise ConfigError(f"closed loop incomplete: {n} of {expected} operations finished")
        if self.audit is not None:
            finals = {lid: self._stored_value(lk) for lid, lk in self.locks.items() if lk.has_data}
            self.audit.finish(self.excl_count, finals)
        msgs0, bytes0, _ = self.snap
        op_tx = self.op_tx[:n]
        remote = op_tx > 0
        excl = self.op_excl[:n]
        per_blade_ops = np.bincount(self.op_blade[:n], minlength=s.blades).tolist()
        per_blade_tx = np.bincount(self.op_blade[:n], weights=op_tx, minlength=s.blades).astype(int).tolist()
        glob = sum(getattr(lk, "global_acquires", 0) for lk in self.locks.values())
        passes = sum(getattr(lk, "local_passes", 0) for lk in self.locks.values())
        return RunResult(
            spec=s, lock=self.kind.value, profile=self.cluster.profile.name,
            completed_ops=n,
            elapsed_sim_ns=self.t_end - self.t_start,
            latencies=self.lat[:n].copy(),
            transactions_per_acquisition=float(op_tx.sum() / remote.sum()) if remote.any() else 0.0,
            messages_total=sim.messages_total - msgs0,
            bytes_total=sim.bytes_total - bytes0,
            per_blade_ops=per_blade_ops,
            per_blade_tx=per_blade_tx,
            lock_tx=int(self.op_lock[:n].sum()),
            critical_tx=int(self.op_crit[:n].sum()),
            data_tx=int(self.op_data[:n].sum()),
            warmup_tx=self.warmup_tx,
            remote_acquisitions=int(remote.sum()),
            write_acq_tx_mean=float(self.op_acqw[:n][excl].mean()) if excl.any() else 0.0,
            handovers=sum(cs.handovers for cs in self.audit.cs.values()) if self.audit else 0,
            grants_per_lock=dict(sorted(self.grants.items())),
            global_acquires=glob,
            local_passes=passes,
            op_lock_tx=self.op_lock[:n].copy(),
            op_critical_tx=self.op_crit[:n].copy(),
            op_blade=self.op_blade[:n].copy(),
            events=sim.events_processed,
            trace_hash=sim.trace_hash() if sim.hashing else "",
            violations=list(self.audit.violations) if self.audit else [],
            max_queue_len=self.audit.max_queue_len if self.audit else 0,
        )


def run_workload(spec: WorkloadSpec, lock_kind: LockKind | str, profile: NetworkProfile, seed: int = 0, *,
                 options: ClusterOptions | None = None, cohort_budget: int = 64,
                 cohort_inner: LockKind | str = LockKind.CENTRAL_RW,
                 audit: bool | Auditor = False) -> RunResult:
    kind = lock_kind if isinstance(lock_kind, LockKind) else LockKind.parse(lock_kind)
    drv = _Driver(spec, kind, profile, seed, options or ClusterOptions(), cohort_budget, cohort_inner, audit)
    return drv.run()


def _expect(spec: WorkloadSpec, kind: WorkloadKind) -> None:
    if spec.kind is not kind:
        raise ConfigError(f"WorkloadSpec.kind is {spec.kind.value}, expected {kind.value}")


def run_microbench(spec, lock_kind, profile, seed=0, **kw) -> RunResult:
    _expect(spec, WorkloadKind.MICROBENCH)
    return run_workload(spec, lock_kind, profile, seed, **kw)


def run_kvs_ycsb(spec, lock_kind, profile, seed=0, **kw) -> RunResult:
    _expect(spec, WorkloadKind.KVS_YCSB)
    return run_workload(spec, lock_kind, profile, seed, **kw)


def run_globallock(spec, lock_kind, profile, seed=0, **kw) -> RunResult:
    _expect(spec, WorkloadKind.GLOBAL_LOCK)
    return run_workload(spec, lock_kind, profile, seed, **kw)
