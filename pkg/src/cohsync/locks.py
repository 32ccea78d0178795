"""Lock algorithms over the coherence substrate, a lock-service baseline and
the GCP wrapper, all behind one interface.

Every lock charges ``local_op_ns`` once on acquire and once on release (the
instructions a real lock would execute); cache hits are otherwise free.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable

from .coherence import PAGE_BYTES, OpCtx, Perm, Tag
from .sim import ConfigError, ContractViolation, Message, Role, Signal, blade, manager

if TYPE_CHECKING:
    from .cluster import Cluster


class LockKind(str, enum.Enum):
    MCS = "Mcs"
    CENTRAL_RW = "CentralizedRw"
    PERCPU_RW = "PercpuRw"
    COHORT_RW = "CohortRw"
    LOCK_SERVICE = "LockService"
    GCP = "Gcp"

    @classmethod
    def parse(cls, name: str) -> "LockKind":
        for k in cls:
            if k.value.lower() == str(name).lower() or k.name.lower() == str(name).lower():
                return k
        raise ConfigError(f"unknown lock kind {name!r}; expected one of {[k.value for k in cls]}")


@dataclass(slots=True)
class SimThread:
    tid: int
    blade: int
    holding: dict = field(default_factory=dict)   # lock id -> exclusive flag


class Lock:
    """Base: acquire/release bracket plus access to the protected data."""

    kind: LockKind
    shared_ok = True

    def __init__(self, cluster: "Cluster", lock_id: int, data_bytes: int = PAGE_BYTES):
        self.cluster = cluster
        self.lock_id = lock_id
        self.data_bytes = data_bytes
        self.local_op_ns = cluster.local_op_ns
        self.data_line = cluster.alloc(data_bytes, 0) if data_bytes else None

    def acquire(self, th: SimThread, ctx: OpCtx | None, exclusive: bool):
        if not exclusive and not self.shared_ok:
            exclusive = True
        if self.lock_id in th.holding:
            raise ContractViolation(f"thread {th.tid} re-acquires lock {self.lock_id}")
        if self.local_op_ns:
            yield self.local_op_ns
        yield from self._acquire(th, ctx, exclusive)
        th.holding[self.lock_id] = exclusive

    def release(self, th: SimThread, ctx: OpCtx | None):
        exclusive = th.holding.pop(self.lock_id, None)
        if exclusive is None:
            raise ContractViolation(f"thread {th.tid} releases lock {self.lock_id} it does not hold")
        if self.local_op_ns:
            yield self.local_op_ns
        yield from self._release(th, ctx, exclusive)

    def has_remote_waiters(self, b: int) -> bool:
        return True

    @property
    def has_data(self) -> bool:
        return self.data_line is not None

    # protected data; generators for uniformity
    def data_read(self, th: SimThread, ctx: OpCtx | None):
        return (yield from self.cluster.blades[th.blade].cache.read(ctx, self.data_line, Tag.DATA))

    def data_update(self, th: SimThread, ctx: OpCtx | None, fn: Callable[[Any], Any]):
        """Apply ``fn`` to the protected value; returns the old value."""
        return (yield from self.cluster.blades[th.blade].cache.rmw(
            ctx, self.data_line, lambda v: (fn(v), v), Tag.DATA))

    def _acquire(self, th, ctx, exclusive):
        raise NotImplementedError

    def _release(self, th, ctx, exclusive):
        raise NotImplementedError


class McsLock(Lock):
    """Queue lock: tail word plus one node line per (thread, lock).

    A node holds ``(waiting, next)``. Release reads its own node with
    exclusive intent, so the next acquire's re-initialisation is a hit.
    """

    kind = LockKind.MCS
    shared_ok = False

    def __init__(self, cluster, lock_id, data_bytes=PAGE_BYTES):
        super().__init__(cluster, lock_id, data_bytes)
        self.tail = cluster.alloc(8, None)
        self.nodes: dict[int, int] = {}

    def node(self, th: SimThread) -> int:
        n = self.nodes.get(th.tid)
        if n is None:
            n = self.nodes[th.tid] = self.cluster.alloc(16, (False, None))
        return n

    def _acquire(self, th, ctx, exclusive):
        cache = self.cluster.blades[th.blade].cache
        me = self.node(th)
        yield from cache.write(ctx, me, (True, None), Tag.ACQ_W, critical=False)
        pred = yield from cache.swap(ctx, self.tail, me, Tag.ACQ_W, critical=False)
        if pred is not None:
            yield from cache.rmw(ctx, pred, lambda v: ((v[0], me), None), Tag.ACQ_W, critical=False)
            yield from cache.spin_until(ctx, me, _not_waiting, Tag.ACQ_W)

    def _release(self, th, ctx, exclusive):
        cache = self.cluster.blades[th.blade].cache
        me = self.node(th)
        v = yield from cache.access(ctx, me, Perm.M, _value, Tag.REL, critical=True)
        succ = v[1]
        if succ is None:
            old = yield from cache.cas(ctx, self.tail, me, None, Tag.REL, critical=False)
            if old == me:
                return
            v = yield from cache.spin_until(ctx, me, _has_next, Tag.REL)
            succ = v[1]
        yield from cache.rmw(ctx, succ, lambda v: ((False, v[1]), None), Tag.REL, critical=True)


def _value(st):
    return st.data


def _not_waiting(v):
    return not v[0]


def _has_next(v):
    return v[1] is not None


class CentralizedRwLock(Lock):
    """Test-and-test-and-set reader-writer lock on one ``(readers, writer)`` word."""

    kind = LockKind.CENTRAL_RW

    def __init__(self, cluster, lock_id, data_bytes=PAGE_BYTES):
        super().__init__(cluster, lock_id, data_bytes)
        self.word = cluster.alloc(8, (0, False))

    def _acquire(self, th, ctx, exclusive):
        cache = self.cluster.blades[th.blade].cache
        tag = Tag.ACQ_W if exclusive else Tag.ACQ_R
        while True:
            yield from cache.spin_until(ctx, self.word, _no_writer, tag)
            if exclusive:
                ok = yield from cache.rmw(ctx, self.word, _set_writer, tag)
            else:
                ok = yield from cache.rmw(ctx, self.word, _add_reader, tag)
            if ok:
                break
        if exclusive:
            yield from cache.spin_until(ctx, self.word, _no_readers, tag)

    def _release(self, th, ctx, exclusive):
        cache = self.cluster.blades[th.blade].cache
        fn = _clear_writer if exclusive else _drop_reader
        yield from cache.rmw(ctx, self.word, fn, Tag.REL)


def _no_writer(v):
    return not v[1]


def _no_readers(v):
    return v[0] == 0


def _set_writer(v):
    return (v, False) if v[1] else ((v[0], True), True)


def _add_reader(v):
    return (v, False) if v[1] else ((v[0] + 1, False), True)


def _clear_writer(v):
    return (v[0], False), None


def _drop_reader(v):
    return (v[0] - 1, v[1]), None


class PercpuRwLock(Lock):
    """One reader indicator line per blade and one writer flag line."""

    kind = LockKind.PERCPU_RW

    def __init__(self, cluster, lock_id, data_bytes=PAGE_BYTES):
        super().__init__(cluster, lock_id, data_bytes)
        self.flag = cluster.alloc(8, 0)
        self.indicators = [cluster.alloc(8, 0) for _ in range(cluster.n_blades)]

    def _acquire(self, th, ctx, exclusive):
        cache = self.cluster.blades[th.blade].cache
        if exclusive:
            while True:
                yield from cache.spin_until(ctx, self.flag, _is_zero, Tag.ACQ_W)
                old = yield from cache.cas(ctx, self.flag, 0, 1, Tag.ACQ_W)
                if old == 0:
                    break
            for ind in self.indicators:
                yield from cache.spin_until(ctx, ind, _is_zero, Tag.ACQ_W)
            return
        mine = self.indicators[th.blade]
        while True:
            yield from cache.spin_until(ctx, self.flag, _is_zero, Tag.ACQ_R)
            yield from cache.faa(ctx, mine, 1, Tag.ACQ_R)
            f = yield from cache.read(ctx, self.flag, Tag.ACQ_R)
            if f == 0:
                return
            yield from cache.faa(ctx, mine, -1, Tag.ACQ_R)

    def _release(self, th, ctx, exclusive):
        cache = self.cluster.blades[th.blade].cache
        if exclusive:
            yield from cache.write(ctx, self.flag, 0, Tag.REL)
        else:
            yield from cache.faa(ctx, self.indicators[th.blade], -1, Tag.REL)


def _is_zero(v):
    return v == 0


class LockService:
    """Manager actors, one per blade; locks are partitioned by id."""

    def __init__(self, cluster: "Cluster"):
        self.cluster = cluster
        self.sim = cluster.sim
        self.queues: dict[int, deque] = {}
        self.state: dict[int, list] = {}          # lock -> [readers, writer]
        self.grants: dict[int, int] = {}
        self._tokens: dict[int, Signal] = {}
        self._next_token = 0
        for i in range(cluster.n_blades):
            self.sim.register(manager(i), self._handler(i))
        for b in cluster.blades:
            b.handlers["LockGrant"] = self._on_grant

    def manager_of(self, lock_id: int) -> int:
        return lock_id % self.cluster.n_blades

    def request(self, b: int, lock_id: int, exclusive: bool):
        self._next_token += 1
        tok = self._next_token
        sig = self._tokens[tok] = Signal(self.sim)
        self.sim.send(blade(b), manager(self.manager_of(lock_id)),
                      Message(blade(b), "LockReq", lock_id, 8, (exclusive, tok)))
        yield sig

    def release(self, b: int, lock_id: int, exclusive: bool) -> None:
        self.sim.send(blade(b), manager(self.manager_of(lock_id)),
                      Message(blade(b), "LockRel", lock_id, 8, exclusive))

    def _handler(self, i: int):
        me = manager(i)

        def handle(msg: Message) -> None:
            lock = msg.line
            st = self.state.setdefault(lock, [0, False])
            q = self.queues.setdefault(lock, deque())
            if msg.kind == "LockReq":
                q.append((msg.src, msg.body[0], msg.body[1]))
            elif msg.kind == "LockRel":
                if msg.body:
                    st[1] = False
                else:
                    st[0] -= 1
            else:
                raise ContractViolation(f"manager got {msg.kind}")
            # FIFO: grant from the head while compatible
            while q:
                src, excl, tok = q[0]
                if excl:
                    if st[1] or st[0]:
                        break
                    st[1] = True
                elif st[1]:
                    break
                else:
                    st[0] += 1
                q.popleft()
                self.grants[lock] = self.grants.get(lock, 0) + 1
                self.sim.send(me, src, Message(me, "LockGrant", lock, 8, tok))
        return handle

    def _on_grant(self, msg: Message) -> None:
        self._tokens.pop(msg.body).fire()


class LockServiceLock(Lock):
    kind = LockKind.LOCK_SERVICE

    def __init__(self, cluster, lock_id, data_bytes=PAGE_BYTES, service: LockService | None = None):
        super().__init__(cluster, lock_id, data_bytes)
        self.service = service or _service(cluster)

    def _acquire(self, th, ctx, exclusive):
        yield from self.service.request(th.blade, self.lock_id, exclusive)

    def _release(self, th, ctx, exclusive):
        self.service.release(th.blade, self.lock_id, exclusive)
        return
        yield


def _service(cluster) -> LockService:
    svc = getattr(cluster, "_lock_service", None)
    if svc is None:
        svc = cluster._lock_service = LockService(cluster)
    return svc


class GcpLock(Lock):
    """Lock realised directly by a GCP line.

    Data-coupled mode registers the protected data as the line's region, so it
    rides with every grant. Pthread mode registers only the 8-byte lock word;
    the data then lives on an ordinary coherence line.
    """

    kind = LockKind.GCP

    def __init__(self, cluster, lock_id, data_bytes=PAGE_BYTES, coupled: bool | None = None):
        self.coupled = cluster.combined_data_opt if coupled is None else coupled
        super().__init__(cluster, lock_id, 0 if self.coupled else data_bytes)
        self.data_bytes = data_bytes
        if self.coupled:
            regions = [(cluster.reserve(data_bytes), data_bytes)] if data_bytes else []
        else:
            regions = [(cluster.reserve(8), 8)]
        self.gline = cluster.register_gcp(regions, 0)
        self.line = self.gline.line

    def _acquire(self, th, ctx, exclusive):
        g = self.cluster.blades[th.blade].gcp
        yield from g.acquire(ctx, self.line, Perm.M if exclusive else Perm.S)

    def _release(self, th, ctx, exclusive):
        self.cluster.blades[th.blade].gcp.release(self.line)
        return
        yield

    def has_remote_waiters(self, b: int) -> bool:
        return self.cluster.blades[b].gcp.has_remote_waiters(self.line)

    @property
    def has_data(self) -> bool:
        # a coupled line carries a value even when its region list is empty
        return self.coupled or self.data_line is not None

    def data_read(self, th, ctx):
        if not self.coupled:
            return (yield from super().data_read(th, ctx))
        return self.cluster.blades[th.blade].gcp.read_data(self.line)

    def data_update(self, th, ctx, fn):
        if not self.coupled:
            return (yield from super().data_update(th, ctx, fn))
        g = self.cluster.blades[th.blade].gcp
        old = g.read_data(self.line)
        g.write_data(self.line, fn(old))
        return old


@dataclass(slots=True)
class _CohortBlade:
    busy: bool = False
    exclusive: bool = False
    passes: int = 0
    waiters: deque = field(default_factory=deque)


class CohortLock(Lock):
    """Blade-local funnel in front of an inter-blade lock.

    One local thread at a time holds the global lock on behalf of its blade;
    on release it passes ownership to the next local waiter while fewer than
    ``budget`` consecutive local passes have happened (or, when the global
    lock can tell, while nobody remote is waiting).
    """

    def __init__(self, inner: Lock, budget: int = 64):
        if budget < 1:
            raise ConfigError("cohort_budget must be >= 1")
        self.inner = inner
        self.cluster = inner.cluster
        self.lock_id = inner.lock_id
        self.kind = LockKind.GCP if inner.kind is LockKind.GCP else LockKind.COHORT_RW
        self.budget = budget
        self.local_op_ns = inner.local_op_ns
        self.data_line = inner.data_line
        self.shared_ok = inner.shared_ok
        self.blades = [_CohortBlade() for _ in range(self.cluster.n_blades)]
        self.global_acquires = 0
        self.local_passes = 0

    def _acquire(self, th, ctx, exclusive):
        s = self.blades[th.blade]
        if s.busy:
            sig = Signal(self.cluster.sim)
            s.waiters.append((exclusive, sig))
            how = yield sig
            if how == "passed":
                return
        s.busy = True
        yield from self.inner._acquire(th, ctx, exclusive)
        self.global_acquires += 1
        s.exclusive = exclusive
        s.passes = 0

    def _release(self, th, ctx, exclusive):
        s = self.blades[th.blade]
        if s.waiters:
            nxt_excl = s.waiters[0][0]
            if ((s.exclusive or not nxt_excl)
                    and (s.passes < self.budget or not self.inner.has_remote_waiters(th.blade))):
                s.passes += 1
                self.local_passes += 1
                s.waiters.popleft()[1].fire("passed")
                return
        yield from self.inner._release(th, ctx, s.exclusive)
        if s.waiters:
            s.waiters.popleft()[1].fire("acquire")
        else:
            s.busy = False

    def has_remote_waiters(self, b):
        return self.inner.has_remote_waiters(b)

    @property
    def has_data(self) -> bool:
        return self.inner.has_data

    def data_read(self, th, ctx):
        return (yield from self.inner.data_read(th, ctx))

    def data_update(self, th, ctx, fn):
        return (yield from self.inner.data_update(th, ctx, fn))


def make_lock(kind: LockKind | str, cluster: "Cluster", lock_id: int, *, data_bytes: int = PAGE_BYTES,
              cohort_budget: int = 64, cohort_inner: LockKind | str = LockKind.CENTRAL_RW,
              coupled: bool | None = None) -> Lock:
    kind = LockKind.parse(kind) if not isinstance(kind, LockKind) else kind
    if kind is LockKind.MCS:
        return McsLock(cluster, lock_id, data_bytes)
    if kind is LockKind.CENTRAL_RW:
        return CentralizedRwLock(cluster, lock_id, data_bytes)
    if kind is LockKind.PERCPU_RW:
        return PercpuRwLock(cluster, lock_id, data_bytes)
    if kind is LockKind.LOCK_SERVICE:
        return LockServiceLock(cluster, lock_id, data_bytes)
    if kind is LockKind.GCP:
        return CohortLock(GcpLock(cluster, lock_id, data_bytes, coupled), cohort_budget)
    inner = LockKind.parse(cohort_inner) if not isinstance(cohort_inner, LockKind) else cohort_inner
    if inner in (LockKind.GCP, LockKind.COHORT_RW):
        raise ConfigError(f"CohortRw cannot wrap {inner.value}")
    return CohortLock(make_lock(inner, cluster, lock_id, data_bytes=data_bytes), cohort_budget)
