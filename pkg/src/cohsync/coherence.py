"""Directory-based MSI over the switch, the memory blade and blade caches.

The directory is blocking per line: while an invalidation round is
outstanding, later requests for that line wait at the switch. Fills from
memory are non-blocking, so each grant carries a per-(line, blade) sequence
number and invalidations name the newest grant they supersede; a blade holds
back any invalidation that overtook its grant.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable

from .sim import MEMORY, SWITCH, ContractViolation, Message, ProtocolError, Signal, blade

if TYPE_CHECKING:
    from .cluster import Cluster

PLAIN_LINE_BYTES = 64
PAGE_BYTES = 4096


class Perm(enum.IntEnum):
    I = 0
    S = 1
    M = 2


class Tag(str, enum.Enum):
    """What a transaction was spent on, for per-operation attribution."""

    ACQ_W = "acq_w"
    ACQ_R = "acq_r"
    REL = "rel"
    DATA = "data"


@dataclass(slots=True)
class OpCtx:
    """One lock acquisition by one simulated thread; transactions land here."""

    thread: int
    blade: int
    op: int
    measured: bool = False
    lock_tx: int = 0
    critical_tx: int = 0
    data_tx: int = 0
    acq_w_tx: int = 0

    @property
    def total_tx(self) -> int:
        return self.lock_tx + self.data_tx


@dataclass
class TransactionCounter:
    """Counts directory-mediated request/grant cycles."""

    total: int = 0
    critical: int = 0
    by_tag: dict = field(default_factory=dict)
    by_line: dict = field(default_factory=dict)

    def count(self, line: int, ctx: OpCtx | None, tag: Tag, critical: bool) -> None:
        self.total += 1
        self.by_tag[tag] = self.by_tag.get(tag, 0) + 1
        self.by_line[line] = self.by_line.get(line, 0) + 1
        if critical:
            self.critical += 1
        if ctx is not None:
            if tag is Tag.DATA:
                ctx.data_tx += 1
            else:
                ctx.lock_tx += 1
                if critical:
                    ctx.critical_tx += 1
                if tag is Tag.ACQ_W:
                    ctx.acq_w_tx += 1


@dataclass(slots=True)
class DirectoryEntry:
    perm: Perm = Perm.I
    sharers: set = field(default_factory=set)
    owner: int | None = None
    queue_holder: int | None = None
    dir_version: int = 0
    # plain-MSI bookkeeping
    busy: Any = None
    waiting: deque = field(default_factory=deque)
    grant_seq: dict = field(default_factory=dict)

    def check(self) -> None:
        if self.perm is Perm.M:
            if self.owner is None or self.sharers != {self.owner}:
                raise ProtocolError(f"M entry must have owner == sharers: {self}")
        elif self.perm is Perm.S:
            if not self.sharers or self.owner is not None:
                raise ProtocolError(f"S entry needs sharers and no owner: {self}")
        elif self.sharers or self.owner is not None or self.queue_holder is not None:
            raise ProtocolError(f"I entry must be empty: {self}")

    def next_grant(self, b: int) -> int:
        g = self.grant_seq.get(b, 0) + 1
        self.grant_seq[b] = g
        return g


@dataclass(slots=True)
class BladeLineState:
    perm: Perm = Perm.I
    data: Any = None
    active_cs_count: int = 0


@dataclass(slots=True)
class _Busy:
    requester: int
    want: Perm
    acks_left: int
    had_copy: bool
    data: Any = None
    dirty: bool = False


class MemoryBlade:
    """Backing store. The switch commits write-backs synchronously (see
    ``Directory.write_back``); the WriteBack message only pays for the bytes."""

    def __init__(self, cluster: "Cluster"):
        self.cluster = cluster
        self.store: dict[int, Any] = {}
        cluster.sim.register(MEMORY, self.handle)

    def handle(self, msg: Message) -> None:
        if msg.kind == "MemRead":
            b, perm, g, size = msg.body
            self.cluster.sim.send(MEMORY, blade(b), Message(
                MEMORY, "MemData", msg.line, size, (perm, self.store.get(msg.line), g)))
        elif msg.kind != "WriteBack":
            raise ProtocolError(f"memory got {msg.kind}")


class Directory:
    """Plain-line half of the switch actor."""

    def __init__(self, cluster: "Cluster"):
        self.cluster = cluster
        self.sim = cluster.sim
        self.entries: dict[int, DirectoryEntry] = {}

    def entry(self, line: int) -> DirectoryEntry:
        e = self.entries.get(line)
        if e is None:
            e = self.entries[line] = DirectoryEntry()
        return e

    def write_back(self, line: int, data: Any, size: int) -> None:
        self.cluster.memory.store[line] = data
        self.sim.send(SWITCH, MEMORY, Message(SWITCH, "WriteBack", line, size))

    def on_fetch(self, msg: Message) -> None:
        e = self.entry(msg.line)
        if e.busy is not None:
            e.waiting.append(msg)
            return
        self._serve(e, msg)

    def _serve(self, e: DirectoryEntry, msg: Message) -> None:
        line = msg.line
        b = msg.src.index
        want, ctx, tag, critical = msg.body
        self.cluster.counter.count(line, ctx, tag, critical)
        size = self.cluster.line_size(line)
        send = self.sim.send
        if want is Perm.S:
            if e.perm is Perm.M:
                o = e.owner
                if o == b:
                    raise ProtocolError(f"blade{b} re-requests line {line:#x} it owns")
                e.busy = _Busy(b, want, 1, False)
                send(SWITCH, blade(o), Message(SWITCH, "Invalidate", line, 0, (True, e.grant_seq.get(o, 0))))
                return
            e.perm = Perm.S
            e.sharers.add(b)
            send(SWITCH, MEMORY, Message(SWITCH, "MemRead", line, 0, (b, Perm.S, e.next_grant(b), size)))
            return
        if want is not Perm.M:
            raise ContractViolation(f"request for permission {want!r}")
        if e.perm is Perm.M:
            o = e.owner
            if o == b:
                raise ProtocolError(f"blade{b} re-requests line {line:#x} it owns")
            e.busy = _Busy(b, want, 1, False)
            send(SWITCH, blade(o), Message(SWITCH, "Invalidate", line, 0, (False, e.grant_seq.get(o, 0))))
            return
        if e.perm is Perm.S:
            others = [s for s in e.sharers if s != b]
            had = b in e.sharers
            if others:
                e.busy = _Busy(b, want, len(others), had)
                for s in sorted(others):
                    send(SWITCH, blade(s), Message(SWITCH, "Invalidate", line, 0, (False, e.grant_seq.get(s, 0))))
                return
            # sole sharer upgrading: permission only
            e.perm, e.owner, e.sharers = Perm.M, b, {b}
            send(SWITCH, blade(b), Message(SWITCH, "DataReply", line, 0, (Perm.M, None, e.next_grant(b))))
            return
        e.perm, e.owner, e.sharers = Perm.M, b, {b}
        send(SWITCH, MEMORY, Message(SWITCH, "MemRead", line, 0, (b, Perm.M, e.next_grant(b), size)))

    def on_inv_ack(self, msg: Message) -> None:
        e = self.entries[msg.line]
        bz = e.busy
        if bz is None:
            raise ProtocolError(f"unexpected InvAck for line {msg.line:#x} from {msg.src}")
        dirty, data = msg.body
        line = msg.line
        if dirty:
            bz.data, bz.dirty = data, True
            self.write_back(line, data, msg.payload_bytes)
        bz.acks_left -= 1
        if bz.acks_left:
            return
        b = bz.requester
        size = self.cluster.line_size(line)
        if bz.want is Perm.S:
            o = e.owner
            e.perm, e.owner, e.sharers = Perm.S, None, {o, b}
            data = bz.data if bz.dirty else self.cluster.memory.store.get(line)
            self.sim.send(SWITCH, blade(b), Message(SWITCH, "DataReply", line, size, (Perm.S, data, e.next_grant(b))))
        else:
            e.perm, e.owner, e.sharers = Perm.M, b, {b}
            if bz.had_copy:
                payload, data = 0, None
            else:
                payload = size
                data = bz.data if bz.dirty else self.cluster.memory.store.get(line)
            self.sim.send(SWITCH, blade(b), Message(SWITCH, "DataReply", line, payload, (Perm.M, data, e.next_grant(b))))
        e.busy = None
        while e.waiting and e.busy is None:
            self._serve(e, e.waiting.popleft())


@dataclass(slots=True)
class _Waiter:
    want: Perm
    fn: Callable[[BladeLineState], Any]
    sig: Signal
    ctx: Any
    tag: Tag
    critical: bool


@dataclass(slots=True)
class _Pending:
    want: Perm | None = None          # permission of the outstanding request, if any
    waiters: list = field(default_factory=list)
    ctx: Any = None


class BladeCache:
    """Plain-line half of a compute blade: the DRAM cache controller.

    Threads call :meth:`access` with a closure that runs atomically once the
    blade holds enough permission; concurrent accesses to a line share one
    outstanding request.
    """

    def __init__(self, cluster: "Cluster", index: int):
        self.cluster = cluster
        self.sim = cluster.sim
        self.index = index
        self.aid = blade(index)
        self.lines: dict[int, BladeLineState] = {}
        self.recv_g: dict[int, int] = {}
        self.pending: dict[int, _Pending] = {}
        self.deferred: dict[int, list] = {}
        self.watchers: dict[int, list] = {}

    def perm(self, line: int) -> Perm:
        st = self.lines.get(line)
        return st.perm if st is not None else Perm.I

    # -- thread-facing ------------------------------------------------------
    def access(self, ctx: OpCtx | None, line: int, want: Perm, fn: Callable[[BladeLineState], Any],
               tag: Tag, critical: bool = True):
        """Generator: obtain ``want`` on ``line`` then return ``fn(state)``."""
        st = self.lines.get(line)
        if st is not None and st.perm >= want:
            return fn(st)
        sig = Signal(self.sim)
        p = self.pending.get(line)
        if p is None:
            p = self.pending[line] = _Pending()
        p.waiters.append(_Waiter(want, fn, sig, ctx, tag, critical))
        if p.want is None:
            self._request(line, want, ctx, tag, critical)
        result = yield sig
        return result

    def read(self, ctx, line, tag=Tag.DATA, critical=True):
        return (yield from self.access(ctx, line, Perm.S, _read, tag, critical))

    def write(self, ctx, line, value, tag=Tag.DATA, critical=True):
        def fn(st):
            st.data = value
            self._changed(line)
        return (yield from self.access(ctx, line, Perm.M, fn, tag, critical))

    def rmw(self, ctx, line, op: Callable[[Any], tuple[Any, Any]], tag=Tag.DATA, critical=True):
        """``op(old) -> (new, result)``; ``new is old`` skips the write."""
        def fn(st):
            new, res = op(st.data)
            if new is not st.data:
                st.data = new
                self._changed(line)
            return res
        return (yield from self.access(ctx, line, Perm.M, fn, tag, critical))

    def cas(self, ctx, line, expected, new, tag=Tag.DATA, critical=True):
        return (yield from self.rmw(ctx, line, lambda v: (new if v == expected else v, v), tag, critical))

    def swap(self, ctx, line, new, tag=Tag.DATA, critical=True):
        return (yield from self.rmw(ctx, line, lambda v: (new, v), tag, critical))

    def faa(self, ctx, line, delta, tag=Tag.DATA, critical=True):
        return (yield from self.rmw(ctx, line, lambda v: (v + delta, v), tag, critical))

    def spin_until(self, ctx, line, pred: Callable[[Any], bool], tag: Tag,
                   first_critical: bool = False, reread_critical: bool = True):
        """Read ``line`` until ``pred(value)``; re-reads happen only after the
        copy is invalidated or changed locally. Returns the satisfying value."""
        critical = first_critical
        while True:
            def fn(st):
                v = st.data
                if pred(v):
                    return True, v
                w = Signal(self.sim)
                self.watchers.setdefault(line, []).append(w)
                return False, w
            ok, v = yield from self.access(ctx, line, Perm.S, fn, tag, critical)
            if ok:
                return v
            yield v
            critical = reread_critical

    # -- protocol -------------------------------------------------------------
    def _request(self, line: int, want: Perm, ctx, tag, critical) -> None:
        self.pending[line].want = want
        self.sim.send(self.aid, SWITCH, Message(self.aid, "FetchReq", line, 0, (want, ctx, tag, critical)))

    def _changed(self, line: int) -> None:
        ws = self.watchers.pop(line, None)
        if ws:
            for w in ws:
                w.fire()

    def on_grant(self, msg: Message) -> None:
        line = msg.line
        perm, data, g = msg.body
        st = self.lines.get(line)
        if st is None:
            st = self.lines[line] = BladeLineState()
        st.perm = perm
        if data is not None or msg.payload_bytes:
            st.data = data
        self.recv_g[line] = g
        p = self.pending.get(line)
        if p is None or p.want is None:
            raise ProtocolError(f"{self.aid} got unsolicited grant for {line:#x}")
        p.want = None
        rest = []
        for w in p.waiters:
            if w.want <= st.perm:
                w.sig.fire(w.fn(st))
            else:
                rest.append(w)
        p.waiters = rest
        if rest:
            # a reader's fill arrived while a writer was also waiting: upgrade
            w = rest[0]
            self._request(line, Perm.M, w.ctx, w.tag, w.critical)
        else:
            del self.pending[line]
        held = self.deferred.get(line)
        if held:
            ready = [m for m in held if m.body[1] <= g]
            if ready:
                self.deferred[line] = [m for m in held if m.body[1] > g]
                for m in ready:
                    self._apply_invalidate(m)

    def on_invalidate(self, msg: Message) -> None:
        if msg.body[1] > self.recv_g.get(msg.line, 0):
            self.deferred.setdefault(msg.line, []).append(msg)
            return
        self._apply_invalidate(msg)

    def _apply_invalidate(self, msg: Message) -> None:
        line = msg.line
        downgrade = msg.body[0]
        st = self.lines.get(line)
        if st is None or st.perm is Perm.I:
            raise ProtocolError(f"{self.aid} invalidated on uncached line {line:#x}")
        dirty = st.perm is Perm.M
        size = self.cluster.line_size(line) if dirty else 0
        data = st.data if dirty else None
        if downgrade:
            st.perm = Perm.S
        else:
            st.perm = Perm.I
            st.data = None
            self._changed(line)
        self.sim.mark(self.aid, "Invalidate", line)
        self.sim.send(self.aid, SWITCH, Message(self.aid, "InvAck", line, size, (dirty, data)))


def _read(st: BladeLineState) -> Any:
    return st.data
