"""Generalized coherence: Acquire/Release, blade-resident wait queues,
version-checked queue transfers and multi-region lines.

Directory view of a GCP line:

* no ``queue_holder``: line is I, or S held by readers (Case (i));
* ``queue_holder`` with perm M: the owner holds the queue (Case (ii));
* ``queue_holder`` with perm S: the holder is the next writer, waiting for
  the current readers' acks (Case (iii)).

Every M grant names the grantee queue holder, so an idle owner that kept the
line after release (locality) still receives forwarded requests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, NamedTuple

from .coherence import DirectoryEntry, OpCtx, Perm, Tag
from .sim import MEMORY, SWITCH, ConfigError, ContractViolation, Message, ProtocolError, Signal, blade

if TYPE_CHECKING:
    from .cluster import Cluster

QUEUE_ENTRY_BYTES = 8
GCP_LINE_BASE = 1 << 62


@dataclass(frozen=True)
class SharedMemoryList:
    """Ordered (base, size) regions protected by one lock; may be empty."""

    regions: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "regions", tuple((int(b), int(s)) for b, s in self.regions))
        for base, size in self.regions:
            if base < 0 or size <= 0:
                raise ConfigError(f"bad region ({base:#x}, {size})")
        if _overlaps(self.regions):
            raise ConfigError(f"regions overlap: {self.regions}")

    @property
    def total_bytes(self) -> int:
        return sum(s for _, s in self.regions)

    def __len__(self) -> int:
        return len(self.regions)


def _overlaps(regions) -> bool:
    spans = sorted(regions)
    return any(b0 + s0 > b1 for (b0, s0), (b1, _) in zip(spans, spans[1:]))


@dataclass(frozen=True)
class GcpLine:
    line: int
    regions: SharedMemoryList

    @property
    def size(self) -> int:
        return self.regions.total_bytes


class GcpRegistry:
    """Rejects any region that overlaps a region of an already registered line."""

    def __init__(self):
        self._spans: list[tuple[int, int, int]] = []
        self.lines: dict[int, GcpLine] = {}
        self._next = GCP_LINE_BASE

    def register(self, regions: SharedMemoryList) -> GcpLine:
        for base, size in regions.regions:
            for b, s, owner in self._spans:
                if base < b + s and b < base + size:
                    raise ConfigError(
                        f"region ({base:#x}, {size}) overlaps line {owner:#x} region ({b:#x}, {s})")
        gl = GcpLine(self._next, regions)
        self._next += 1
        self.lines[gl.line] = gl
        self._spans.extend((b, s, gl.line) for b, s in regions.regions)
        return gl


class WaitEntry(NamedTuple):
    blade: int
    want: Perm
    seq: int          # arrival order of the Acquire at the switch


# ---------------------------------------------------------------------------
# switch side


class GcpDirectory:
    def __init__(self, cluster: "Cluster"):
        self.cluster = cluster
        self.sim = cluster.sim
        self.entries: dict[int, DirectoryEntry] = {}
        self._acq_seq = 0

    def entry(self, line: int) -> DirectoryEntry:
        e = self.entries.get(line)
        if e is None:
            e = self.entries[line] = DirectoryEntry()
        return e

    def on_acquire(self, msg: Message) -> None:
        line = msg.line
        b = msg.src.index
        want, ctx, tag = msg.body
        e = self.entry(line)
        self.cluster.counter.count(line, ctx, tag, True)
        self._acq_seq += 1
        entry = WaitEntry(b, want, self._acq_seq)
        audit = self.cluster.audit
        if e.queue_holder is not None:
            e.dir_version += 1
            if audit:
                audit.enqueue_sent(line)
            self.sim.send(SWITCH, blade(e.queue_holder),
                          Message(SWITCH, "Enqueue", line, QUEUE_ENTRY_BYTES, entry))
            return
        size = self.cluster.line_size(line)
        if e.perm is Perm.M:
            raise ProtocolError(f"GCP line {line:#x} in M without a queue holder")
        if want is Perm.S:
            e.perm = Perm.S
            e.sharers.add(b)
            self.sim.send(SWITCH, MEMORY, Message(SWITCH, "MemRead", line, 0, (b, Perm.S, e.next_grant(b), size)))
            return
        others = sorted(s for s in e.sharers if s != b)
        had = b in e.sharers
        if others:
            # Case (i) -> (iii): the writer holds the queue while readers drain
            e.sharers = set(others) | {b}
            for s in others:
                self.sim.send(SWITCH, blade(s), Message(
                    SWITCH, "WriterWaitNotify", line, 0, (b, e.grant_seq.get(s, 0))))
        else:
            e.perm, e.owner, e.sharers = Perm.M, b, {b}
        e.queue_holder = b
        e.dir_version = 0
        if audit:
            audit.queue_msg_sent(line)
        data = None if had else self.cluster.memory.store.get(line)
        self.sim.send(SWITCH, blade(b), Message(
            SWITCH, "GrantM", line, 0 if had else size, (data, len(others), entry.seq, e.next_grant(b))))

    def on_qtransfer(self, msg: Message) -> None:
        line = msg.line
        h = msg.src.index
        plan, readers, writer, queue, data, hv = msg.body
        e = self.entries.get(line)
        audit = self.cluster.audit
        if audit:
            audit.queue_msg_recv(line)
        if e is None or e.queue_holder != h:
            raise ProtocolError(f"queue transfer for {line:#x} from non-holder blade{h}")
        if hv != e.dir_version:
            self.sim.mark(SWITCH, "TransferDenied", line, blade(h))
            if audit:
                audit.queue_msg_sent(line)
                audit.transfer_verdict(line, h, False)
            whole = list(readers) + ([writer] if writer is not None else []) + list(queue)
            self.sim.send(SWITCH, blade(h), Message(SWITCH, "QTransferDeny", line, msg.payload_bytes, (whole, data)))
            return
        self.sim.mark(SWITCH, "TransferApproved", line, blade(h))
        if audit:
            audit.transfer_verdict(line, h, True)
        size = self.cluster.line_size(line)
        e.dir_version = 0
        self.cluster.switch.plain.write_back(line, data, size)
        send = self.sim.send
        if plan == "evict":
            e.perm, e.owner, e.sharers, e.queue_holder = Perm.I, None, set(), None
        elif plan == "writer":
            w = writer.blade
            e.perm, e.owner, e.sharers, e.queue_holder = Perm.M, w, {w}, w
            if audit:
                audit.queue_msg_sent(line)
            send(SWITCH, blade(w), Message(SWITCH, "QTransferApprove", line,
                                           size + QUEUE_ENTRY_BYTES * len(queue),
                                           (queue, data, 0, writer.seq, e.next_grant(w))))
        else:
            rs = [r.blade for r in readers]
            w = writer.blade if writer is not None else None
            e.perm, e.owner = Perm.S, None
            e.sharers = set(rs)
            e.queue_holder = w
            for r in rs:
                send(SWITCH, blade(r), Message(SWITCH, "GrantS", line, size, (data, w, e.next_grant(r))))
            if w is not None:
                e.sharers.add(w)
                if audit:
                    audit.queue_msg_sent(line)
                send(SWITCH, blade(w), Message(SWITCH, "QTransferApprove", line,
                                               size + QUEUE_ENTRY_BYTES * len(queue),
                                               (queue, data, len(rs), writer.seq, e.next_grant(w))))

    def on_dir_update(self, msg: Message) -> None:
        e = self.entries[msg.line]
        w = msg.src.index
        if e.queue_holder != w:
            raise ProtocolError(f"DirUpdate for {msg.line:#x} from non-holder blade{w}")
        e.perm, e.owner, e.sharers = Perm.M, w, {w}

    def on_release(self, msg: Message) -> None:
        e = self.entries[msg.line]
        e.sharers.discard(msg.src.index)
        if e.perm is Perm.S and not e.sharers:
            e.perm = Perm.I


# ---------------------------------------------------------------------------
# blade side


@dataclass(slots=True)
class GcpBladeLine:
    perm: Perm = Perm.I
    data: Any = None
    active_cs_count: int = 0
    holder: bool = False
    queue: list | None = None
    holder_version: int = 0
    pending_acks: int | None = None     # set while waiting as Case (iii) writer
    acks: int = 0
    waiting_writer: int | None = None   # reader: writer to ack on release
    want: Perm | None = None            # outstanding Acquire
    sig: Signal | None = None
    in_flight: bool = False             # QTransferReq sent, verdict unknown
    stash: list = field(default_factory=list)
    recv_g: int = 0
    deferred: list = field(default_factory=list)
    grant_seq: int = 0                  # switch arrival order of the last remote writer grant


class GcpBlade:
    """GCP half of a compute blade's cache controller."""

    def __init__(self, cluster: "Cluster", index: int):
        self.cluster = cluster
        self.sim = cluster.sim
        self.index = index
        self.aid = blade(index)
        self.lines: dict[int, GcpBladeLine] = {}
        self.locality = cluster.locality_opt

    def state(self, line: int) -> GcpBladeLine:
        st = self.lines.get(line)
        if st is None:
            st = self.lines[line] = GcpBladeLine()
        return st

    # -- lock-facing --------------------------------------------------------
    def acquire(self, ctx: OpCtx | None, line: int, want: Perm):
        """Generator; returns True when granted locally (no messages)."""
        if want is Perm.I:
            raise ContractViolation("acquire with want=I")
        st = self.state(line)
        if st.want is not None or st.active_cs_count:
            raise ContractViolation(f"blade{self.index} already acquiring/holding GCP line {line:#x}")
        if (st.perm >= want and not st.in_flight and st.pending_acks is None
                and st.waiting_writer is None and not (st.holder and st.queue)):
            st.active_cs_count = 1
            return True
        st.want = want
        st.sig = sig = Signal(self.sim)
        tag = Tag.ACQ_W if want is Perm.M else Tag.ACQ_R
        self.sim.send(self.aid, SWITCH, Message(self.aid, "Acquire", line, 0, (want, ctx, tag)))
        yield sig
        return False

    def release(self, line: int) -> None:
        st = self.lines.get(line)
        if st is None or st.active_cs_count <= 0:
            raise ContractViolation(f"blade{self.index} releases GCP line {line:#x} it does not hold")
        st.active_cs_count -= 1
        self.sim.mark(self.aid, "Release", line)
        if st.active_cs_count == 0:
            self._idle(line, st)

    def read_data(self, line: int) -> Any:
        st = self.lines[line]
        if not st.active_cs_count or st.perm is Perm.I:
            raise ContractViolation("GCP data read outside a critical section")
        return st.data

    def write_data(self, line: int, value: Any) -> None:
        st = self.lines[line]
        if not st.active_cs_count or st.perm is not Perm.M:
            raise ContractViolation("GCP data write without an exclusive critical section")
        st.data = value

    def has_remote_waiters(self, line: int) -> bool:
        st = self.lines.get(line)
        if st is None:
            return False
        return bool(st.queue) or st.waiting_writer is not None or bool(st.stash)

    # -- internals ------------------------------------------------------------
    def _settle(self, line: int, st: GcpBladeLine) -> None:
        # any grant implies the switch already approved an earlier transfer
        if st.in_flight:
            if st.stash:
                raise ProtocolError(f"blade{self.index} granted {line:#x} with stashed requests")
            st.in_flight = False

    def _enter(self, line: int, st: GcpBladeLine) -> None:
        self._settle(line, st)
        st.active_cs_count = 1
        st.want = None
        sig, st.sig = st.sig, None
        if sig is None:
            raise ProtocolError(f"blade{self.index} granted {line:#x} without an outstanding acquire")
        self.sim.mark(self.aid, "CsEnter", line)
        sig.fire(False)

    def _drop(self, line: int, st: GcpBladeLine) -> None:
        st.perm = Perm.I
        st.data = None
        self.sim.mark(self.aid, "Invalidate", line)

    def _set_holder(self, line: int, st: GcpBladeLine, on: bool) -> None:
        st.holder = on
        audit = self.cluster.audit
        if audit:
            audit.holder_changed(line, self.index, on)

    def _idle(self, line: int, st: GcpBladeLine) -> None:
        if st.perm is Perm.S:
            if st.waiting_writer is not None:
                self.sim.mark(self.aid, "Dequeue", line, blade(st.waiting_writer))
                self._ack_writer(line, st)
            elif not self.locality:
                self._drop(line, st)
                self.sim.send(self.aid, SWITCH, Message(self.aid, "Release", line, 0))
        elif st.perm is Perm.M and st.holder and not st.in_flight and st.pending_acks is None:
            self._dispatch_queue(line, st)

    def _ack_writer(self, line: int, st: GcpBladeLine) -> None:
        w = st.waiting_writer
        st.waiting_writer = None
        if st.perm is not Perm.I:
            self._drop(line, st)
        self.sim.send(self.aid, blade(w), Message(self.aid, "InvAckToWriter", line, 0))

    def _dispatch_queue(self, line: int, st: GcpBladeLine) -> None:
        """Release planning, run by the writer that holds the queue once idle."""
        q = st.queue
        if not q:
            if self.locality:
                return            # drop the queue, keep the line cached
            plan, readers, writer, rest = "evict", (), None, ()
        elif q[0].want is Perm.M:
            plan, readers, writer, rest = "writer", (), q[0], tuple(q[1:])
        else:
            i = 0
            while i < len(q) and q[i].want is Perm.S:
                i += 1
            readers = tuple(q[:i])
            if i < len(q):
                plan, writer, rest = "readers_then_writer", q[i], tuple(q[i + 1:])
            else:
                plan, writer, rest = "readers", None, ()
        size = self.cluster.line_size(line)
        body = (plan, readers, writer, rest, st.data, st.holder_version)
        n = len(q or ())
        st.in_flight = True
        st.queue = None
        self._set_holder(line, st, False)
        st.perm = Perm.I
        st.data = None
        audit = self.cluster.audit
        if audit:
            audit.queue_msg_sent(line)
        self.sim.mark(self.aid, "Dequeue", line)
        self.sim.send(self.aid, SWITCH, Message(self.aid, "QTransferReq", line,
                                                size + QUEUE_ENTRY_BYTES * n, body))

    # -- message handlers -----------------------------------------------------
    def on_fill(self, msg: Message) -> None:
        perm, data, g = msg.body
        st = self.state(msg.line)
        st.perm = perm
        st.data = data
        st.recv_g = g
        self._enter(msg.line, st)
        self._release_deferred(msg.line, st)

    def on_grant_m(self, msg: Message) -> None:
        line = msg.line
        data, pending, seq, g = msg.body
        st = self.state(line)
        audit = self.cluster.audit
        if audit:
            audit.queue_msg_recv(line)
        self._settle(line, st)
        st.recv_g = g
        if msg.payload_bytes or data is not None:
            st.data = data
        st.queue = []
        st.holder_version = 0
        self._set_holder(line, st, True)
        st.grant_seq = seq
        if pending == 0:
            st.perm = Perm.M
            if audit:
                audit.writer_granted(line, seq)
            self._enter(line, st)
        else:
            st.pending_acks = pending
            self._try_commit(line, st)
        self._release_deferred(line, st)

    def on_grant_s(self, msg: Message) -> None:
        data, w, g = msg.body
        st = self.state(msg.line)
        st.perm = Perm.S
        st.data = data
        st.recv_g = g
        st.waiting_writer = w
        self._enter(msg.line, st)
        self._release_deferred(msg.line, st)

    def on_approve(self, msg: Message) -> None:
        line = msg.line
        queue, data, pending, seq, g = msg.body
        st = self.state(line)
        audit = self.cluster.audit
        if audit:
            audit.queue_msg_recv(line)
        self._settle(line, st)
        st.recv_g = g
        st.data = data
        st.queue = list(queue)
        st.holder_version = 0
        self._set_holder(line, st, True)
        st.grant_seq = seq
        if pending == 0:
            st.perm = Perm.M
            if audit:
                audit.writer_granted(line, seq)
            self._enter(line, st)
        else:
            st.pending_acks = pending
            self._try_commit(line, st)
        self._release_deferred(line, st)

    def on_deny(self, msg: Message) -> None:
        line = msg.line
        queue, data = msg.body
        st = self.state(line)
        audit = self.cluster.audit
        if audit:
            audit.queue_msg_recv(line)
        if not st.in_flight:
            raise ProtocolError(f"blade{self.index} denied without a pending transfer on {line:#x}")
        st.in_flight = False
        st.perm = Perm.M
        st.data = data
        st.queue = list(queue) + st.stash
        st.stash = []
        self._set_holder(line, st, True)
        if audit:
            audit.queue_length(line, len(st.queue))
        self.sim.mark(self.aid, "TransferRetry", line)
        if st.active_cs_count == 0:
            self._idle(line, st)

    def on_enqueue(self, msg: Message) -> None:
        line = msg.line
        entry: WaitEntry = msg.body
        st = self.state(line)
        audit = self.cluster.audit
        if audit:
            audit.enqueue_recv(line)
        st.holder_version += 1
        if st.in_flight:
            st.stash.append(entry)
            return
        if not st.holder:
            raise ProtocolError(f"Enqueue for {line:#x} delivered to non-holder blade{self.index}")
        st.queue.append(entry)
        if audit:
            audit.queue_length(line, len(st.queue))
        if st.active_cs_count == 0 and st.pending_acks is None and st.perm is Perm.M:
            self._dispatch_queue(line, st)

    def on_notify(self, msg: Message) -> None:
        st = self.state(msg.line)
        if msg.body[1] > st.recv_g:
            st.deferred.append(msg)
            return
        self._apply_notify(msg.line, st, msg.body[0])

    def _apply_notify(self, line: int, st: GcpBladeLine, w: int) -> None:
        if st.perm is Perm.S and st.active_cs_count:
            st.waiting_writer = w
        else:
            st.waiting_writer = w
            self._ack_writer(line, st)

    def _release_deferred(self, line: int, st: GcpBladeLine) -> None:
        if st.deferred:
            ready = [m for m in st.deferred if m.body[1] <= st.recv_g]
            st.deferred = [m for m in st.deferred if m.body[1] > st.recv_g]
            for m in ready:
                self._apply_notify(line, st, m.body[0])

    def on_writer_ack(self, msg: Message) -> None:
        st = self.state(msg.line)
        st.acks += 1
        if st.pending_acks is not None:
            self._try_commit(msg.line, st)

    def _try_commit(self, line: int, st: GcpBladeLine) -> None:
        if st.acks < st.pending_acks:
            return
        st.acks -= st.pending_acks
        st.pending_acks = None
        st.perm = Perm.M
        audit = self.cluster.audit
        if audit:
            audit.writer_granted(line, st.grant_seq)
        self.sim.mark(self.aid, "Commit", line)
        self.sim.send(self.aid, SWITCH, Message(self.aid, "DirUpdate", line, 0))
        self._enter(line, st)
