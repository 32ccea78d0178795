"""Online safety checks and trace replays.

An :class:`Auditor` is passed to a :class:`~cohsync.cluster.Cluster`; the GCP
state machines and the workload driver call its hooks as events happen, so a
violation is reported at the event that caused it.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

from .coherence import Perm
from .sim import ProtocolError

if TYPE_CHECKING:
    from .cluster import Cluster


class AuditViolation(ProtocolError):
    pass


@dataclass(slots=True)
class _CsState:
    writers: int = 0
    readers: int = 0
    golden: int = 0
    exclusive: int = 0
    shared: int = 0
    last_blade: int | None = None
    handovers: int = 0


class Auditor:
    """Counts violations of the safety invariants; raises at the first one
    when ``strict``."""

    def __init__(self, strict: bool = True):
        self.strict = strict
        self.violations: list[str] = []
        self.cluster: Cluster | None = None
        self.cs: dict[Any, _CsState] = defaultdict(_CsState)
        self.holders: dict[int, set] = defaultdict(set)
        self.in_flight_queue: dict[int, int] = defaultdict(int)
        self.in_flight_enqueue: dict[int, int] = defaultdict(int)
        self.last_writer_seq: dict[int, int] = {}
        self.max_queue_len = 0
        self.approvals = 0
        self.denials = 0

    def attach(self, cluster: "Cluster") -> None:
        self.cluster = cluster

    def _fail(self, what: str) -> None:
        t = self.cluster.sim.now if self.cluster is not None else 0
        msg = f"t={t}: {what}"
        self.violations.append(msg)
        if self.strict:
            raise AuditViolation(msg)

    # -- critical sections (lock layer) ---------------------------------------
    def cs_enter(self, lock: Any, blade: int, exclusive: bool) -> None:
        s = self.cs[lock]
        if s.writers or (exclusive and s.readers):
            self._fail(f"lock {lock}: {'writer' if exclusive else 'reader'} on blade{blade} enters "
                       f"with writers={s.writers} readers={s.readers}")
        if exclusive:
            s.writers += 1
            s.exclusive += 1
        else:
            s.readers += 1
            s.shared += 1
        if s.last_blade is not None and s.last_blade != blade:
            s.handovers += 1
        s.last_blade = blade

    def cs_exit(self, lock: Any, exclusive: bool) -> None:
        s = self.cs[lock]
        if exclusive:
            s.writers -= 1
        else:
            s.readers -= 1
        if s.writers < 0 or s.readers < 0:
            self._fail(f"lock {lock}: unbalanced exit")

    def data_seen(self, lock: Any, value: Any, exclusive: bool) -> None:
        """``value`` is what the CS observed before its own update."""
        s = self.cs[lock]
        if value != s.golden:
            self._fail(f"lock {lock}: CS observed {value!r}, last committed {s.golden!r}")
        if exclusive:
            s.golden = value + 1

    # -- GCP hooks ------------------------------------------------------------
    def _custody(self, line: int) -> None:
        n = len(self.holders[line]) + self.in_flight_queue[line]
        if n > 1:
            self._fail(f"line {line:#x}: {len(self.holders[line])} holders and "
                       f"{self.in_flight_queue[line]} queue messages in flight")

    def holder_changed(self, line: int, blade: int, on: bool) -> None:
        if on:
            self.holders[line].add(blade)
            self._custody(line)
        else:
            self.holders[line].discard(blade)

    def queue_msg_sent(self, line: int) -> None:
        self.in_flight_queue[line] += 1
        self._custody(line)

    def queue_msg_recv(self, line: int) -> None:
        self.in_flight_queue[line] -= 1

    def enqueue_sent(self, line: int) -> None:
        self.in_flight_enqueue[line] += 1

    def enqueue_recv(self, line: int) -> None:
        self.in_flight_enqueue[line] -= 1

    def queue_length(self, line: int, n: int) -> None:
        if n > self.max_queue_len:
            self.max_queue_len = n
        if self.cluster is not None and n > self.cluster.n_blades:
            self._fail(f"line {line:#x}: wait queue length {n} > {self.cluster.n_blades} blades")

    def transfer_verdict(self, line: int, holder: int, approved: bool) -> None:
        if approved:
            self.approvals += 1
            if self.in_flight_enqueue[line]:
                self._fail(f"line {line:#x}: transfer from blade{holder} approved with "
                           f"{self.in_flight_enqueue[line]} forwarded request(s) in flight")
        else:
            self.denials += 1

    def writer_granted(self, line: int, seq: int) -> None:
        last = self.last_writer_seq.get(line, 0)
        if seq <= last:
            self._fail(f"line {line:#x}: writer with arrival {seq} granted after arrival {last}")
        self.last_writer_seq[line] = seq

    # -- end of run -------------------------------------------------------------
    def finish(self, expected_exclusive: dict | None = None,
               final_values: dict | None = None) -> None:
        c = self.cluster
        for lock, s in self.cs.items():
            if s.writers or s.readers:
                self._fail(f"lock {lock}: critical section still open at quiescence")
            if final_values is not None and lock in final_values and final_values[lock] != s.exclusive:
                self._fail(f"lock {lock}: stored counter {final_values[lock]!r} != "
                           f"{s.exclusive} exclusive acquisitions")
        if expected_exclusive is not None:
            for lock, n in expected_exclusive.items():
                if self.cs[lock].exclusive != n:
                    self._fail(f"lock {lock}: {self.cs[lock].exclusive} exclusive CSs, expected {n}")
        if c is None:
            return
        for b in c.blades:
            for line, st in b.gcp.lines.items():
                if st.want is not None or st.pending_acks is not None or st.stash:
                    self._fail(f"blade{b.index} line {line:#x}: acquire still pending at quiescence")
                if st.queue:
                    self._fail(f"blade{b.index} line {line:#x}: non-empty queue at quiescence")
            if b.cache.pending:
                self._fail(f"blade{b.index}: {len(b.cache.pending)} plain requests pending at quiescence")
        for line, n in self.in_flight_queue.items():
            if n:
                self._fail(f"line {line:#x}: {n} queue message(s) never delivered")
        check_swmr(c, self._fail)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_swmr(cluster: "Cluster", fail) -> None:
    """Blade-side permissions against SWMR, for plain and GCP lines."""
    perms: dict[int, list] = defaultdict(list)
    for b in cluster.blades:
        for line, st in b.cache.lines.items():
            if st.perm is not Perm.I:
                perms[line].append(st.perm)
        for line, st in b.gcp.lines.items():
            if st.perm is not Perm.I:
                perms[line].append(st.perm)
    for line, ps in perms.items():
        if Perm.M in ps and len(ps) > 1:
            fail(f"line {line:#x}: SWMR broken, blade permissions {sorted(ps)}")


class VersionReplay:
    """Streaming form of :func:`replay_version_safety`; pass an instance as a
    trace sink so long runs need not keep their records."""

    kinds = frozenset({"TransferApproved", "Enqueue"})   # all it reads; pass as trace_kinds

    def __init__(self):
        self.approved: dict[tuple, int] = {}
        self.bad: list[str] = []

    def __call__(self, r: dict) -> None:
        kind = r["kind"]
        if kind == "TransferApproved":
            key = (r["line"], r["dst"])
            self.approved[key] = max(self.approved.get(key, 0), r["seq"])
        elif kind == "Enqueue":
            key = (r["line"], r["dst"])
            if r["seq"] < self.approved.get(key, 0):
                self.bad.append(f"Enqueue seq {r['seq']} to {r['dst']} line {r['line']:#x} "
                                f"received after approval seq {self.approved[key]}")


def replay_version_safety(records: list[dict]) -> list[str]:
    """Replay a trace with local markers: a forwarded request sent before a
    holder's transfer was approved must be received before that approval."""
    rp = VersionReplay()
    for r in records:
        rp(r)
    return rp.bad

