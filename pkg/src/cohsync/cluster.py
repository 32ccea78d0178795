"""Wires blades, the switch directory and the memory blade into one simulation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from .coherence import PLAIN_LINE_BYTES, BladeCache, Directory, MemoryBlade, Perm, TransactionCounter
from .gcp import GCP_LINE_BASE, GcpBlade, GcpDirectory, GcpLine, GcpRegistry, SharedMemoryList
from .sim import SWITCH, ConfigError, Message, NetworkProfile, ProtocolError, Simulator, blade

HEAP_BASE = 0x1000


@dataclass
class ClusterOptions:
    locality_opt: bool = True
    combined_data_opt: bool = True
    local_op_ns: int = 100
    reorder_stress: bool = False
    trace: bool = False
    trace_sink: Any = None
    local_markers: bool = False
    max_events: int = 10**9
    hash_trace: bool = False
    trace_kinds: frozenset | None = None


class Switch:
    """The programmable switch: plain MSI directory plus GCP extensions."""

    def __init__(self, cluster: "Cluster"):
        self.plain = Directory(cluster)
        self.gcp = GcpDirectory(cluster)
        self._handlers = {
            "FetchReq": self.plain.on_fetch,
            "InvAck": self.plain.on_inv_ack,
            "Acquire": self.gcp.on_acquire,
            "QTransferReq": self.gcp.on_qtransfer,
            "DirUpdate": self.gcp.on_dir_update,
            "Release": self.gcp.on_release,
        }
        cluster.sim.register(SWITCH, self.handle)

    def handle(self, msg: Message) -> None:
        h = self._handlers.get(msg.kind)
        if h is None:
            raise ProtocolError(f"switch got unexpected {msg.kind}")
        h(msg)


class Blade:
    def __init__(self, cluster: "Cluster", index: int):
        self.index = index
        self.cluster = cluster
        self.cache = BladeCache(cluster, index)
        self.gcp = GcpBlade(cluster, index)
        self.handlers: dict[str, Callable[[Message], None]] = {
            "DataReply": self.cache.on_grant,
            "Invalidate": self.cache.on_invalidate,
            "GrantM": self.gcp.on_grant_m,
            "GrantS": self.gcp.on_grant_s,
            "Enqueue": self.gcp.on_enqueue,
            "QTransferApprove": self.gcp.on_approve,
            "QTransferDeny": self.gcp.on_deny,
            "WriterWaitNotify": self.gcp.on_notify,
            "InvAckToWriter": self.gcp.on_writer_ack,
        }
        cluster.sim.register(blade(index), self.handle)

    def handle(self, msg: Message) -> None:
        if msg.kind == "MemData":
            if msg.line >= GCP_LINE_BASE:
                self.gcp.on_fill(msg)
            else:
                self.cache.on_grant(msg)
            return
        h = self.handlers.get(msg.kind)
        if h is None:
            raise ProtocolError(f"blade{self.index} got unexpected {msg.kind}")
        h(msg)


class Cluster:
    """One isolated simulation: ``blades`` compute blades, a switch and a memory blade."""

    def __init__(self, blades: int, profile: NetworkProfile, *, seed: int = 0,
                 options: ClusterOptions | None = None, audit: Any = None):
        if blades < 1:
            raise ConfigError("blade count must be >= 1")
        self.options = opts = options or ClusterOptions()
        self.n_blades = blades
        self.profile = profile
        self.sim = Simulator(profile, seed=seed, reorder_stress=opts.reorder_stress,
                             trace=opts.trace, trace_sink=opts.trace_sink,
                             local_markers=opts.local_markers, max_events=opts.max_events,
                             hash_trace=opts.hash_trace, trace_kinds=opts.trace_kinds)
        self.locality_opt = opts.locality_opt
        self.combined_data_opt = opts.combined_data_opt
        self.local_op_ns = opts.local_op_ns
        self.counter = TransactionCounter()
        self.audit = audit
        self.registry = GcpRegistry()
        self._sizes: dict[int, int] = {}
        self._brk = HEAP_BASE
        self.memory = MemoryBlade(self)
        self.switch = Switch(self)
        self.blades = [Blade(self, i) for i in range(blades)]
        if audit is not None:
            audit.attach(self)
        self.sim.add_diagnostic(self.describe_pending)

    # -- memory layout --------------------------------------------------------
    def alloc(self, size: int = PLAIN_LINE_BYTES, init: Any = 0) -> int:
        """Allocate a plain coherence line; returns its (aligned) address."""
        align = PLAIN_LINE_BYTES
        addr = (self._brk + align - 1) // align * align
        self._brk = addr + max(size, align)
        self._sizes[addr] = size
        self.memory.store[addr] = init
        return addr

    def reserve(self, size: int) -> int:
        """Address space for GCP regions (not a coherence line itself)."""
        addr = (self._brk + 7) // 8 * 8
        self._brk = addr + size
        return addr

    def register_gcp(self, regions: SharedMemoryList | list, init: Any = 0) -> GcpLine:
        if not isinstance(regions, SharedMemoryList):
            regions = SharedMemoryList(tuple(regions))
        gl = self.registry.register(regions)
        self._sizes[gl.line] = gl.size
        self.memory.store[gl.line] = init
        return gl

    def line_size(self, line: int) -> int:
        return self._sizes[line]

    def peek(self, line: int) -> Any:
        """Current value of a line: the M copy if a blade has one, else memory."""
        for b in self.blades:
            st = b.gcp.lines.get(line) if line >= GCP_LINE_BASE else b.cache.lines.get(line)
            if st is not None and st.perm is Perm.M:
                return st.data
        return self.memory.store.get(line)

    def is_gcp(self, line: int) -> bool:
        return line >= GCP_LINE_BASE

    # -- running ----------------------------------------------------------------
    def spawn(self, gen, name: str = ""):
        return self.sim.spawn(gen, name)

    def run(self, until: int | None = None) -> int:
        return self.sim.run(until)

    def describe_pending(self) -> str:
        out = []
        for b in self.blades:
            for line, st in b.gcp.lines.items():
                if st.want is not None or st.pending_acks is not None or st.in_flight or st.queue:
                    out.append(f"  blade{b.index} gcp {line:#x}: want={st.want} acks={st.acks}/"
                               f"{st.pending_acks} queue={st.queue} in_flight={st.in_flight}")
            for line, p in b.cache.pending.items():
                out.append(f"  blade{b.index} line {line:#x}: outstanding={p.want} waiters={len(p.waiters)}")
        for line, e in self.switch.plain.entries.items():
            if e.busy is not None or e.waiting:
                out.append(f"  switch line {line:#x}: busy={e.busy} waiting={len(e.waiting)}")
        return "pending lines and queues:\n" + "\n".join(out) if out else "no pending lines"
