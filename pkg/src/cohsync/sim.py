"""Deterministic discrete-event engine and the latency/bandwidth network model.

Everything runs inside one event loop. Actors (blades, the switch directory,
the memory blade, lock-service managers) exchange :class:`Message` objects;
simulated threads are generator-based processes scheduled by the same loop.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
import math
import random
from dataclasses import dataclass
from typing import Any, Callable, Iterator

HEADER_BYTES = 64


class SimError(Exception):
    """Base class for simulator failures."""


class ConfigError(SimError):
    pass


class ProtocolError(SimError):
    """A protocol state machine reached a state it must never reach."""


class ContractViolation(SimError):
    """An operation was invoked outside its precondition."""


class LivelockError(SimError):
    pass


class DeadlockError(SimError):
    pass


class TraceIOError(SimError):
    pass


class Role(enum.IntEnum):
    BLADE = 0
    SWITCH = 1
    MEMORY = 2
    MANAGER = 3


class ActorId(str):
    """Actor address. A ``str`` subclass, so it hashes and compares at C
    speed and lands in traces as its printed name ("blade3", "switch")."""

    role: Role
    index: int

    def __new__(cls, role: Role, index: int = 0) -> "ActorId":
        if role is Role.BLADE:
            name = f"blade{index}"
        elif role is Role.MANAGER:
            name = f"mgr{index}"
        else:
            name = "switch" if role is Role.SWITCH else "memory"
        obj = super().__new__(cls, name)
        obj.role = role
        obj.index = index
        return obj

    def __getnewargs__(self):
        return (self.role, self.index)

    def __str__(self) -> str:
        return str.__str__(self)

    def __repr__(self) -> str:
        return str.__str__(self)


SWITCH = ActorId(Role.SWITCH)
MEMORY = ActorId(Role.MEMORY)
_BLADES: dict[int, ActorId] = {}
_MANAGERS: dict[int, ActorId] = {}


def blade(index: int) -> ActorId:
    aid = _BLADES.get(index)
    if aid is None:
        aid = _BLADES[index] = ActorId(Role.BLADE, index)
    return aid


def manager(index: int) -> ActorId:
    aid = _MANAGERS.get(index)
    if aid is None:
        aid = _MANAGERS[index] = ActorId(Role.MANAGER, index)
    return aid


@dataclass(frozen=True)
class NetworkProfile:
    """Link and processing costs, all in nanoseconds (bandwidth in Gbit/s).

    ``bandwidth_gbps`` may be ``math.inf``; processing costs may be zero for
    degenerate test profiles.
    """

    one_way_latency_ns: int
    bandwidth_gbps: float
    switch_proc_ns: int = 500
    blade_proc_ns: int = 2000
    memory_proc_ns: int = 1000
    name: str = "custom"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.one_way_latency_ns > 0:
            raise ConfigError("NetworkProfile.one_way_latency_ns must be > 0")
        if not self.bandwidth_gbps > 0:
            raise ConfigError("NetworkProfile.bandwidth_gbps must be > 0")
        for field in ("switch_proc_ns", "blade_proc_ns", "memory_proc_ns"):
            if getattr(self, field) < 0:
                raise ConfigError(f"NetworkProfile.{field} must be >= 0")

    def proc_ns(self, role: Role) -> int:
        if role is Role.SWITCH:
            return self.switch_proc_ns
        if role is Role.MEMORY:
            return self.memory_proc_ns
        return self.blade_proc_ns

    def wire_ns(self, total_bytes: int) -> int:
        if math.isinf(self.bandwidth_gbps):
            return 0
        # Gbit/s is bits per nanosecond
        return math.ceil(total_bytes * 8 / self.bandwidth_gbps)

    def delay_ns(self, dst_role: Role, payload_bytes: int, header_bytes: int = HEADER_BYTES) -> int:
        return (self.one_way_latency_ns + self.wire_ns(payload_bytes + header_bytes)
                + self.proc_ns(dst_role))


@dataclass(slots=True)
class Message:
    src: ActorId
    kind: str
    line: int
    payload_bytes: int = 0
    body: Any = None


@dataclass(slots=True)
class SimEvent:
    deliver_at: int
    seq: int
    dst: ActorId
    payload: Message


class Signal:
    """One-shot wakeup. Waiters resume in a fresh event at the firing time."""

    __slots__ = ("sim", "fired", "value", "_waiters")

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.fired = False
        self.value = None
        self._waiters: list[Callable[[Any], None]] = []

    def fire(self, value: Any = None) -> None:
        if self.fired:
            raise ProtocolError("signal fired twice")
        self.fired = True
        self.value = value
        waiters, self._waiters = self._waiters, []
        for cb in waiters:
            self.sim.call_soon(cb, value)

    def add_waiter(self, cb: Callable[[Any], None]) -> None:
        if self.fired:
            self.sim.call_soon(cb, self.value)
        else:
            self._waiters.append(cb)


class Process:
    """Drives a generator. It may yield an ``int`` delay, a :class:`Signal`,
    or ``None`` (reschedule at the current time)."""

    __slots__ = ("sim", "gen", "name", "done", "result", "on_done")

    def __init__(self, sim: "Simulator", gen: Iterator, name: str = ""):
        self.sim = sim
        self.gen = gen
        self.name = name
        self.done = False
        self.result = None
        self.on_done: Callable[["Process"], None] | None = None

    def step(self, value: Any = None) -> None:
        try:
            y = self.gen.send(value)
        except StopIteration as stop:
            self.done = True
            self.result = stop.value
            if self.on_done is not None:
                self.on_done(self)
            return
        if type(y) is int:
            if y < 0:
                raise ContractViolation("negative delay")
            sim = self.sim
            sim._seq += 1
            heapq.heappush(sim._heap, (sim.now + y, sim._seq, self.step, None))
        elif y is None:
            self.sim.call_soon(self.step, None)
        else:
            y.add_waiter(self.step)


Handler = Callable[[Message], None]


class Simulator:
    """Event loop, actor registry and network model.

    Events at equal times run in ascending sequence number, so a run is a pure
    function of (configuration, seed).
    """

    def __init__(self, profile: NetworkProfile, *, seed: int = 0,
                 header_bytes: int = HEADER_BYTES, reorder_stress: bool = False,
                 reorder_max_ns: int | None = None, trace: bool = False,
                 trace_sink: Any = None, local_markers: bool = False,
                 max_events: int = 10**9, hash_trace: bool = False,
                 trace_kinds: frozenset | None = None):
        self.profile = profile
        self.header_bytes = header_bytes
        self.reorder_stress = reorder_stress
        self.reorder_max_ns = (reorder_max_ns if reorder_max_ns is not None
                               else profile.one_way_latency_ns)
        self.rng = random.Random(seed)
        self.now = 0
        self.events_processed = 0
        self.max_events = max_events
        self.messages_total = 0
        self.bytes_total = 0
        self.kind_counts: dict[str, int] = {}
        self._seq = 0
        self._heap: list = []
        self._actors: dict[ActorId, Handler] = {}
        self._chan_last: dict[tuple[ActorId, ActorId], int] = {}
        self._delays: dict[tuple[Role, int], int] = {}
        self._diagnostics: list[Callable[[], str]] = []
        self.tracing = trace or trace_sink is not None
        self.keep_records = trace
        self.hashing = self.tracing or hash_trace
        self.local_markers = local_markers and self.tracing
        self.trace_kinds = trace_kinds     # None records every kind
        self.trace_records: list[dict] = []
        self._sink = trace_sink
        if trace_sink is None or callable(trace_sink):
            self._emit = trace_sink
        else:
            self._emit = lambda rec: trace_sink.write(json.dumps(rec) + "\n")
        self._hash = hashlib.sha256()
        self._hash_buf: list[str] = []
        self.message_observers: list[Callable[[SimEvent], None]] = []

    # -- registry -----------------------------------------------------------
    def register(self, actor: ActorId, handler: Handler) -> None:
        if actor in self._actors:
            raise ConfigError(f"actor {actor} registered twice")
        self._actors[actor] = handler

    def add_diagnostic(self, fn: Callable[[], str]) -> None:
        self._diagnostics.append(fn)

    # -- scheduling ---------------------------------------------------------
    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def schedule(self, delay: int, fn: Callable[[Any], None], arg: Any = None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (self.now + delay, self._seq, fn, arg))

    def call_soon(self, fn: Callable[[Any], None], arg: Any = None) -> None:
        heapq.heappush(self._heap, (self.now, self._next_seq(), fn, arg))

    def spawn(self, gen: Iterator, name: str = "") -> Process:
        proc = Process(self, gen, name)
        self.call_soon(proc.step, None)
        return proc

    def signal(self) -> Signal:
        return Signal(self)

    def send(self, src: ActorId, dst: ActorId, msg: Message) -> SimEvent:
        if src == dst:
            raise ContractViolation(f"send from {src} to itself")
        if dst not in self._actors:
            raise ConfigError(f"unknown actor {dst}")
        if msg.payload_bytes < 0:
            raise ContractViolation("negative payload")
        key = (dst.role, msg.payload_bytes)
        d = self._delays.get(key)
        if d is None:
            d = self._delays[key] = self.profile.delay_ns(dst.role, msg.payload_bytes, self.header_bytes)
        at = self.now + d
        if self.reorder_stress:
            at += self.rng.randrange(self.reorder_max_ns + 1)
        chan = (src, dst)
        last = self._chan_last.get(chan)
        if last is not None and at < last:
            at = last
        self._chan_last[chan] = at
        self._seq += 1
        ev = SimEvent(at, self._seq, dst, msg)
        heapq.heappush(self._heap, (at, self._seq, self._deliver, ev))
        self.messages_total += 1
        self.bytes_total += msg.payload_bytes + self.header_bytes
        return ev

    # -- delivery / tracing -------------------------------------------------
    def _deliver(self, ev: SimEvent) -> None:
        msg = ev.payload
        self.kind_counts[msg.kind] = self.kind_counts.get(msg.kind, 0) + 1
        if self.tracing and (self.trace_kinds is None or msg.kind in self.trace_kinds):
            self._record({"t": ev.deliver_at, "seq": ev.seq, "src": msg.src,
                          "dst": ev.dst, "kind": msg.kind, "line": msg.line})
        if self.hashing:
            buf = self._hash_buf
            buf.append(f"{ev.deliver_at},{ev.seq},{msg.kind}\n")
            if len(buf) >= 4096:
                self._flush_hash()
        if self.message_observers:
            for obs in self.message_observers:
                obs(ev)
        self._actors[ev.dst](msg)

    def mark(self, actor: ActorId, kind: str, line: int, peer: ActorId | None = None) -> None:
        """Record a local protocol step (no message) when markers are enabled."""
        if self.local_markers and (self.trace_kinds is None or kind in self.trace_kinds):
            self._record({"t": self.now, "seq": self._next_seq(), "src": actor,
                          "dst": peer if peer is not None else actor,
                          "kind": kind, "line": line, "local": True})

    def _record(self, rec: dict) -> None:
        if self.keep_records:
            self.trace_records.append(rec)
        emit = self._emit
        if emit is None:
            return
        try:
            emit(rec)
        except OSError as exc:
            raise TraceIOError(f"trace sink write failed at t={self.now}: {exc}") from exc

    def _flush_hash(self) -> None:
        # one update per batch; sha256 over the concatenation is unchanged
        self._hash.update("".join(self._hash_buf).encode())
        self._hash_buf.clear()

    def trace_hash(self) -> str:
        self._flush_hash()
        return self._hash.hexdigest()

    def message_records(self) -> list[dict]:
        return [r for r in self.trace_records if not r.get("local")]

    # -- main loop ------------------------------------------------------------
    def run(self, until: int | None = None) -> int:
        """Process events in (time, seq) order; return the last processed time."""
        heap = self._heap
        last = self.now if self.events_processed else 0
        pop = heapq.heappop
        limit = self.max_events
        while heap:
            if until is not None and heap[0][0] > until:
                break
            t, _seq, fn, arg = pop(heap)
            self.now = t
            last = t
            self.events_processed += 1
            if self.events_processed > limit:
                raise LivelockError(self._livelock_report())
            fn(arg)
        return last

    def pending_events(self) -> int:
        return len(self._heap)

    def _livelock_report(self) -> str:
        parts = [f"event watchdog exceeded ({self.max_events}) at t={self.now}"]
        for fn in self._diagnostics:
            parts.append(fn())
        return "\n".join(p for p in parts if p)


def named_profile(name: str, one_way_latency_ns: int | None = None) -> NetworkProfile:
    """Built-in profiles. Only the CXL latency may be overridden; it is a
    configuration value rather than a fixed fact."""
    key = name.lower()
    if key == "ethernet-disagg":
        return NetworkProfile(5000, 100.0, 500, 2000, 1000, name="ethernet-disagg")
    if key == "numa":
        return NetworkProfile(100, 500.0, 20, 50, 50, name="numa")
    if key == "cxl":
        lat = 300 if one_way_latency_ns is None else one_way_latency_ns
        return NetworkProfile(lat, 512.0, 20, 50, 50, name="cxl")
    raise ConfigError(f"unknown profile {name!r}; expected ethernet-disagg, numa, cxl or an inline object")


PROFILE_NAMES = ("ethernet-disagg", "numa", "cxl")
