"""Small drivers shared by the test modules."""

import math

from cohsync.coherence import OpCtx
from cohsync.sim import NetworkProfile


def ideal_profile(latency=1000):
    return NetworkProfile(latency, math.inf, 0, 0, 0, name="ideal")


def drive(cluster, *gens):
    """Run each generator as a process to quiescence; returns their results."""
    procs = [cluster.spawn(g) for g in gens]
    cluster.run()
    assert all(p.done for p in procs), "process did not finish"
    return [p.result for p in procs]


def after(delay, gen):
    if delay:
        yield delay
    return (yield from gen)


def kinds(records, since=0, local=True):
    return [r["kind"] for r in records[since:] if local or not r.get("local")]


def steps(records, since=0):
    """(kind, src, dst) of every record after ``since``."""
    return [(r["kind"], r["src"], r["dst"]) for r in records[since:]]


# step number -> records the step produces, in order (blade1 = N1, blade2 = N2)
HANDOVER_STEPS = {
    1: [("Acquire", "blade1", "switch")],
    2: [("WriterWaitNotify", "switch", "blade2"),       # request parked, N2 told about N1
        ("GrantM", "switch", "blade1")],                # N1 now holds the queue, grant pending
    3: [("Release", "blade2", "blade2")],
    4: [("Dequeue", "blade2", "blade1")],               # N2 finds the waiting writer
    5: [("Invalidate", "blade2", "blade2")],
    6: [("InvAckToWriter", "blade2", "blade1")],
    7: [("Commit", "blade1", "blade1")],                # DirUpdate(M, owner N1) leaves here
    8: [("CsEnter", "blade1", "blade1")],
}


class Scenario:
    """Directed GCP critical sections on one line of a traced cluster."""

    def __init__(self, make_cluster, blades=4, regions=None, **opts):
        self.c = make_cluster(blades, **opts)
        if regions is None:
            regions = [(self.c.reserve(64), 64)]
        self.gl = self.c.register_gcp(regions, 0)
        self.line = self.gl.line
        self.enters: list[tuple[int, int]] = []
        self.ctxs: dict[int, OpCtx] = {}
        self.plans: list[str] = []
        self.sizes: dict[str, list] = {}

        def watch(ev):
            m = ev.payload
            self.sizes.setdefault(m.kind, []).append(m.payload_bytes)
            if m.kind == "QTransferReq":
                self.plans.append(m.body[0])
        self.c.sim.message_observers.append(watch)

    def cs(self, b, want, start, hold, body=None):
        ctx = self.ctxs[b] = OpCtx(b, b, 0)
        g = self.c.blades[b].gcp

        def gen():
            if start:
                yield start
            yield from g.acquire(ctx, self.line, want)
            self.enters.append((b, self.c.sim.now))
            if body is not None:
                body(g)
            if hold:
                yield hold
            g.release(self.line)
        self.c.spawn(gen())

    def run(self, until=None):
        return self.c.run(until)

    def blade(self, b):
        return self.c.blades[b].gcp.lines[self.line]

    @property
    def dir(self):
        return self.c.switch.gcp.entries[self.line]

    def records(self, since=0):
        return [r for r in steps(self.c.sim.trace_records, since)]
