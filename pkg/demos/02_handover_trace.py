"""Watch a writer take a line away from a reader, message by message.

Blade 2 sits in a read critical section. Blade 1 asks for write access: the
switch makes blade 1 the queue holder, tells blade 2 a writer is waiting,
and blade 2 hands its copy over the moment it releases.
"""

from cohsync import Cluster, named_profile
from cohsync.cluster import ClusterOptions
from cohsync.coherence import OpCtx, Perm

c = Cluster(3, named_profile("ethernet-disagg"), options=ClusterOptions(trace=True, local_markers=True))
line = c.register_gcp([(c.reserve(64), 64)], 0).line


def critical_section(b, want, hold, start=0):
    g = c.blades[b].gcp
    if start:
        yield start
    yield from g.acquire(OpCtx(b, b, 0), line, want)
    print(f"  t={c.sim.now:>7} ns  blade{b} enters ({want.name})")
    yield hold
    g.release(line)


c.spawn(critical_section(2, Perm.S, 100_000))
c.spawn(critical_section(1, Perm.M, 10, start=30_000))
c.run()

print("\ntrace")
for rec in c.sim.trace_records:
    where = rec["src"] if rec.get("local") and rec["src"] == rec["dst"] else f"{rec['src']} -> {rec['dst']}"
    print(f"  t={rec['t']:>7}  {rec['kind']:<16} {where}")

d = c.switch.gcp.entries[line]
print(f"\ndirectory: perm={d.perm.name} owner=blade{d.owner} queue holder=blade{d.queue_holder}")
