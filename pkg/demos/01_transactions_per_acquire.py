"""How many coherence transactions does one lock acquisition cost?

Each blade runs one thread that takes a single shared lock, bumps the 4 KB
record it protects and lets go. Locks layered on plain coherence pay more
the more blades there are; the GCP lock pays one.
"""

import numpy as np

from cohsync import named_profile
from cohsync.workloads import WorkloadSpec, run_workload

eth = named_profile("ethernet-disagg")
kinds = ["Mcs", "CentralizedRw", "PercpuRw", "Gcp"]
blades = [2, 4, 8]

table = np.zeros((len(kinds), len(blades)))
for i, kind in enumerate(kinds):
    for j, b in enumerate(blades):
        r = run_workload(WorkloadSpec(blades=b, ops_per_thread=200), kind, eth, seed=1)
        table[i, j] = r.transactions_per_acquisition

print("transactions per remote acquisition (lock + data)")
print(f"{'lock':>14}" + "".join(f"{b:>8}" for b in blades))
for kind, row in zip(kinds, table):
    print(f"{kind:>14}" + "".join(f"{v:8.2f}" for v in row))

# the write side of a reader-writer lock has to visit every reader indicator
r = run_workload(WorkloadSpec(blades=8, ops_per_thread=200), "PercpuRw", eth, seed=1)
print("\nPercpuRw write acquire at 8 blades: %.1f transactions" % r.write_acq_tx_mean)

# and MCS hands over in five, three of them on the critical path
r = run_workload(WorkloadSpec(blades=2, ops_per_thread=300), "Mcs", eth)
pairs, counts = np.unique(np.stack([r.op_lock_tx, r.op_critical_tx], 1), axis=0, return_counts=True)
for (tx, crit), n in zip(pairs, counts):
    print(f"MCS ops with {tx} transactions ({crit} critical): {n}")
