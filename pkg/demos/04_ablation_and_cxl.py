"""Turn the GCP optimizations off one at a time, then swap the network.

Locality keeps a released line cached, so a blade re-taking its own lock
never leaves the blade. Combining data with the grant saves the second
round trip. A faster interconnect shortens every hop but changes no counts.
"""

from cohsync import named_profile
from cohsync.cluster import ClusterOptions
from cohsync.workloads import WorkloadSpec, run_workload

eth = named_profile("ethernet-disagg")
cxl = named_profile("cxl")

solo = WorkloadSpec(blades=1, ops_per_thread=500)
for loc in (True, False):
    r = run_workload(solo, "Gcp", eth, options=ClusterOptions(locality_opt=loc))
    print(f"locality {'on ' if loc else 'off'}: p50 acquire {r.percentile(50):8.0f} ns")

pair = WorkloadSpec(blades=2, ops_per_thread=500)
for comb in (True, False):
    r = run_workload(pair, "Gcp", eth, options=ClusterOptions(combined_data_opt=comb))
    print(f"combined data {'on ' if comb else 'off'}: {r.transactions_per_acquisition:.1f} transactions per acquire")

readers = WorkloadSpec(blades=8, ops_per_thread=2000, read_ratio=0.99)
a = run_workload(readers, "Gcp", eth)
b = run_workload(readers, "Gcp", cxl)
print(f"\n99% readers on 8 blades: ethernet {a.throughput_ops_s:,.0f} ops/s, cxl {b.throughput_ops_s:,.0f} ops/s "
      f"({b.throughput_ops_s / a.throughput_ops_s:.1f}x)")
print(f"transactions per acquire: {a.transactions_per_acquisition} vs {b.transactions_per_acquisition}")
