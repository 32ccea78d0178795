"""Read-only YCSB (workload C) over a bucket-locked hash table.

With GCP each blade keeps shared copies of the hot buckets, so reads stay
local and throughput grows with the blade count. A centralized reader
indicator turns every read into a write on one shared word.
"""

from cohsync import named_profile
from cohsync.workloads import WorkloadKind, WorkloadSpec, run_workload

eth = named_profile("ethernet-disagg")
blades = [1, 2, 4, 8]
tput = {}
for kind in ("Gcp", "CentralizedRw"):
    tput[kind] = []
    for b in blades:
        spec = WorkloadSpec(kind=WorkloadKind.KVS_YCSB, blades=b, threads_per_blade=10, ops_per_thread=100,
                            read_ratio=1.0, warmup_ops=20)
        tput[kind].append(run_workload(spec, kind, eth, seed=7).throughput_ops_s)

print(f"{'blades':>8}{'Gcp':>14}{'CentralizedRw':>16}{'ratio':>9}")
for i, b in enumerate(blades):
    g, c = tput["Gcp"][i], tput["CentralizedRw"][i]
    print(f"{b:>8}{g:14.0f}{c:16.0f}{g / c:9.0f}")
print(f"\nGcp 8-blade speed-up over 1 blade: {tput['Gcp'][-1] / tput['Gcp'][0]:.2f}x")
