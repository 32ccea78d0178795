"""Deterministic simulation of directory coherence over disaggregated memory,
its generalization with blade-resident wait queues, and lock algorithms built
on both."""

from .audit import Auditor, AuditViolation, replay_version_safety
from .cluster import Cluster, ClusterOptions
from .coherence import OpCtx, Perm, Tag
from .experiment import ExperimentConfig, LockConfig, MetricsRecord, compare_profiles, emit_cdf, run_experiment
from .gcp import GcpLine, SharedMemoryList, WaitEntry
from .locks import LockKind, SimThread, make_lock
from .sim import (ConfigError, ContractViolation, LivelockError, NetworkProfile, ProtocolError, SimError,
                  Simulator, TraceIOError, named_profile)
from .workloads import (RunResult, WorkloadKind, WorkloadSpec, ZipfGenerator, run_globallock, run_kvs_ycsb,
                        run_microbench, run_workload)

__version__ = "0.1.0"

__all__ = [
    "Auditor", "AuditViolation", "replay_version_safety", "Cluster", "ClusterOptions", "OpCtx", "Perm", "Tag",
    "ExperimentConfig", "LockConfig", "MetricsRecord", "compare_profiles", "emit_cdf", "run_experiment",
    "GcpLine", "SharedMemoryList", "WaitEntry", "LockKind", "SimThread", "make_lock", "ConfigError",
    "ContractViolation", "LivelockError", "NetworkProfile", "ProtocolError", "SimError", "Simulator",
    "TraceIOError", "named_profile", "RunResult", "WorkloadKind", "WorkloadSpec", "ZipfGenerator",
    "run_globallock", "run_kvs_ycsb", "run_microbench", "run_workload",
]
