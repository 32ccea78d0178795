"""Experiment configs, sweeps, profile comparisons and CSV/JSON/CDF output."""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .cluster import ClusterOptions
from .locks import LockKind
from .sim import ConfigError, NetworkProfile, TraceIOError, named_profile
from .workloads import RunResult, WorkloadKind, WorkloadSpec, run_workload

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "run_id", "lock", "workload", "profile", "blades", "threads", "read_ratio", "completed_ops",
    "elapsed_sim_ns", "throughput_ops_s", "acq_p50_ns", "acq_p99_ns", "txns_per_acq",
    "msgs_total", "bytes_total",
)


@dataclass
class LockConfig:
    kind: LockKind = LockKind.GCP
    cohort_budget: int = 64
    cohort_inner: LockKind = LockKind.CENTRAL_RW
    locality_opt: bool = True
    combined_data_opt: bool = True
    local_op_ns: int = 100

    def validate(self) -> None:
        if not isinstance(self.kind, LockKind):
            self.kind = LockKind.parse(self.kind)
        if not isinstance(self.cohort_inner, LockKind):
            self.cohort_inner = LockKind.parse(self.cohort_inner)
        if self.cohort_budget < 1:
            raise ConfigError("ExperimentConfig.lock.cohort_budget must be >= 1")
        if self.local_op_ns < 0:
            raise ConfigError("ExperimentConfig.lock.local_op_ns must be >= 0")


@dataclass
class ExperimentConfig:
    seed: int = 0
    profile: NetworkProfile = field(default_factory=lambda: named_profile("ethernet-disagg"))
    lock: LockConfig = field(default_factory=LockConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    sweep: dict = field(default_factory=dict)
    reorder_stress: bool = False
    max_events: int = 10**9
    output: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("ExperimentConfig: top level must be an object")
        _known(d, {"seed", "profile", "lock", "workload", "sweep", "reorder_stress", "max_events", "output"},
               "ExperimentConfig")
        cfg = cls()
        if "seed" in d:
            cfg.seed = _int(d["seed"], "ExperimentConfig.seed")
        if "profile" in d:
            cfg.profile = parse_profile(d["profile"])
        if "lock" in d:
            cfg.lock = _dataclass_from(LockConfig, d["lock"], "ExperimentConfig.lock")
        if "workload" in d:
            cfg.workload = _dataclass_from(WorkloadSpec, d["workload"], "ExperimentConfig.workload")
        if "sweep" in d:
            if not isinstance(d["sweep"], dict):
                raise ConfigError("ExperimentConfig.sweep must map axis names to lists")
            cfg.sweep = {k: list(v) if isinstance(v, (list, tuple)) else [v] for k, v in d["sweep"].items()}
        if "reorder_stress" in d:
            cfg.reorder_stress = bool(d["reorder_stress"])
        if "max_events" in d:
            cfg.max_events = _int(d["max_events"], "ExperimentConfig.max_events")
        if "output" in d:
            cfg.output = dict(d["output"])
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    def validate(self) -> None:
        self.profile.validate()
        self.lock.validate()
        self.workload.validate()
        for axis in self.sweep:
            _check_axis(axis)
        if self.max_events < 1:
            raise ConfigError("ExperimentConfig.max_events must be >= 1")

    def to_dict(self) -> dict:
        lock = asdict(self.lock)
        lock["kind"] = self.lock.kind.value
        lock["cohort_inner"] = self.lock.cohort_inner.value
        wl = asdict(self.workload)
        wl["kind"] = self.workload.kind.value
        return {"seed": self.seed, "profile": asdict(self.profile), "lock": lock, "workload": wl,
                "sweep": copy.deepcopy(self.sweep), "reorder_stress": self.reorder_stress,
                "max_events": self.max_events, "output": dict(self.output)}

    def points(self) -> list[dict]:
        """Cartesian product of the sweep axes, in axis order."""
        if not self.sweep:
            return [{}]
        axes = list(self.sweep)
        return [dict(zip(axes, combo)) for combo in itertools.product(*(self.sweep[a] for a in axes))]

    def with_overrides(self, over: dict) -> "ExperimentConfig":
        cfg = ExperimentConfig.from_dict(self.to_dict())
        cfg.sweep = {}
        for axis, value in over.items():
            _apply(cfg, axis, value)
        cfg.validate()
        return cfg


def _known(d: dict, allowed: set, where: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(extra)}")


def _int(v: Any, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (isinstance(v, float) and not v.is_integer()):
        raise ConfigError(f"{where} must be an integer, got {v!r}")
    return int(v)


def _dataclass_from(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name: f for f in fields(cls)}
    _known(d, set(names), where)
    obj = cls()
    for k, v in d.items():
        _set_field(obj, names[k], v, f"{where}.{k}")
    return obj


def _set_field(obj, f, v, where: str) -> None:
    cur = getattr(obj, f.name)
    try:
        if isinstance(cur, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{where} must be true or false, got {v!r}")
        elif isinstance(cur, (LockKind, WorkloadKind)):
            v = type(cur).parse(v)
        elif isinstance(cur, int):
            v = _int(v, where)
        elif isinstance(cur, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where} must be a number, got {v!r}")
            v = float(v)
    except ConfigError as exc:
        if where in str(exc):
            raise
        raise ConfigError(f"{where}: {exc}") from exc
    setattr(obj, f.name, v)


_PROFILE_FIELDS = {"one_way_latency_ns", "bandwidth_gbps", "switch_proc_ns", "blade_proc_ns",
                   "memory_proc_ns", "name"}


def parse_profile(p: Any) -> NetworkProfile:
    """A profile name, or an object of NetworkProfile fields (optionally
    starting from a named ``base``)."""
    if isinstance(p, NetworkProfile):
        return p
    if isinstance(p, str):
        return named_profile(p)
    if not isinstance(p, dict):
        raise ConfigError("ExperimentConfig.profile must be a name or an object")
    _known(p, _PROFILE_FIELDS | {"base"}, "NetworkProfile")
    base = p.get("base")
    if base is None and p.get("name") in ("ethernet-disagg", "numa", "cxl"):
        base = p["name"]
    vals = asdict(named_profile(base)) if base else {"name": "custom", "switch_proc_ns": 500,
                                                     "blade_proc_ns": 2000, "memory_proc_ns": 1000}
    for k, v in p.items():
        if k == "base":
            continue
        if k == "name":
            vals[k] = str(v)
        elif k == "bandwidth_gbps":
            if isinstance(v, str) and v.lower() in ("inf", "infinity"):
                v = math.inf
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"NetworkProfile.bandwidth_gbps must be a number, got {v!r}")
            vals[k] = float(v)
        else:
            vals[k] = _int(v, f"NetworkProfile.{k}")
    for k in ("one_way_latency_ns", "bandwidth_gbps"):
        if k not in vals:
            raise ConfigError(f"NetworkProfile.{k} is required for a custom profile")
    return NetworkProfile(**vals)


_WORKLOAD_AXES = {f.name for f in fields(WorkloadSpec)}
_LOCK_AXES = {f.name for f in fields(LockConfig)}


def _check_axis(axis: str) -> None:
    head, _, rest = axis.partition(".")
    if axis in ("seed", "profile", "reorder_stress"):
        return
    if head == "workload" and rest in _WORKLOAD_AXES:
        return
    if head == "lock" and rest in _LOCK_AXES:
        return
    if not rest and (axis in _WORKLOAD_AXES or axis in _LOCK_AXES):
        return
    raise ConfigError(f"ExperimentConfig.sweep: unknown axis {axis!r}")


def _apply(cfg: ExperimentConfig, axis: str, value: Any) -> None:
    head, _, rest = axis.partition(".")
    if axis == "seed":
        cfg.seed = _int(value, "sweep.seed")
    elif axis == "profile":
        cfg.profile = parse_profile(value)
    elif axis == "reorder_stress":
        cfg.reorder_stress = bool(value)
    elif (head == "workload" and rest) or (not rest and axis in _WORKLOAD_AXES):
        name = rest or axis
        _set_field(cfg.workload, {f.name: f for f in fields(WorkloadSpec)}[name], value, f"sweep.{axis}")
    elif (head == "lock" and rest) or (not rest and axis in _LOCK_AXES):
        name = rest or axis
        _set_field(cfg.lock, {f.name: f for f in fields(LockConfig)}[name], value, f"sweep.{axis}")
    else:
        raise ConfigError(f"ExperimentConfig.sweep: unknown axis {axis!r}")


# ---------------------------------------------------------------------------
# running


@dataclass
class MetricsRecord:
    run_id: str
    lock: str
    workload: str
    profile: str
    blades: int
    threads: int
    read_ratio: float
    completed_ops: int
    elapsed_sim_ns: int
    throughput_ops_s: float
    acq_p50_ns: float
    acq_p99_ns: float
    txns_per_acq: float
    msgs_total: int
    bytes_total: int
    acq_p90_ns: float = 0.0
    trace_hash: str = ""
    cdf: list = field(default_factory=list)

    def row(self) -> dict:
        return {c: getattr(self, c) for c in CSV_COLUMNS}


def latency_cdf(samples) -> np.ndarray:
    """Empirical CDF as an (n, 2) array of (latency_ns, cumulative_fraction)."""
    x = np.sort(np.asarray(samples, dtype=np.int64))
    if not len(x):
        return np.zeros((0, 2))
    vals, counts = np.unique(x, return_counts=True)
    frac = np.cumsum(counts) / len(x)
    return np.column_stack([vals.astype(float), frac])


def _record(run_id: str, cfg: ExperimentConfig, r: RunResult, keep_cdf: bool) -> MetricsRecord:
    lat = r.latencies
    return MetricsRecord(
        run_id=run_id, lock=r.lock, workload=cfg.workload.kind.value, profile=cfg.profile.name,
        blades=cfg.workload.blades, threads=cfg.workload.total_threads,
        read_ratio=cfg.workload.read_ratio, completed_ops=r.completed_ops,
        elapsed_sim_ns=r.elapsed_sim_ns, throughput_ops_s=round(r.throughput_ops_s, 3),
        acq_p50_ns=round(r.percentile(50), 3), acq_p99_ns=round(r.percentile(99), 3),
        txns_per_acq=round(r.transactions_per_acquisition, 6),
        msgs_total=r.messages_total, bytes_total=r.bytes_total,
        acq_p90_ns=round(r.percentile(90), 3), trace_hash=r.trace_hash,
        cdf=latency_cdf(lat).tolist() if keep_cdf else [],
    )


def run_point(cfg: ExperimentConfig, run_id: str = "r000", trace_path: str | None = None,
              keep_cdf: bool = False) -> tuple[MetricsRecord, RunResult]:
    sink = None
    try:
        if trace_path:
            try:
                sink = open(trace_path, "w")
            except OSError as exc:
                raise TraceIOError(f"cannot open trace file {trace_path}: {exc}") from exc
        opts = ClusterOptions(locality_opt=cfg.lock.locality_opt,
                              combined_data_opt=cfg.lock.combined_data_opt,
                              local_op_ns=cfg.lock.local_op_ns, reorder_stress=cfg.reorder_stress,
                              trace_sink=sink, hash_trace=True, max_events=cfg.max_events)
        r = run_workload(cfg.workload, cfg.lock.kind, cfg.profile, cfg.seed, options=opts,
                         cohort_budget=cfg.lock.cohort_budget, cohort_inner=cfg.lock.cohort_inner)
    finally:
        if sink is not None:
            sink.close()
    return _record(run_id, cfg, r, keep_cdf), r


def _trace_for(trace_path: str | None, i: int, n: int) -> str | None:
    if not trace_path or n == 1:
        return trace_path
    p = Path(trace_path)
    return str(p.with_name(f"{p.stem}.r{i:03d}{p.suffix}"))


def _worker(args) -> MetricsRecord:
    cfg_dict, over, run_id, trace, keep_cdf = args
    cfg = ExperimentConfig.from_dict(cfg_dict).with_overrides(over)
    return run_point(cfg, run_id, trace, keep_cdf)[0]


def run_experiment(cfg: ExperimentConfig, *, jobs: int = 1, trace_path: str | None = None,
                   keep_cdf: bool = False) -> list[MetricsRecord]:
    """One row per sweep point, ordered by sweep index whatever ``jobs`` is."""
    pts = cfg.points()
    base = cfg.to_dict()
    tasks = [(base, over, f"r{i:03d}", _trace_for(trace_path, i, len(pts)), keep_cdf)
             for i, over in enumerate(pts)]
    for _, over, *_ in tasks:
        cfg.with_overrides(over)          # fail fast on a bad axis value
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_worker, tasks))
    return [_worker(t) for t in tasks]


def compare_profiles(cfg: ExperimentConfig, profiles: list, *, jobs: int = 1,
                     trace_path: str | None = None, keep_cdf: bool = False) -> list[MetricsRecord]:
    """Same workload and lock under each profile; sweep axes still apply."""
    if len(profiles) < 2:
        raise ConfigError("compare needs at least 2 profiles")
    parsed = [parse_profile(p) for p in profiles]
    sweep = {"profile": [asdict(p) for p in parsed]}
    sweep.update(cfg.sweep)
    c = ExperimentConfig.from_dict(cfg.to_dict())
    c.sweep = sweep
    return run_experiment(c, jobs=jobs, trace_path=trace_path, keep_cdf=keep_cdf)


# ---------------------------------------------------------------------------
# output


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        w.writerow([_fmt(v) for v in rec.row().values()])
    return buf.getvalue()


def write_csv(records: list[MetricsRecord], path: str | Path) -> None:
    Path(path).write_text(csv_text(records))


def write_json(records: list[MetricsRecord], path: str | Path) -> None:
    rows = []
    for rec in records:
        d = rec.row()
        d["acq_p90_ns"] = rec.acq_p90_ns
        d["trace_hash"] = rec.trace_hash
        d["cdf"] = rec.cdf
        rows.append(d)
    Path(path).write_text(json.dumps({"columns": list(CSV_COLUMNS), "rows": rows}, indent=1) + "\n")


def emit_cdf(run: RunResult | MetricsRecord, path: str | Path) -> np.ndarray:
    """Write a two-column CDF table; an empty run yields only the header."""
    if isinstance(run, MetricsRecord):
        table = np.asarray(run.cdf, dtype=float).reshape(-1, 2)
    else:
        table = latency_cdf(run.latencies)
    if not len(table):
        log.warning("no latency samples; writing an empty CDF table")
    with open(path, "w") as fh:
        fh.write("latency_ns,cumulative_fraction\n")
        for x, f in table:
            fh.write(f"{int(x)},{float(f)!r}\n")
    return table
