import hashlib
import itertools

import numpy as np
import pytest

from cohsync.coherence import Perm
from cohsync.sim import ConfigError, ContractViolation

from .helpers import HANDOVER_STEPS, Scenario

def test_handover_trace_matches_step_order(make_cluster):
    s = Scenario(make_cluster, 3)
    s.cs(2, Perm.S, 0, 100_000)
    s.run(until=30_000)
    n0 = len(s.c.sim.trace_records)
    s.cs(1, Perm.M, 0, 10)
    s.run()
    got = [x for x in s.records(n0) if x != ("Release", "blade1", "blade1")]
    want = [rec for k in sorted(HANDOVER_STEPS) for rec in HANDOVER_STEPS[k]]
    assert got[:len(want)] == want
    assert got[len(want):] == [("DirUpdate", "blade1", "switch")]
    assert s.ctxs[1].lock_tx == 1
    assert (s.dir.perm, s.dir.owner, s.dir.queue_holder) == (Perm.M, 1, 1)


def test_writer_waits_for_reader_to_leave(make_cluster):
    s = Scenario(make_cluster, 3)
    s.cs(2, Perm.S, 0, 100_000)
    s.cs(1, Perm.M, 30_000, 10)
    s.run()
    (r, t_r), (w, t_w) = s.enters
    assert (r, w) == (2, 1)
    assert t_w >= t_r + 100_000


def test_uncontended_read_fill_creates_no_queue(make_cluster):
    s = Scenario(make_cluster, 2)
    s.cs(0, Perm.S, 0, 10)
    s.run()
    recs = [k for k, _, _ in s.records() if k not in ("CsEnter", "Release")]
    assert recs == ["Acquire", "MemRead", "MemData"]
    assert s.dir.queue_holder is None and s.dir.perm is Perm.S
    assert s.blade(0).queue is None and s.ctxs[0].lock_tx == 1


def test_queue_at_writer_follows_arrival_order(make_cluster):
    s = Scenario(make_cluster, 4)
    s.cs(1, Perm.M, 0, 200_000)
    s.cs(2, Perm.S, 30_000, 10)
    s.cs(3, Perm.M, 40_000, 10)
    s.run(until=150_000)
    assert [(e.blade, e.want) for e in s.blade(1).queue] == [(2, Perm.S), (3, Perm.M)]
    assert s.blade(1).holder_version == 2 and s.dir.dir_version == 2
    s.run()


def test_release_with_empty_queue_keeps_line(make_cluster):
    s = Scenario(make_cluster, 2)
    s.cs(0, Perm.M, 0, 10)
    s.run()
    m0 = s.c.sim.messages_total
    s.cs(0, Perm.M, 0, 10)
    s.run()
    assert s.c.sim.messages_total == m0 and s.ctxs[0].lock_tx == 0
    assert s.blade(0).perm is Perm.M and s.blade(0).queue == []


def test_transfer_to_waiting_writer(make_cluster):
    s = Scenario(make_cluster, 3)
    s.cs(1, Perm.M, 0, 100_000, body=lambda g: g.write_data(s.line, "from-1"))
    s.cs(2, Perm.M, 30_000, 10, body=lambda g: s.__setattr__("seen", g.read_data(s.line)))
    s.run()
    assert s.plans == ["writer"]
    assert s.seen == "from-1"
    assert s.ctxs[2].lock_tx == 1
    assert s.sizes["QTransferApprove"] == [64]
    assert (s.dir.owner, s.dir.queue_holder) == (2, 2)


def test_readers_then_writer_batch(make_cluster):
    s = Scenario(make_cluster, 4)
    s.cs(0, Perm.M, 0, 200_000)
    s.cs(1, Perm.S, 30_000, 50_000)
    s.cs(2, Perm.S, 31_000, 50_000)
    s.cs(3, Perm.M, 32_000, 10)
    s.run(until=200_000 + 18_523 + 20_000)
    assert s.plans == ["readers_then_writer"]
    assert s.blade(3).pending_acks == 2
    assert {s.blade(1).waiting_writer, s.blade(2).waiting_writer} == {3}
    s.run()
    order = [b for b, _ in s.enters]
    assert order[:3] == [0, 1, 2] and order[3] == 3
    t1, t2, t3 = (t for b, t in s.enters[1:])
    assert t1 == t2                              # batched grant
    assert t3 >= t1 + 50_000
    assert s.ctxs[3].lock_tx == 1


def test_readers_only_drops_queue(make_cluster):
    s = Scenario(make_cluster, 3)
    s.cs(0, Perm.M, 0, 100_000)
    s.cs(1, Perm.S, 30_000, 10)
    s.run()
    assert s.plans == ["readers"]
    assert s.dir.queue_holder is None and s.dir.perm is Perm.S
    assert not any(b.gcp.state(s.line).holder for b in s.c.blades)


def test_version_check_deny_then_retry(make_cluster):
    s = Scenario(make_cluster, 4)
    release_at = 100_000
    s.cs(1, Perm.M, 0, release_at - 12_517)     # cold M grant lands at 12517
    s.cs(2, Perm.M, 20_000, 10)
    s.cs(3, Perm.M, release_at - 3_000, 10)     # reaches the switch just after the release
    s.run()
    kinds = [k for k, _, _ in s.records()]
    assert kinds.count("TransferDenied") == 1
    i = kinds.index("TransferDenied")
    assert "TransferRetry" in kinds[i:]
    assert kinds.index("TransferApproved", i) > i
    assert [b for b, _ in s.enters] == [1, 2, 3]
    assert s.plans[:2] == ["writer", "writer"]
    assert s.dir.dir_version == 0 and s.blade(3).holder_version == 0


def test_fresh_line_empty_queue_transfer_approved(make_cluster):
    s = Scenario(make_cluster, 2, locality_opt=False)
    s.cs(0, Perm.M, 0, 10)
    s.run()
    kinds = [k for k, _, _ in s.records()]
    assert s.plans == ["evict"] and "TransferApproved" in kinds
    assert s.dir.perm is Perm.I and s.dir.queue_holder is None


@pytest.mark.parametrize("order", list(itertools.permutations([1, 2, 3])))
def test_writer_commits_after_all_reader_acks(make_cluster, order):
    s = Scenario(make_cluster, 4)
    for k, b in enumerate(order):
        s.cs(b, Perm.S, 1000 * b, 60_000 + 15_000 * k)
    s.cs(0, Perm.M, 25_000, 10)
    s.run()
    acks = [r for r in s.c.sim.trace_records if r["kind"] == "InvAckToWriter"]
    commits = [r for r in s.c.sim.trace_records if r["kind"] == "Commit"]
    assert len(acks) == 3 and len(commits) == 1
    assert [r["src"] for r in acks] == [f"blade{b}" for b in order]
    assert commits[0]["seq"] > acks[-1]["seq"] and commits[0]["t"] == acks[-1]["t"]
    assert [b for b, _ in s.enters].count(0) == 1
    assert s.ctxs[0].lock_tx == 1


def test_reader_outside_cs_acks_on_notification(make_cluster):
    s = Scenario(make_cluster, 3)
    s.cs(2, Perm.S, 0, 10)
    s.cs(1, Perm.M, 30_000, 10)
    s.run()
    recs = s.records()
    notify = recs.index(("WriterWaitNotify", "switch", "blade2"))
    assert ("Dequeue", "blade2", "blade1") not in recs[notify:]
    assert recs[notify + 1] == ("Invalidate", "blade2", "blade2")
    assert ("InvAckToWriter", "blade2", "blade1") in recs[notify + 2:]
    assert [b for b, _ in s.enters] == [2, 1]


def test_two_region_grants_carry_all_bytes(make_cluster):
    s = Scenario(make_cluster, 3, regions=[(0x0A, 8), (0xF0, 32)])
    assert s.gl.regions.total_bytes == 40
    s.cs(1, Perm.M, 0, 50_000)
    s.cs(2, Perm.M, 20_000, 10)
    s.run()
    assert s.sizes["GrantM"] == [40]
    assert s.sizes["QTransferApprove"] == [40]


def test_empty_region_list_is_permission_only(make_cluster):
    s = Scenario(make_cluster, 3, regions=[])
    s.cs(1, Perm.M, 0, 50_000)
    s.cs(2, Perm.M, 20_000, 10)
    s.run()
    assert s.sizes["GrantM"] == [0] and s.sizes["QTransferApprove"] == [0]


def test_region_checksum_survives_handover(make_cluster):
    s = Scenario(make_cluster, 3, regions=[(0x0A, 8), (0xF0, 32)])
    rng = np.random.default_rng(7)
    pattern = (rng.bytes(8), rng.bytes(32))
    digest = hashlib.sha256(b"".join(pattern)).hexdigest()
    got = {}
    s.cs(1, Perm.M, 0, 50_000, body=lambda g: g.write_data(s.line, pattern))
    s.cs(2, Perm.S, 20_000, 10, body=lambda g: got.setdefault(
        "d", hashlib.sha256(b"".join(g.read_data(s.line))).hexdigest()))
    s.run()
    assert got["d"] == digest


def test_registration_rejects_overlap(make_cluster):
    c = make_cluster(2)
    c.register_gcp([(0x0A, 8), (0xF0, 32)])
    with pytest.raises(ConfigError, match="overlaps"):
        c.register_gcp([(0x100, 16), (0x0C, 4)])
    with pytest.raises(ConfigError):
        c.register_gcp([(0x200, 16), (0x208, 16)])
    c.register_gcp([(0x12, 8)])     # adjacent is fine


def test_pthread_and_coupled_lock_regions(make_cluster):
    from cohsync.locks import GcpLock
    c = make_cluster(2)
    p = GcpLock(c, 0, 4096, coupled=False)
    k = GcpLock(c, 1, 4096, coupled=True)
    assert [s for _, s in p.gline.regions.regions] == [8]
    assert [s for _, s in k.gline.regions.regions] == [4096]


def test_double_acquire_and_bad_release_are_contract_violations(make_cluster):
    s = Scenario(make_cluster, 2)
    g = s.c.blades[0].gcp
    with pytest.raises(ContractViolation):
        g.release(s.line)
    s.cs(0, Perm.M, 0, 100_000)
    s.run(until=50_000)
    with pytest.raises(ContractViolation):
        next(g.acquire(None, s.line, Perm.S))
    s.run()
    with pytest.raises(ContractViolation):
        g.write_data(s.line, 1)
