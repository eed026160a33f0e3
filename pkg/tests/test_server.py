"""Server engine unit tests: refinement, response timing control, early
abort, smart retry, read-only path, garbage collection, and recovery."""

import pytest

from nattx.core import (
    ABORTED,
    COMMITTED,
    CommitAbort,
    EarlyAbortResp,
    ExecuteReq,
    ExecuteResp,
    RecoverQuery,
    RecoverReply,
    Request,
    RoAbortResp,
    SmartRetryReq,
    SmartRetryResp,
    Timestamp,
    TS_ZERO,
    TxId,
)
from nattx.server import NCCServer, ServerConfig
from nattx.simnet import DelayModel, Node, SimConfig, Simulator


CLIENT = 100


class Probe(Node):
    def __init__(self, node_id=CLIENT):
        super().__init__(node_id)
        self.got = []

    def on_message(self, src, msg):
        self.got.append(msg)

    def take(self):
        out, self.got = self.got, []
        return out


def make(config=None):
    sim = Simulator(SimConfig(seed=0, delay=DelayModel("fixed", fixed=10)))
    server = sim.add_node(NCCServer(0, config))
    probe = sim.add_node(Probe())
    return sim, server, probe


def ts(phys, cid=1):
    return Timestamp(phys, cid)


def read_req(tx, idx, key, **kw):
    return Request(tx=tx, idx=idx, key=key, kind="r", **kw)


def write_req(tx, idx, key, value=b"v", **kw):
    return Request(tx=tx, idx=idx, key=key, kind="w", value=value, **kw)


def exec_msg(req, t, **kw):
    return ExecuteReq(req=req, t=t, t_c=t.physical, **kw)


def pairs_of(msgs):
    return sorted(
        (m.pair.t_w.physical, m.pair.t_r.physical)
        for m in msgs if isinstance(m, ExecuteResp)
    )


def test_read_refines_t_r():
    sim, server, probe = make()
    tx = TxId(ts(5))
    probe.send(0, exec_msg(read_req(tx, 0, 1), ts(5)))
    sim.run()
    (resp,) = probe.take()
    assert resp.kind == "r"
    assert resp.pair.t_w == TS_ZERO
    assert resp.pair.t_r == ts(5)
    assert server.store[1][0].t_r == ts(5)


def test_write_bumps_above_reader():
    sim, server, probe = make()
    reader = TxId(ts(9, 1))
    writer = TxId(ts(4, 2))
    probe.send(0, exec_msg(read_req(reader, 0, 1), ts(9, 1)))
    sim.run()
    probe.send(0, CommitAbort(tx=reader, decision=COMMITTED))
    sim.run()
    probe.take()
    probe.send(0, exec_msg(write_req(writer, 0, 1), ts(4, 2)))
    sim.run()
    (resp,) = probe.take()
    # refined just above the highest read timestamp seen
    assert resp.pair.t_w == Timestamp(10, 2)
    assert resp.pair.t_r == Timestamp(10, 2)


def test_own_read_does_not_raise_own_write_floor():
    """A read-modify-write transaction must not self-conflict."""
    sim, server, probe = make()
    tx = TxId(ts(5))
    probe.send(0, exec_msg(read_req(tx, 0, 1), ts(5)))
    probe.send(0, exec_msg(write_req(tx, 1, 1), ts(5)))
    sim.run()
    resps = probe.take()
    assert pairs_of(resps) == [(0, 5), (5, 5)]  # safeguard passes at t' = 5


def test_runner_up_floor_with_two_readers():
    sim, server, probe = make()
    tx = TxId(ts(5, 1))
    other = TxId(ts(7, 2))
    probe.send(0, exec_msg(read_req(tx, 0, 1), ts(5, 1)))
    sim.run()
    probe.send(0, exec_msg(read_req(other, 0, 1), ts(7, 2)))
    sim.run()
    probe.send(0, CommitAbort(tx=other, decision=COMMITTED))
    sim.run()
    probe.take()
    # other's refinement to 7 is not owned by tx, so tx's write must clear it
    probe.send(0, exec_msg(write_req(tx, 1, 1), ts(5, 1)))
    sim.run()
    (resp,) = probe.take()
    assert resp.pair.t_w == Timestamp(8, 1)


def test_rtc_holds_read_of_undecided_version():
    sim, server, probe = make()
    writer = TxId(ts(5, 1))
    reader = TxId(ts(6, 2))
    probe.send(0, exec_msg(write_req(writer, 0, 1), ts(5, 1)))
    sim.run()
    probe.take()
    probe.send(0, exec_msg(read_req(reader, 0, 1), ts(6, 2)))
    sim.run()
    assert probe.take() == []  # held: the observed version is undecided
    probe.send(0, CommitAbort(tx=writer, decision=COMMITTED))
    sim.run()
    (resp,) = probe.take()
    assert resp.value == b"v"
    assert resp.delayed
    assert resp.pair.t_w == ts(5, 1) and resp.pair.t_r == ts(6, 2)


def test_rtc_reexecutes_read_after_abort():
    sim, server, probe = make()
    writer = TxId(ts(5, 1))
    reader = TxId(ts(6, 2))
    probe.send(0, exec_msg(write_req(writer, 0, 1, value=b"doomed"), ts(5, 1)))
    sim.run()
    probe.take()
    probe.send(0, exec_msg(read_req(reader, 0, 1), ts(6, 2)))
    sim.run()
    probe.send(0, CommitAbort(tx=writer, decision=ABORTED))
    sim.run()
    (resp,) = probe.take()
    # locally fixed: the read now observes the surviving initial version
    assert resp.value == b""
    assert resp.pair.t_w == TS_ZERO


def test_rtc_holds_write_behind_foreign_read():
    sim, server, probe = make()
    reader = TxId(ts(5, 1))
    writer = TxId(ts(6, 2))
    probe.send(0, exec_msg(write_req(reader, 0, 2), ts(5, 1)))  # make reader undecided
    probe.send(0, exec_msg(read_req(reader, 1, 1), ts(5, 1)))
    sim.run()
    probe.take()
    probe.send(0, exec_msg(write_req(writer, 0, 1), ts(6, 2)))
    sim.run()
    assert probe.take() == []  # held behind reader's undecided read
    probe.send(0, CommitAbort(tx=reader, decision=COMMITTED))
    sim.run()
    assert any(isinstance(m, ExecuteResp) and m.tx == writer for m in probe.take())


def test_read_only_snapshot_never_delays_writes():
    sim, server, probe = make()
    ro = TxId(ts(5, 1))
    writer = TxId(ts(6, 2))
    probe.send(0, exec_msg(read_req(ro, 0, 1, is_read_only=True),
                           ts(5, 1), t_ro=None))
    sim.run()
    probe.take()
    probe.send(0, exec_msg(write_req(writer, 0, 1), ts(6, 2)))
    sim.run()
    assert any(isinstance(m, ExecuteResp) and m.tx == writer for m in probe.take())


def test_same_transaction_responses_release_together():
    """A transaction's write queued behind its own read must not deadlock."""
    sim, server, probe = make()
    tx = TxId(ts(5))
    probe.send(0, exec_msg(read_req(tx, 0, 1), ts(5)))
    probe.send(0, exec_msg(write_req(tx, 1, 1), ts(5)))
    sim.run()
    resps = probe.take()
    assert len(resps) == 2


def test_early_abort_when_response_would_be_delayed():
    sim, server, probe = make()
    high = TxId(ts(50, 1))
    low = TxId(ts(3, 2))
    probe.send(0, exec_msg(write_req(high, 0, 1), ts(50, 1)))
    sim.run()
    probe.take()
    # low would be queued behind high's undecided write and cannot be the
    # highest timestamp again: abort it before doing any work
    probe.send(0, exec_msg(write_req(low, 0, 1), ts(3, 2)))
    sim.run()
    (resp,) = probe.take()
    assert isinstance(resp, EarlyAbortResp)
    assert server.early_aborts == 1


def test_no_early_abort_when_response_is_immediate():
    sim, server, probe = make()
    high = TxId(ts(50, 1))
    low = TxId(ts(3, 2))
    probe.send(0, exec_msg(write_req(high, 0, 1), ts(50, 1)))
    sim.run()
    probe.send(0, CommitAbort(tx=high, decision=COMMITTED))
    sim.run()
    probe.take()
    probe.send(0, exec_msg(write_req(low, 0, 2), ts(3, 2)))  # different key
    sim.run()
    (resp,) = probe.take()
    assert isinstance(resp, ExecuteResp)


def test_rtc_disabled_sends_eagerly():
    sim, server, probe = make(ServerConfig(rtc_enabled=False))
    writer = TxId(ts(5, 1))
    reader = TxId(ts(6, 2))
    probe.send(0, exec_msg(write_req(writer, 0, 1), ts(5, 1)))
    probe.send(0, exec_msg(read_req(reader, 0, 1), ts(6, 2)))
    sim.run()
    resps = probe.take()
    assert len(resps) == 2
    assert not any(m.delayed for m in resps)


def test_duplicate_request_ignored():
    sim, server, probe = make()
    tx = TxId(ts(5))
    msg = exec_msg(write_req(tx, 0, 1), ts(5))
    probe.send(0, msg)
    probe.send(0, msg)
    sim.run()
    assert len(probe.take()) == 1
    assert len(server.store[1]) == 2  # init + one version, not two


def test_smart_retry_repositions_at_t_prime():
    """Reject with pairs {(0,4),(6,6)} is rescued at t' = 6."""
    sim, server, probe = make()
    other = TxId(ts(5, 1))
    tx = TxId(ts(4, 2))
    # a read-only snapshot raises key 2's t_r without blocking later writes
    probe.send(0, exec_msg(read_req(other, 0, 2, is_read_only=True),
                           ts(5, 1), t_ro=None))
    sim.run()
    probe.take()
    probe.send(0, exec_msg(read_req(tx, 0, 1), ts(4, 2)))
    probe.send(0, exec_msg(write_req(tx, 1, 2), ts(4, 2)))
    sim.run()
    resps = probe.take()
    assert pairs_of(resps) == [(0, 4), (6, 6)]  # safeguard reject, t' = 6
    probe.send(0, SmartRetryReq(tx=tx, t_prime=ts(6, 2)))
    sim.run()
    (resp,) = probe.take()
    assert isinstance(resp, SmartRetryResp) and resp.ok
    assert server.store[1][0].t_r == ts(6, 2)  # read repositioned
    assert server.store[2][-1].t_w == ts(6, 2)  # created version repositioned


def test_smart_retry_fails_past_successor():
    sim, server, probe = make()
    tx = TxId(ts(4, 1))
    later = TxId(ts(9, 2))
    probe.send(0, exec_msg(read_req(tx, 0, 1), ts(4, 1)))
    sim.run()
    probe.send(0, exec_msg(write_req(later, 0, 1), ts(9, 2)))
    sim.run()
    probe.take()
    # repositioning tx's read at t' = 20 would jump over later's version
    probe.send(0, SmartRetryReq(tx=tx, t_prime=ts(20, 1)))
    sim.run()
    resps = [m for m in probe.take() if isinstance(m, SmartRetryResp)]
    assert resps and not resps[0].ok
    # the server decided locally, so recovery can never diverge
    assert server.decisions[tx] == ABORTED


def test_smart_retry_allows_own_successor():
    sim, server, probe = make()
    tx = TxId(ts(5))
    probe.send(0, exec_msg(read_req(tx, 0, 1), ts(5)))
    probe.send(0, exec_msg(write_req(tx, 1, 1), ts(5)))
    sim.run()
    probe.take()
    probe.send(0, SmartRetryReq(tx=tx, t_prime=ts(8, 1)))
    sim.run()
    (resp,) = probe.take()
    assert resp.ok
    assert server.store[1][-1].t_w == ts(8, 1)


def test_read_only_fast_path_committed():
    sim, server, probe = make()
    writer = TxId(ts(5, 1))
    probe.send(0, exec_msg(write_req(writer, 0, 1, value=b"new"), ts(5, 1)))
    sim.run()
    probe.send(0, CommitAbort(tx=writer, decision=COMMITTED))
    sim.run()
    probe.take()
    ro = TxId(ts(9, 2))
    probe.send(0, exec_msg(read_req(ro, 0, 1, is_read_only=True),
                           ts(9, 2), t_ro=ts(5, 1)))
    sim.run()
    (resp,) = probe.take()
    assert resp.value == b"new"
    assert not resp.delayed


def test_read_only_staleness_abort_with_hint():
    sim, server, probe = make()
    writer = TxId(ts(5, 1))
    probe.send(0, exec_msg(write_req(writer, 0, 1), ts(5, 1)))
    sim.run()
    probe.send(0, CommitAbort(tx=writer, decision=COMMITTED))
    sim.run()
    probe.take()
    # the reader's t_ro predates the new version: reject and hint
    ro = TxId(ts(9, 2))
    probe.send(0, exec_msg(read_req(ro, 0, 1, is_read_only=True),
                           ts(9, 2), t_ro=None))
    sim.run()
    (resp,) = probe.take()
    assert isinstance(resp, RoAbortResp)
    assert resp.hint_t_ro == ts(5, 1)


def test_read_only_waits_for_undecided_version():
    sim, server, probe = make()
    writer = TxId(ts(5, 1))
    probe.send(0, exec_msg(write_req(writer, 0, 1, value=b"x"), ts(5, 1)))
    sim.run()
    probe.take()
    ro = TxId(ts(9, 2))
    probe.send(0, exec_msg(read_req(ro, 0, 1, is_read_only=True),
                           ts(9, 2), t_ro=ts(5, 1)))
    sim.run()
    assert probe.take() == []
    probe.send(0, CommitAbort(tx=writer, decision=COMMITTED))
    sim.run()
    resps = [m for m in probe.take() if isinstance(m, ExecuteResp) and m.tx == ro]
    assert resps and resps[0].value == b"x"


def test_gc_reclaims_old_keeps_latest_committed():
    sim, server, probe = make(ServerConfig(gc_retention=0, gc_interval=None))
    for i, phys in enumerate((5, 6, 7)):
        tx = TxId(ts(phys, 1))
        probe.send(0, exec_msg(write_req(tx, 0, 1, value=str(i).encode()), ts(phys, 1)))
        sim.run()
        probe.send(0, CommitAbort(tx=tx, decision=COMMITTED))
        sim.run()
    assert len(server.store[1]) == 4
    server.garbage_collect()
    # the never-accessed initial version and the newest committed one remain
    assert [v.value for v in server.store[1]] == [b"", b"2"]


def test_gc_keeps_last_committed_under_undecided_tail():
    sim, server, probe = make(ServerConfig(gc_retention=0, gc_interval=None))
    committed = TxId(ts(5, 1))
    probe.send(0, exec_msg(write_req(committed, 0, 1, value=b"keep"), ts(5, 1)))
    sim.run()
    probe.send(0, CommitAbort(tx=committed, decision=COMMITTED))
    sim.run()
    pending = TxId(ts(9, 2))
    probe.send(0, exec_msg(write_req(pending, 0, 1, value=b"maybe"), ts(9, 2)))
    sim.run()
    server.garbage_collect()
    values = [v.value for v in server.store[1]]
    assert b"keep" in values  # the current state must survive a later abort
    probe.send(0, CommitAbort(tx=pending, decision=ABORTED))
    sim.run()
    assert server.store[1][-1].value == b"keep"


def test_invariants_hold_after_traffic():
    sim, server, probe = make()
    import numpy as np
    rng = np.random.default_rng(3)
    for i in range(200):
        tx = TxId(ts(10 + i, int(rng.integers(1, 4))))
        key = int(rng.integers(1, 6))
        if rng.random() < 0.5:
            probe.send(0, exec_msg(read_req(tx, 0, key), tx.start_timestamp))
        else:
            probe.send(0, exec_msg(write_req(tx, 0, key), tx.start_timestamp))
        sim.run()
        decision = COMMITTED if rng.random() < 0.8 else ABORTED
        probe.send(0, CommitAbort(tx=tx, decision=decision))
        sim.run()
        server.assert_invariants()


# ---------------------------------------------------------------------------
# Backup-coordinator recovery.
# ---------------------------------------------------------------------------


def make_two_servers():
    sim = Simulator(SimConfig(seed=0, delay=DelayModel("fixed", fixed=10)))
    cfg = ServerConfig(recovery_timeout=1000)
    s0 = sim.add_node(NCCServer(0, cfg))
    s1 = sim.add_node(NCCServer(1, cfg))
    probe = sim.add_node(Probe())
    return sim, s0, s1, probe


def run_crashed_tx(sim, probe, tx, t, decided_pairs_pass=True):
    """Execute a two-server transaction whose client then goes silent."""
    key1 = 1 if decided_pairs_pass else 1
    probe.send(0, exec_msg(write_req(tx, 0, key1), t,
                           backup=0, cohorts=((0, 1), (1, 1))))
    probe.send(1, exec_msg(write_req(tx, 1, 2, value=b"y"), t))
    sim.run(until=100)


def test_recovery_commits_finished_transaction():
    sim, s0, s1, probe = make_two_servers()
    tx = TxId(ts(5))
    run_crashed_tx(sim, probe, tx, ts(5))
    sim.run()  # recovery timer fires at 1000 and resolves the transaction
    assert s0.decisions[tx] == COMMITTED
    assert s1.decisions[tx] == COMMITTED
    assert any(r["k"] == "rdec" and r["d"] == "c" for r in sim.trace)


def test_recovery_aborts_unfinished_transaction():
    sim, s0, s1, probe = make_two_servers()
    tx = TxId(ts(5))
    # the cohort list promises two requests on server 1, only one arrives
    probe.send(0, exec_msg(write_req(tx, 0, 1), ts(5),
                           backup=0, cohorts=((0, 1), (1, 2))))
    probe.send(1, exec_msg(write_req(tx, 1, 2), ts(5)))
    sim.run()
    assert s0.decisions[tx] == ABORTED
    assert s1.decisions[tx] == ABORTED


def test_recovery_adopts_existing_decision():
    sim, s0, s1, probe = make_two_servers()
    tx = TxId(ts(5))
    run_crashed_tx(sim, probe, tx, ts(5))
    # one cohort already heard the client's abort before the crash
    probe.send(1, CommitAbort(tx=tx, decision=ABORTED))
    sim.run()
    assert s0.decisions[tx] == ABORTED
    assert s1.decisions[tx] == ABORTED


def test_recovery_timer_cancelled_by_decision():
    sim, s0, s1, probe = make_two_servers()
    tx = TxId(ts(5))
    run_crashed_tx(sim, probe, tx, ts(5))
    probe.send(0, CommitAbort(tx=tx, decision=COMMITTED))
    probe.send(1, CommitAbort(tx=tx, decision=COMMITTED))
    sim.run()
    assert not any(r["k"] == "rdec" for r in sim.trace)


def test_recover_query_reports_execution_state():
    sim, s0, s1, probe = make_two_servers()
    tx = TxId(ts(5))
    probe.send(0, exec_msg(write_req(tx, 0, 1), ts(5)))
    sim.run(until=50)
    reply = s0.recover_query(tx)
    assert reply.executed and reply.n_requests == 1
    assert s1.recover_query(tx).executed is False
