"""Staged micro-scenarios with hand-checkable outcomes.

Each scenario wires a small topology with controlled clocks and link
delays, runs it to quiescence, and returns a plain dict of observations
(the CLI renders it as JSON).  Covered:

- fig4a: asynchrony-aware timestamping lets a client with a larger
  observed refinement offset pre-assign a larger timestamp.
- fig4b-smart-retry: a safeguard reject with pairs {(0,4),(6,6)} is
  rescued by repositioning every access at t' = 6.
- rtc-inversion: with response timing control disabled, an eager read of
  an undecided version produces a real-time inversion; enabled, the same
  staging is clean.
- mvto-skew: multi-version timestamp ordering under clock skew serves a
  stale read to a transaction issued after the writer committed.
- failure-recovery: a client whose commit messages are dropped; backup
  coordinators resolve its transactions after the recovery timeout.
"""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import workload as wl
from .baselines import MvtoClient, MvtoServer
from .bench import BenchConfig, RetryPolicy, run_benchmark
from .checker import check_trace
from .client import ClientConfig, NCCClient
from .core import ExecuteReq
from .server import NCCServer, ServerConfig
from .simnet import (
    DROP_COMMITS,
    DelayModel,
    FailureInjection,
    SimConfig,
    Simulator,
)
from .workload import Logic


def _fixed_delay_config(seed: int, n_servers: int, n_clients: int) -> SimConfig:
    return SimConfig(
        seed=seed, n_servers=n_servers, n_clients=n_clients,
        delay=DelayModel("fixed", fixed=150),
    )


class _SafeguardSpy(NCCClient):
    """Client that records the timestamp pairs each safeguard check saw."""

    def _finish(self, tx):
        if not hasattr(self, "pair_log"):
            self.pair_log = {}
        self.pair_log[tx.txid.encode()] = sorted(
            (r.pair.t_w.physical, r.pair.t_r.physical)
            for r in tx.responses.values()
        )
        super()._finish(tx)


def fig4a(seed: int = 0) -> dict:
    """Two clients with different observed offsets write the same key.

    Client 1 submits at local time 1004 with offset 10; client 2 at 1005
    with offset 5.  Pre-assigned timestamps come out as (1014, c1) and
    (1010, c2) and both transactions commit.
    """
    def per_client_delay(src, dst, msg):
        # client 2 sits closer to the server, so its request lands first
        # and the installed version order matches the timestamp order
        return {1: 160, 2: 100}.get(src, 150)

    config = SimConfig(
        seed=seed, n_servers=1, n_clients=2,
        delay=DelayModel("fixed", fixed=150), link_delay=per_client_delay,
    )
    sim = Simulator(config)
    server = sim.add_node(NCCServer(0))
    server.start()
    place = lambda key: 0
    c1 = sim.add_node(NCCClient(1, 1, place), skew=0)
    c2 = sim.add_node(NCCClient(2, 2, place), skew=0)
    c1.preset_profile(0, 10.0)
    c2.preset_profile(0, 5.0)

    outcomes: Dict[str, str] = {}
    tids = {}

    def cb(txid, outcome, results):
        outcomes[txid.encode()] = outcome

    def go(name, client, value):
        tids[name] = client.submit(Logic([[("w", 0, value)]]), cb).encode()

    sim.call_at(1004, lambda: go("c1", c1, b"a"))
    sim.call_at(1005, lambda: go("c2", c2, b"b"))
    sim.run()
    code, _ = check_trace(sim.trace)
    return {
        "scenario": "fig4a",
        "t_c1": tids["c1"],
        "t_c2": tids["c2"],
        "outcome_c1": outcomes.get(tids["c1"]),
        "outcome_c2": outcomes.get(tids["c2"]),
        "checker_exit": code,
        "message": "pre-assigned %s and %s; both %s" % (
            tids["c1"], tids["c2"],
            "committed" if set(outcomes.values()) == {"committed"} else "NOT committed",
        ),
    }


def fig4b_smart_retry(seed: int = 0) -> dict:
    """A read-write transaction whose safeguard sees pairs {(0,4),(6,6)}.

    A read-only transaction at timestamp 5 first reads key B, pushing its
    initial version's read mark to 5.  Transaction T at timestamp 4 then
    reads key A, pair (0, 4), and writes key B, refined to pair (6, 6).
    The safeguard rejects (6 > 4); smart retry repositions everything at
    t' = 6 and the transaction commits.
    """
    sim = Simulator(_fixed_delay_config(seed, n_servers=2, n_clients=2))
    for sid in (0, 1):
        sim.add_node(NCCServer(sid)).start()
    place = lambda key: key
    no_async = ClientConfig(use_async_ts=False)
    reader = sim.add_node(NCCClient(2, 1, place, no_async), skew=0)
    spy = sim.add_node(_SafeguardSpy(3, 2, place, no_async), skew=-6)

    outcomes: Dict[str, str] = {}
    tids = {}

    def cb(txid, outcome, results):
        outcomes[txid.encode()] = outcome

    def go_reader():
        tids["reader"] = reader.submit(
            Logic([[("r", 1)]], read_only=True), cb
        ).encode()

    def go_t():
        tids["t"] = spy.submit(
            Logic([[("r", 0), ("w", 1, b"x")]]), cb
        ).encode()

    sim.call_at(5, go_reader)
    sim.call_at(10, go_t)  # local clock reads 4 under the -6 skew
    sim.run()

    t_id = tids["t"]
    txn = next(
        rec for rec in sim.trace
        if rec["k"] == "txn" and rec["tx"] == t_id
    )
    code, _ = check_trace(sim.trace)
    result = {
        "scenario": "fig4b-smart-retry",
        "t": t_id,
        "pairs": spy.pair_log[t_id],
        "outcome": outcomes[t_id],
        "retried": txn["retried"],
        "t_prime": txn["tp"],
        "checker_exit": code,
    }
    if outcomes[t_id] == "committed" and txn["retried"]:
        result["message"] = "committed at t'=%d" % txn["tp"]
    else:
        result["message"] = "outcome %s" % outcomes[t_id]
    return result


def rtc_inversion(seed: int = 0, rtc_enabled: bool = True) -> dict:
    """Three transactions that need response timing control.

    A writer updates keys A and B in one shot, with the B request on a
    slow link.  Reader 1 (small timestamp, via skew) reads the writer's
    undecided A version; reader 2 is issued only after reader 1 finishes
    and reads B before the slow write lands.  With eager responses,
    reader 1 commits against a version whose fate is still open and the
    committed history contains a real-time inversion; with timing control
    the read is held back until the writer decides.
    """
    writer_node = 2
    rng = np.random.default_rng(seed)
    jit = [int(j) for j in rng.integers(0, 40, 3)]

    def slow_b_write(src, dst, msg):
        if src == writer_node and dst == 1 and isinstance(msg, ExecuteReq):
            return 5000
        return None

    config = SimConfig(
        seed=seed, n_servers=2, n_clients=3,
        delay=DelayModel("uniform", low=100, high=200),
        link_delay=slow_b_write,
    )
    sim = Simulator(config)
    scfg = ServerConfig(rtc_enabled=rtc_enabled)
    for sid in (0, 1):
        sim.add_node(NCCServer(sid, scfg)).start()
    place = lambda key: key
    no_async = ClientConfig(use_async_ts=False)
    writer = sim.add_node(NCCClient(writer_node, 1, place, no_async), skew=2000)
    reader1 = sim.add_node(NCCClient(3, 2, place, no_async), skew=0)
    reader2 = sim.add_node(NCCClient(4, 3, place, no_async), skew=2000)

    outcomes: Dict[str, str] = {}

    def cb(txid, outcome, results):
        outcomes[txid.encode()] = outcome

    sim.call_at(1000 + jit[0], lambda: writer.submit(
        Logic([[("w", 0, b"a"), ("w", 1, b"b")]]), cb))
    sim.call_at(1400 + jit[1], lambda: reader1.submit(
        Logic([[("r", 0)]]), cb))
    sim.call_at(2600 + jit[2], lambda: reader2.submit(
        Logic([[("r", 1)]]), cb))
    sim.run()
    code, detail = check_trace(sim.trace)
    return {
        "scenario": "rtc-inversion",
        "rtc_enabled": rtc_enabled,
        "outcomes": dict(sorted(outcomes.items())),
        "checker_exit": code,
        "violation": detail if code == 2 else None,
        "message": (
            "timing control on: history clean" if rtc_enabled and code == 0
            else "timing control off: checker exit %d" % code if not rtc_enabled
            else "unexpected checker exit %d" % code
        ),
    }


def mvto_skew(seed: int = 0, protocol: str = "mvto") -> dict:
    """Clock skew makes a later-issued reader carry a smaller timestamp.

    The writer (fast clock) commits a new version of key 0; the reader is
    issued afterwards in real time but its timestamp is smaller.  Reading
    by timestamp serves the pre-write state: a real-time inversion.  The
    same staging on the timestamp-refinement engine reads the latest
    version and stays clean.
    """
    sim = Simulator(_fixed_delay_config(seed, n_servers=1, n_clients=2))
    place = lambda key: 0
    if protocol == "mvto":
        sim.add_node(MvtoServer(0))
        writer = sim.add_node(MvtoClient(1, 1, place), skew=1000)
        reader = sim.add_node(MvtoClient(2, 2, place), skew=0)
    elif protocol in ("ncc", "ncc-rw"):
        sim.add_node(NCCServer(0)).start()
        no_async = ClientConfig(use_async_ts=False)
        writer = sim.add_node(NCCClient(1, 1, place, no_async), skew=1000)
        reader = sim.add_node(NCCClient(2, 2, place, no_async), skew=0)
    else:
        raise ValueError(f"scenario has no {protocol!r} variant")

    outcomes: Dict[str, str] = {}

    def cb(txid, outcome, results):
        outcomes[txid.encode()] = outcome

    sim.call_at(1000, lambda: writer.submit(Logic([[("w", 0, b"v")]]), cb))
    sim.call_at(1800, lambda: reader.submit(Logic([[("r", 0)]]), cb))
    sim.run()
    code, detail = check_trace(sim.trace)
    return {
        "scenario": "mvto-skew",
        "protocol": protocol,
        "outcomes": dict(sorted(outcomes.items())),
        "checker_exit": code,
        "violation": detail if code == 2 else None,
        "message": "checker exit %d under %s" % (code, protocol),
    }


def failure_recovery(
    seed: int = 0,
    crash_at: int = 800_000,
    recovery_timeout: int = 1_000_000,
    duration: int = 4_000_000,
) -> dict:
    """One client's commit messages are dropped mid-run.

    Runs the same seeded workload with and without the failure and
    reports: checker verdict, agreement of every backup decision with the
    client's own decision, equality of all pre-crash decisions, and
    committed-transaction counts per window for throughput comparison.
    """
    spec = wl.workload_spec(
        "google-f1", n_servers=4,
        write_fraction=0.5, n_keys=2000, arrival_rate=300.0,
        keys_rw=(1, 3), keys_ro=(1, 3), value_mean=64, value_sd=8,
    )
    bench = BenchConfig(duration=duration, grace=4_000_000, window=200_000)
    scfg = ServerConfig(recovery_timeout=recovery_timeout)

    def one(failures):
        sim_config = SimConfig(seed=seed, n_servers=4, n_clients=8, failures=failures)
        return run_benchmark("ncc", spec, sim_config, bench, server_config=scfg)

    crash_client = 4  # first client node id (after the 4 servers)
    rep_fail, trace_fail, _ = one(
        (FailureInjection(client=crash_client, at=crash_at, mode=DROP_COMMITS),)
    )
    rep_free, trace_free, _ = one(())

    code, detail = check_trace(trace_fail)

    def decisions_before(trace, cutoff):
        out = {}
        for rec in trace:
            if rec["k"] == "dec" and rec["t"] < cutoff:
                out.setdefault(rec["tx"], rec["d"])
        return out

    pre_crash_equal = (
        decisions_before(trace_fail, crash_at) == decisions_before(trace_free, crash_at)
    )

    client_dec = {}
    for rec in trace_fail:
        if rec["k"] == "dec":
            client_dec.setdefault(rec["tx"], rec["d"])
    recovery_decisions = [rec for rec in trace_fail if rec["k"] == "rdec"]
    recovery_agrees = all(
        client_dec.get(rec["tx"]) == rec["d"] for rec in recovery_decisions
    )

    # committed transactions per window, over [crash + 2*timeout, duration)
    lo = (crash_at + 2 * recovery_timeout) // bench.window
    hi = duration // bench.window
    tail_fail = sum(rep_fail.window_commits[lo:hi])
    tail_free = sum(rep_free.window_commits[lo:hi])
    recovered = tail_free > 0 and tail_fail >= 0.9 * tail_free

    return {
        "scenario": "failure-recovery",
        "crash_at": crash_at,
        "recovery_timeout": recovery_timeout,
        "checker_exit": code,
        "violation": detail if code == 2 else None,
        "n_recovery_decisions": len(recovery_decisions),
        "recovery_agrees_with_client": recovery_agrees,
        "pre_crash_decisions_equal": pre_crash_equal,
        "tail_commits_failure": tail_fail,
        "tail_commits_failure_free": tail_free,
        "throughput_recovered": recovered,
        "windows_failure": rep_fail.window_commits,
        "windows_failure_free": rep_free.window_commits,
        "message": (
            "recovered" if recovered and recovery_agrees and code == 0
            else "NOT recovered"
        ),
    }


SCENARIOS = {
    "fig4a": fig4a,
    "fig4b-smart-retry": fig4b_smart_retry,
    "rtc-inversion": rtc_inversion,
    "mvto-skew": mvto_skew,
    "failure-recovery": failure_recovery,
}


def run_scenario(name: str, seed: int = 0, **kwargs) -> dict:
    fn = SCENARIOS.get(name)
    if fn is None:
        raise KeyError(name)
    return fn(seed=seed, **kwargs)
