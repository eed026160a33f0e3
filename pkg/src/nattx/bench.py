"""Benchmark harness: wires a workload generator to protocol engines over
the simulated network, drives open-loop arrivals with retry and backoff,
and aggregates per-run metrics from the event trace.

Workload transactions are identified by their arrival sequence number, so
the same (config, seed) pair yields comparable per-transaction outcomes
across protocol variants and failure scenarios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional

import numpy as np

from . import workload as wl
from .baselines import (
    D2plClient,
    DOccClient,
    LockServer,
    MvtoClient,
    MvtoServer,
    OccServer,
)
from .client import ClientConfig, NCCClient
from .server import NCCServer, ServerConfig
from .simnet import SimConfig, Simulator

PROTOCOLS = ("ncc", "ncc-rw", "docc", "d2pl-nw", "d2pl-ww", "mvto")


@dataclass
class RetryPolicy:
    max_attempts: int = 5
    base_rtts: float = 1.0  # first backoff, in round-trip times
    factor: float = 2.0
    cap_rtts: float = 16.0
    ro_fallback_after: int = 3  # read-only aborts before read-write fallback


@dataclass
class BenchConfig:
    duration: int = 2_000_000  # arrival window, virtual usec
    grace: int = 5_000_000  # extra time to let in-flight work finish
    inflight_cap: int = 16  # per-client open-loop backoff valve
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    rtc_enabled: bool = True
    window: int = 100_000  # commit-throughput window, usec


@dataclass
class MetricsReport:
    protocol: str
    workload: str
    seed: int
    duration: int
    generated: int = 0  # workload transactions that arrived
    finished: int = 0  # reached a final outcome (committed or given up)
    committed_txns: int = 0
    failed_txns: int = 0
    unfinished_txns: int = 0
    attempts: int = 0
    committed_attempts: int = 0
    commit_rate: float = 0.0  # committed attempts / attempts
    first_pass: int = 0  # commit-path split, protocol engines with a safeguard
    smart_retry: int = 0
    truly_aborted: int = 0
    early_aborted: int = 0
    ro_aborted: int = 0
    frac_first_pass_no_delay: float = 0.0
    frac_rescued: float = 0.0  # smart retries / safeguard rejects
    frac_truly_aborted: float = 0.0
    mean_rounds_committed: float = 0.0
    latency_p50: float = 0.0
    latency_p99: float = 0.0
    throughput: float = 0.0  # commits per simulated second
    messages: int = 0
    responses_delayed: int = 0
    responses_sent: int = 0
    window_commits: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def mean_delay(config: SimConfig) -> float:
    d = config.delay
    if d.kind == "fixed":
        return float(d.fixed)
    if d.kind == "uniform":
        return (d.low + d.high) / 2.0
    return math.exp(d.mu + d.sigma ** 2 / 2.0)


def _build(protocol: str, sim: Simulator, n_servers: int, n_clients: int,
           place, rtc_enabled: bool, server_config: Optional[ServerConfig]):
    servers = []
    clients = []
    if protocol in ("ncc", "ncc-rw"):
        cfg = server_config or ServerConfig()
        cfg.rtc_enabled = rtc_enabled
        for i in range(n_servers):
            s = sim.add_node(NCCServer(i, cfg))
            s.start()
            servers.append(s)
        ccfg = ClientConfig(read_only_path=(protocol == "ncc"))
        for i in range(n_clients):
            clients.append(sim.add_node(
                NCCClient(n_servers + i, client_id=i, server_for_key=place, config=ccfg)
            ))
    elif protocol == "docc":
        for i in range(n_servers):
            servers.append(sim.add_node(OccServer(i)))
        for i in range(n_clients):
            clients.append(sim.add_node(DOccClient(n_servers + i, i, place)))
    elif protocol in ("d2pl-nw", "d2pl-ww"):
        no_wait = protocol == "d2pl-nw"
        for i in range(n_servers):
            servers.append(sim.add_node(LockServer(i, no_wait=no_wait)))
        for i in range(n_clients):
            clients.append(sim.add_node(D2plClient(n_servers + i, i, place, no_wait=no_wait)))
    elif protocol == "mvto":
        for i in range(n_servers):
            servers.append(sim.add_node(MvtoServer(i)))
        for i in range(n_clients):
            clients.append(sim.add_node(MvtoClient(n_servers + i, i, place)))
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return servers, clients


class _WorkloadTx:
    __slots__ = ("wid", "logic", "attempts", "ro_aborts", "client", "final", "first_issue")

    def __init__(self, wid, logic, client):
        self.wid = wid
        self.logic = logic
        self.attempts = 0
        self.ro_aborts = 0
        self.client = client
        self.final = None
        self.first_issue = None


def run_benchmark(
    protocol: str,
    spec: wl.WorkloadSpec,
    sim_config: SimConfig,
    bench: Optional[BenchConfig] = None,
    server_config: Optional[ServerConfig] = None,
):
    """Run one simulation; returns (MetricsReport, trace, sim)."""
    bench = bench or BenchConfig()
    sim = Simulator(sim_config)
    place = wl.server_for_key(spec, sim_config.n_servers)
    servers, clients = _build(
        protocol, sim, sim_config.n_servers, sim_config.n_clients, place,
        bench.rtc_enabled, server_config,
    )
    gen = wl.make_generator(spec, sim.workload_seed)
    arrival_rng = np.random.default_rng(sim.workload_seed.spawn(1)[0])
    rtt = 2.0 * mean_delay(sim_config)
    inflight = {c.node_id: 0 for c in clients}
    state: Dict[int, _WorkloadTx] = {}
    outcome_by_wid: Dict[int, str] = {}

    def submit(wtx: _WorkloadTx) -> None:
        client = wtx.client
        if inflight[client.node_id] >= bench.inflight_cap:
            sim.call_later(int(rtt), lambda: submit(wtx))  # overload backoff
            return
        logic = wtx.logic
        if (
            wtx.ro_aborts >= bench.retry.ro_fallback_after
            and getattr(logic, "read_only", False)
        ):
            logic = logic.as_read_write()
        wtx.attempts += 1
        inflight[client.node_id] += 1
        if wtx.first_issue is None:
            wtx.first_issue = sim.now

        def done(txid, outcome, results, wtx=wtx, client=client):
            inflight[client.node_id] -= 1
            if outcome == "committed":
                wtx.final = "committed"
                outcome_by_wid[wtx.wid] = "committed"
                return
            if outcome == "ro_aborted":
                wtx.ro_aborts += 1
            if wtx.attempts >= bench.retry.max_attempts:
                wtx.final = "failed"
                outcome_by_wid[wtx.wid] = "failed"
                return
            backoff = rtt * min(
                bench.retry.cap_rtts,
                bench.retry.base_rtts * bench.retry.factor ** (wtx.attempts - 1),
            )
            sim.call_later(int(backoff), lambda: submit(wtx))

        client.submit(logic, done)

    t = 0
    wid = 0
    mean_gap = 1e6 / spec.arrival_rate
    while True:
        t += max(1, int(arrival_rng.exponential(mean_gap)))
        if t > bench.duration:
            break
        logic = next(gen)
        client = clients[wid % len(clients)]
        wtx = _WorkloadTx(wid, logic, client)
        state[wid] = wtx
        sim.call_at(t, lambda wtx=wtx: submit(wtx))
        wid += 1

    sim.run(until=bench.duration + bench.grace)

    report = _metrics(protocol, spec, sim, servers, clients, state, bench)
    return report, sim.trace, sim


def _metrics(protocol, spec, sim, servers, clients, state, bench) -> MetricsReport:
    rep = MetricsReport(
        protocol=protocol, workload=spec.name, seed=sim.config.seed,
        duration=bench.duration,
    )
    rep.generated = len(state)
    for wtx in state.values():
        if wtx.final == "committed":
            rep.committed_txns += 1
        elif wtx.final == "failed":
            rep.failed_txns += 1
        else:
            rep.unfinished_txns += 1
    rep.finished = rep.committed_txns + rep.failed_txns

    issue_t: Dict[str, int] = {}
    latencies = []
    n_windows = (bench.duration + bench.grace) // bench.window + 1
    windows = [0] * n_windows
    rounds_committed = []
    first_pass_no_delay = 0
    for rec in sim.trace:
        k = rec["k"]
        if k == "issue":
            issue_t.setdefault(rec["tx"], rec["t"])
        elif k == "txn":
            rep.attempts += 1
            if rec["outcome"] == "committed":
                rep.committed_attempts += 1
                rounds_committed.append(rec["rounds"])
                latencies.append(rec["t"] - issue_t[rec["tx"]])
                windows[rec["t"] // bench.window] += 1
                if rec["retried"]:
                    rep.smart_retry += 1
                else:
                    rep.first_pass += 1
                    if not rec["delayed"]:
                        first_pass_no_delay += 1
            elif rec["outcome"] == "early_aborted":
                rep.early_aborted += 1
            elif rec["outcome"] == "ro_aborted":
                rep.ro_aborted += 1
            else:
                rep.truly_aborted += 1
    if rep.attempts:
        rep.commit_rate = rep.committed_attempts / rep.attempts
    if rep.committed_attempts:
        rep.frac_first_pass_no_delay = first_pass_no_delay / rep.attempts
        rep.mean_rounds_committed = float(np.mean(rounds_committed))
    rejects = rep.smart_retry + rep.truly_aborted
    if rejects:
        rep.frac_rescued = rep.smart_retry / rejects
    if rep.attempts:
        rep.frac_truly_aborted = rep.truly_aborted / rep.attempts
    if latencies:
        rep.latency_p50 = float(np.percentile(latencies, 50))
        rep.latency_p99 = float(np.percentile(latencies, 99))
    rep.throughput = rep.committed_attempts / ((bench.duration + bench.grace) / 1e6)
    rep.messages = sim.messages_sent
    rep.responses_delayed = sum(getattr(s, "responses_delayed", 0) for s in servers)
    rep.responses_sent = sum(getattr(s, "responses_sent", 0) for s in servers)
    rep.window_commits = windows
    return rep
