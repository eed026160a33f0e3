"""Deterministic discrete-event network simulator.

One simulation is one logical thread: a seeded priority queue of events,
virtual integer-microsecond clocks (optionally skewed per node), and
message delivery with configurable delay models.  The same (config, seed)
always yields a byte-identical trace.
"""

from __future__ import annotations

import heapq
import json
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import CommitAbort, encode_message


DROP_COMMITS = "drop-commits"
FULL_STOP = "full-stop"


@dataclass
class DelayModel:
    """Per-link-class message delay, in virtual microseconds."""

    kind: str = "uniform"  # fixed | uniform | lognormal
    fixed: int = 150
    low: int = 100
    high: int = 200
    mu: float = 5.0
    sigma: float = 0.3

    def sample(self, rng) -> int:
        if self.kind == "fixed":
            return self.fixed
        if self.kind == "uniform":
            return int(rng.integers(self.low, self.high + 1))
        if self.kind == "lognormal":
            return max(1, int(rng.lognormal(self.mu, self.sigma)))
        raise ValueError(f"unknown delay model {self.kind!r}")


@dataclass
class FailureInjection:
    client: int
    at: int  # virtual time
    mode: str = DROP_COMMITS


@dataclass
class SimConfig:
    seed: int = 0
    n_servers: int = 4
    n_clients: int = 8
    delay: DelayModel = field(default_factory=lambda: DelayModel("uniform", low=100, high=200))
    reorder: bool = False
    duplicate_prob: float = 0.0
    clock_skew_max: int = 0  # per-node offset drawn uniformly in [-max, max]
    failures: tuple = ()  # FailureInjection, ...
    max_events: int = 50_000_000  # livelock guard
    link_delay: Optional[Callable] = None  # (src, dst, msg) -> usec override


class Node:
    """Base class for simulated nodes; handlers run serially per simulation."""

    def __init__(self, node_id: int):
        self.node_id = node_id
        self.sim: Optional["Simulator"] = None

    def now(self) -> int:
        """Node-local physical time (global virtual time plus skew)."""
        return self.sim.local_time(self.node_id)

    def send(self, dst: int, msg) -> None:
        self.sim.post(self.node_id, dst, msg)

    def set_timer(self, delay: int, fn: Callable[[], None], daemon: bool = False):
        return self.sim.call_later(delay, fn, daemon=daemon)

    def on_message(self, src: int, msg) -> None:
        raise NotImplementedError


class Simulator:
    def __init__(self, config: SimConfig):
        self.config = config
        self.now = 0
        self._seq = 0
        self._heap = []
        self._live = 0  # pending non-daemon, non-cancelled events
        self.nodes = {}
        self.trace = []
        self.step = 0  # count of processed events; one handler per step
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        self._net_rng = np.random.default_rng(seeds[0])
        self._skew_rng = np.random.default_rng(seeds[1])
        self.workload_seed = seeds[2]
        self._skew = {}
        self._last_delivery = {}
        self._failed = {}  # client id -> mode
        self.messages_sent = 0
        for inj in config.failures:
            self.call_at(inj.at, lambda inj=inj: self._fail(inj))

    # -- node management ----------------------------------------------------

    def add_node(self, node: Node, skew: Optional[int] = None) -> Node:
        node.sim = self
        self.nodes[node.node_id] = node
        if skew is not None:
            self._skew[node.node_id] = skew
        elif self.config.clock_skew_max > 0:
            self._skew[node.node_id] = int(
                self._skew_rng.integers(
                    -self.config.clock_skew_max, self.config.clock_skew_max + 1
                )
            )
        else:
            self._skew[node.node_id] = 0
        return node

    def local_time(self, node_id: int) -> int:
        return self.now + self._skew[node_id]

    # -- event scheduling ----------------------------------------------------

    def call_at(self, when: int, fn: Callable[[], None], daemon: bool = False):
        # daemon events (periodic maintenance) never keep the run loop alive
        self._seq += 1
        entry = [max(when, self.now), self._seq, fn, False, daemon]
        heapq.heappush(self._heap, entry)
        if not daemon:
            self._live += 1
        return entry

    def call_later(self, delay: int, fn: Callable[[], None], daemon: bool = False):
        return self.call_at(self.now + delay, fn, daemon=daemon)

    def cancel(self, entry) -> None:
        if not entry[3]:
            entry[3] = True
            if not entry[4]:
                self._live -= 1

    def post(self, src: int, dst: int, msg) -> None:
        mode = self._failed.get(src)
        if mode == FULL_STOP:
            return
        if mode == DROP_COMMITS and isinstance(msg, CommitAbort):
            return
        if self.config.link_delay is not None:
            delay = self.config.link_delay(src, dst, msg)
            if delay is None:
                delay = self.config.delay.sample(self._net_rng)
        else:
            delay = self.config.delay.sample(self._net_rng)
        when = self.now + delay
        if not self.config.reorder:
            link = (src, dst)
            prev = self._last_delivery.get(link, 0)
            when = max(when, prev)
            self._last_delivery[link] = when
        self.messages_sent += 1
        tx = getattr(msg, "tx", None)
        if tx is None:
            req = getattr(msg, "req", None)
            if req is not None:
                tx = req.tx
        self.record(
            "msg", node=src, dst=dst, mkind=type(msg).__name__,
            tx=tx.encode() if tx is not None else None,
        )
        self.call_at(when, lambda: self._deliver(src, dst, msg))
        if self.config.duplicate_prob > 0 and (
            self._net_rng.random() < self.config.duplicate_prob
        ):
            dup_when = when + self.config.delay.sample(self._net_rng)
            self.call_at(dup_when, lambda: self._deliver(src, dst, msg))

    def _deliver(self, src: int, dst: int, msg) -> None:
        if self._failed.get(dst) == FULL_STOP:
            return
        self.nodes[dst].on_message(src, msg)

    def _fail(self, inj: FailureInjection) -> None:
        self._failed[inj.client] = inj.mode
        self.record("fail", node=inj.client, mode=inj.mode)

    # -- main loop -----------------------------------------------------------

    def run(self, until: Optional[int] = None) -> None:
        """Process events in deterministic order until quiescence or `until`."""
        processed = 0
        while self._heap:
            if until is None and self._live == 0:
                break  # only daemon maintenance left: quiescent
            when, _, fn, cancelled, daemon = self._heap[0]
            if until is not None and when > until:
                break
            heapq.heappop(self._heap)
            if cancelled:
                continue
            if not daemon:
                self._live -= 1
            self.now = when
            self.step += 1
            fn()
            processed += 1
            if processed > self.config.max_events:
                raise RuntimeError(
                    f"livelock guard: more than {self.config.max_events} events"
                )
        if until is not None and self.now < until:
            self.now = until

    # -- tracing ---------------------------------------------------------------

    def record(self, kind: str, **extra) -> None:
        rec = {"k": kind, "t": self.now}
        rec.update(extra)
        self.trace.append(rec)


def trace_to_jsonl(trace) -> bytes:
    """Canonical line-delimited encoding of a trace; byte-stable."""
    lines = []
    for rec in trace:
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    return ("\n".join(lines) + "\n").encode()


def trace_from_jsonl(data: bytes):
    return [json.loads(line) for line in data.decode().splitlines() if line]


def payload_digest(msg) -> str:
    return format(
        zlib.crc32(json.dumps(encode_message(msg), sort_keys=True).encode()), "08x"
    )
