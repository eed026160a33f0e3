"""NCC client (coordinator) engine.

Drives transactions shot by shot, pre-assigns asynchrony-aware timestamps,
runs the safeguard over response timestamp pairs, orchestrates smart retry,
executes the one-round read-only protocol, and commits or aborts
asynchronously without waiting for server acknowledgments.

Transaction logics are objects with ``n_shots``, ``read_only`` and a
``shots()`` generator yielding lists of ('r', key) / ('w', key, value)
operations; each ``send`` delivers the previous shot's read results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

from .core import (
    ABORTED,
    COMMITTED,
    READ,
    WRITE,
    CommitAbort,
    EarlyAbortResp,
    ExecuteReq,
    ExecuteResp,
    RoAbortResp,
    SmartRetryReq,
    SmartRetryResp,
    Request,
    Timestamp,
    TxId,
)
from .simnet import Node

# client-visible transaction outcomes
OUT_COMMITTED = "committed"
OUT_ABORTED = "aborted"
OUT_EARLY_ABORTED = "early_aborted"
OUT_RO_ABORTED = "ro_aborted"


@dataclass
class ClientConfig:
    ewma_weight: float = 0.2  # damping for per-server t_delta samples
    use_async_ts: bool = True
    read_only_path: bool = True  # False gives the NCC-RW variant


class _ServerProfile:
    __slots__ = ("t_delta", "t_ro")

    def __init__(self):
        self.t_delta: Optional[float] = None
        self.t_ro: Optional[Timestamp] = None


class _Tx:
    __slots__ = (
        "txid", "t", "logic", "gen", "shot_index", "n_shots", "requests",
        "server_of", "pending", "responses", "values", "participants",
        "outcome", "rounds", "callback", "is_ro", "send_times", "done",
        "retry_pending", "retry_ok", "t_prime", "smart_retried", "any_delayed",
    )

    def __init__(self, txid, t, logic, callback, is_ro):
        self.txid = txid
        self.t = t
        self.logic = logic
        self.gen = None
        self.shot_index = -1
        self.n_shots = logic.n_shots
        self.requests = []  # all Requests issued so far, by idx
        self.server_of = {}  # idx -> server id
        self.pending = set()  # idx awaiting a response
        self.responses = {}  # idx -> ExecuteResp
        self.values = {}  # key -> value read in the current shot
        self.participants = {}  # server id -> request count (insertion ordered)
        self.outcome = None
        self.rounds = 0
        self.callback = callback
        self.is_ro = is_ro
        self.send_times = {}  # idx -> client physical send time (t_c)
        self.done = False
        self.retry_pending = None
        self.retry_ok = True
        self.t_prime = None
        self.smart_retried = False
        self.any_delayed = False


class NCCClient(Node):
    def __init__(
        self,
        node_id: int,
        client_id: int,
        server_for_key: Callable[[int], int],
        config: Optional[ClientConfig] = None,
    ):
        super().__init__(node_id)
        self.client_id = client_id
        self.server_for_key = server_for_key
        self.config = config or ClientConfig()
        self.profiles: Dict[int, _ServerProfile] = {}
        self.txs: Dict[TxId, _Tx] = {}
        self._last_physical = -1
        # commit-path statistics per attempt
        self.stats = {
            "first_pass": 0,
            "smart_retry": 0,
            "aborted": 0,
            "early_aborted": 0,
            "ro_aborted": 0,
            "ro_committed": 0,
        }

    # -- timestamp generation ------------------------------------------------------

    def _profile(self, server: int) -> _ServerProfile:
        prof = self.profiles.get(server)
        if prof is None:
            prof = self.profiles[server] = _ServerProfile()
        return prof

    def preset_profile(self, server: int, t_delta: float) -> None:
        """Seed a server profile, as if learned from earlier responses."""
        self._profile(server).t_delta = float(t_delta)

    def asynchrony_aware_ts(self) -> Timestamp:
        """now + greatest t_delta over contacted servers; never-contacted
        servers contribute zero."""
        adjust = 0
        if self.config.use_async_ts:
            for prof in self.profiles.values():
                if prof.t_delta is not None and prof.t_delta > adjust:
                    adjust = prof.t_delta
        physical = self.now() + int(round(adjust))
        if physical <= self._last_physical:
            physical = self._last_physical + 1  # TxIds must stay unique
        self._last_physical = physical
        return Timestamp(physical, self.client_id)

    def update_t_delta(self, server: int, t_c: int, t_s: int) -> None:
        """Fold one (send time, server execution time) sample into the
        profile; t_delta approximates where the server's refinement frame
        sits relative to this client's clock, masking queuing and skew."""
        sample = t_s - t_c
        prof = self._profile(server)
        if prof.t_delta is None:
            prof.t_delta = float(sample)
        else:
            w = self.config.ewma_weight
            prof.t_delta = (1.0 - w) * prof.t_delta + w * sample

    def _note_t_ro(self, server: int, t_w: Timestamp) -> None:
        prof = self._profile(server)
        if prof.t_ro is None or t_w > prof.t_ro:
            prof.t_ro = t_w

    # -- transaction driving ---------------------------------------------------------

    def submit(self, logic, callback: Callable) -> TxId:
        """Start one transaction attempt; callback(txid, outcome, results)."""
        is_ro = bool(getattr(logic, "read_only", False)) and self.config.read_only_path
        if is_ro:
            return self._submit_read_only(logic, callback)
        t = self.asynchrony_aware_ts()
        txid = TxId(t)
        tx = _Tx(txid, t, logic, callback, is_ro=False)
        self.txs[txid] = tx
        tx.gen = logic.shots()
        self.sim.record("issue", node=self.node_id, tx=txid.encode())
        self._issue_shot(tx, next(tx.gen))
        return txid

    def _submit_read_only(self, logic, callback: Callable) -> TxId:
        keys = sorted({op[1] for op in next(logic.shots())})
        participants = sorted({self.server_for_key(k) for k in keys})
        t = self.asynchrony_aware_ts()
        t_ro_max = None
        for s in participants:
            t_ro = self._profile(s).t_ro
            if t_ro is not None and (t_ro_max is None or t_ro > t_ro_max):
                t_ro_max = t_ro
        if t_ro_max is not None and t < t_ro_max:
            # pre-assign no less than the greatest t_ro so the safeguard is
            # guaranteed to pass absent ro_abort responses
            physical = max(t.physical, t_ro_max.physical + 1)
            self._last_physical = physical
            t = Timestamp(physical, self.client_id)
        txid = TxId(t)
        tx = _Tx(txid, t, logic, callback, is_ro=True)
        self.txs[txid] = tx
        self.sim.record("issue", node=self.node_id, tx=txid.encode())
        tx.shot_index = 0
        tx.rounds = 1
        now_phys = self.now()
        for key in keys:
            server = self.server_for_key(key)
            idx = len(tx.requests)
            req = Request(
                tx=txid, idx=idx, key=key, kind=READ,
                shot_index=0, is_read_only=True, is_last_shot=True,
            )
            tx.requests.append(req)
            tx.server_of[idx] = server
            tx.pending.add(idx)
            tx.send_times[idx] = now_phys
            tx.participants[server] = tx.participants.get(server, 0) + 1
            self.send(server, ExecuteReq(req=req, t=t, t_c=now_phys,
                                         t_ro=self._profile(server).t_ro))
        return txid

    def _issue_shot(self, tx: _Tx, ops) -> None:
        tx.shot_index += 1
        tx.rounds += 1
        tx.values = {}
        is_last = tx.shot_index == tx.n_shots - 1
        now_phys = self.now()
        shot_reqs = []
        for op in ops:
            kind, key = op[0], op[1]
            idx = len(tx.requests)
            req = Request(
                tx=tx.txid, idx=idx, key=key, kind=kind,
                value=op[2] if kind == WRITE else None,
                shot_index=tx.shot_index, is_last_shot=is_last,
            )
            tx.requests.append(req)
            server = self.server_for_key(key)
            tx.server_of[idx] = server
            tx.pending.add(idx)
            tx.send_times[idx] = now_phys
            tx.participants[server] = tx.participants.get(server, 0) + 1
            shot_reqs.append((server, req))
        backup = None
        if is_last and shot_reqs:
            backup = shot_reqs[0][0]
            cohorts = tuple(sorted(tx.participants.items()))
        for server, req in shot_reqs:
            msg = ExecuteReq(req=req, t=tx.t, t_c=now_phys)
            if is_last and server == backup and req is shot_reqs[0][1]:
                msg = ExecuteReq(req=req, t=tx.t, t_c=now_phys,
                                 backup=backup, cohorts=cohorts)
            self.send(server, msg)

    # -- message handling ---------------------------------------------------------------

    def on_message(self, src: int, msg) -> None:
        if isinstance(msg, ExecuteResp):
            self._on_execute_resp(src, msg)
        elif isinstance(msg, EarlyAbortResp):
            self._on_early_abort(msg)
        elif isinstance(msg, RoAbortResp):
            self._on_ro_abort(src, msg)
        elif isinstance(msg, SmartRetryResp):
            self._on_smart_retry_resp(msg)
        else:
            raise TypeError(f"client cannot handle {type(msg).__name__}")

    def _on_execute_resp(self, src: int, msg: ExecuteResp) -> None:
        tx = self.txs.get(msg.tx)
        if tx is None or tx.done or msg.idx in tx.responses:
            return
        self.update_t_delta(src, tx.send_times[msg.idx], msg.t_s)
        if msg.kind == WRITE:
            self._note_t_ro(src, msg.pair.t_w)
        tx.responses[msg.idx] = msg
        if msg.delayed:
            tx.any_delayed = True
        if msg.kind == READ:
            tx.values[msg.key] = msg.value
        tx.pending.discard(msg.idx)
        if tx.pending:
            return
        if tx.is_ro or tx.shot_index == tx.n_shots - 1:
            self._finish(tx)
        else:
            try:
                ops = tx.gen.send(dict(tx.values))
            except StopIteration:
                self._finish(tx)
                return
            self._issue_shot(tx, ops)

    def _on_early_abort(self, msg: EarlyAbortResp) -> None:
        tx = self.txs.get(msg.tx)
        if tx is None or tx.done:
            return
        # bypass the safeguard entirely; abort executed requests elsewhere
        self._decide(tx, ABORTED, OUT_EARLY_ABORTED)

    def _on_ro_abort(self, src: int, msg: RoAbortResp) -> None:
        tx = self.txs.get(msg.tx)
        if msg.hint_t_ro is not None:
            self._note_t_ro(src, msg.hint_t_ro)
        if tx is None or tx.done:
            return
        tx.done = True
        tx.outcome = OUT_RO_ABORTED
        self.stats["ro_aborted"] += 1
        self.sim.record("dec", node=self.node_id, tx=tx.txid.encode(), d="a")
        self._report(tx)

    # -- safeguard and decisions --------------------------------------------------------

    @staticmethod
    def safeguard_check(pairs):
        """(ok, t'): ok iff max t_w <= min t_r; t' = max t_w either way."""
        if not pairs:
            raise ValueError("safeguard needs at least one timestamp pair")
        t_w_max = max(p.t_w for p in pairs)
        t_r_min = min(p.t_r for p in pairs)
        return t_w_max <= t_r_min, t_w_max

    def _finish(self, tx: _Tx) -> None:
        pairs = [resp.pair for resp in tx.responses.values()]
        ok, t_prime = self.safeguard_check(pairs)
        if ok:
            if tx.is_ro:
                tx.done = True
                tx.outcome = OUT_COMMITTED
                self.stats["ro_committed"] += 1
                self.sim.record("dec", node=self.node_id, tx=tx.txid.encode(), d="c")
                self._report(tx)
            else:
                self.stats["first_pass"] += 1
                self._decide(tx, COMMITTED, OUT_COMMITTED)
            return
        if tx.is_ro:
            # read-only transactions stay at one message round: no retry,
            # no abort messages; the client just gives up locally
            tx.done = True
            tx.outcome = OUT_ABORTED
            self.stats["aborted"] += 1
            self.sim.record("dec", node=self.node_id, tx=tx.txid.encode(), d="a")
            self._report(tx)
            return
        # smart retry: try to reposition at t' instead of aborting
        tx.t_prime = t_prime
        tx.smart_retried = True
        tx.rounds += 1
        tx.retry_pending = set(tx.participants)
        tx.retry_ok = True
        for server in tx.participants:
            self.send(server, SmartRetryReq(tx=tx.txid, t_prime=t_prime))

    def _on_smart_retry_resp(self, msg: SmartRetryResp) -> None:
        tx = self.txs.get(msg.tx)
        if tx is None or tx.done or tx.retry_pending is None:
            return
        if msg.server not in tx.retry_pending:
            return
        tx.retry_pending.discard(msg.server)
        tx.retry_ok = tx.retry_ok and msg.ok
        if tx.retry_pending:
            return
        if tx.retry_ok:
            self.stats["smart_retry"] += 1
            self._decide(tx, COMMITTED, OUT_COMMITTED)
        else:
            self.stats["aborted"] += 1
            self._decide(tx, ABORTED, OUT_ABORTED)

    def _decide(self, tx: _Tx, decision: str, outcome: str) -> None:
        """Commit/abort everywhere asynchronously; results return in parallel."""
        tx.done = True
        tx.outcome = outcome
        if outcome == OUT_EARLY_ABORTED:
            self.stats["early_aborted"] += 1
        tx.rounds += 1
        self.sim.record(
            "dec", node=self.node_id, tx=tx.txid.encode(),
            d="c" if decision == COMMITTED else "a",
        )
        for server in tx.participants:
            self.send(server, CommitAbort(tx=tx.txid, decision=decision))
        self._report(tx)

    def _report(self, tx: _Tx) -> None:
        self.sim.record(
            "txn", node=self.node_id, tx=tx.txid.encode(), outcome=tx.outcome,
            rounds=tx.rounds, ro=tx.is_ro, retried=tx.smart_retried,
            delayed=tx.any_delayed, shots=tx.n_shots,
            tp=tx.t_prime.physical if tx.t_prime is not None else None,
        )
        del self.txs[tx.txid]
        results = {}
        if tx.outcome == OUT_COMMITTED:
            for resp in tx.responses.values():
                if resp.kind == READ:
                    results[resp.key] = resp.value
        tx.callback(tx.txid, tx.outcome, results)
