"""NCC server engine: multi-versioned store, non-blocking execution with
timestamp refinement, response timing control, smart retry, read-only fast
path, early abort, garbage collection, and backup-coordinator recovery.

All message handlers run serially (event-loop contract); no handler ever
waits on a transaction decision.  Deferred responses go through per-key
response queues.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .core import (
    ABORTED,
    COMMITTED,
    READ,
    UNDECIDED,
    WRITE,
    CommitAbort,
    EarlyAbortResp,
    ExecuteReq,
    ExecuteResp,
    RecoverQuery,
    RecoverReply,
    RoAbortResp,
    SmartRetryReq,
    SmartRetryResp,
    Request,
    Timestamp,
    TimestampPair,
    TS_ZERO,
    TxId,
)
from .simnet import Node


class Version:
    __slots__ = (
        "key",
        "value",
        "t_w",
        "t_r",
        "status",
        "creator",
        "removed",
        "vid",
        "order",
        "undecided_accessors",
        "decided_at",
        "ro_items",
        "t_r_owner",
        "t_r_runner_up",
    )

    def __init__(self, key, value, t_w, t_r, status, creator, vid, order):
        self.key = key
        self.value = value
        self.t_w = t_w
        self.t_r = t_r
        self.status = status
        self.creator = creator
        self.removed = False
        self.vid = vid
        self.order = order
        self.undecided_accessors = set()
        self.decided_at = None
        self.ro_items = []
        # who holds the current max t_r, and the max over everyone else:
        # a transaction's own read must not push its own write's floor up
        self.t_r_owner = None
        self.t_r_runner_up = t_r

    def refine_t_r(self, tx, t) -> None:
        if t > self.t_r:
            if self.t_r_owner is not None and self.t_r_owner != tx:
                self.t_r_runner_up = self.t_r
            self.t_r = t
            self.t_r_owner = tx
        elif self.t_r_owner != tx and t > self.t_r_runner_up:
            self.t_r_runner_up = t

    def write_floor(self, tx) -> Timestamp:
        """Highest read timestamp a write by tx must exceed."""
        if self.t_r_owner == tx:
            return max(self.t_r_runner_up, self.t_w)
        return self.t_r

    @property
    def pair(self) -> TimestampPair:
        return TimestampPair(self.t_w, self.t_r)


class QItem:
    __slots__ = ("resp", "request", "ts", "q_status", "observed", "ro", "exec_step", "dst")

    def __init__(self, resp, request, ts, observed, dst, exec_step, ro=False):
        self.resp = resp
        self.request = request
        self.ts = ts
        self.q_status = UNDECIDED
        self.observed = observed  # Version a read fetched, None for writes
        self.ro = ro
        self.exec_step = exec_step
        self.dst = dst


class TxInfo:
    __slots__ = ("created", "read", "pair_by_req", "executed", "keys", "decided")

    def __init__(self):
        self.created: List[Version] = []
        self.read: List[Version] = []
        # response-time pair per request, frozen at execution (re-execution
        # of a locally fixed read replaces its entry)
        self.pair_by_req: Dict[tuple, TimestampPair] = {}
        self.executed = set()  # request ids, for at-least-once dedup
        self.keys = []
        self.decided: Optional[str] = None

    @property
    def pairs(self) -> List[TimestampPair]:
        return list(self.pair_by_req.values())


class _RecoveryState:
    __slots__ = ("cohorts", "timer", "replies", "retry_replies", "phase", "t_prime")

    def __init__(self, cohorts, timer):
        self.cohorts = cohorts  # tuple of (server_id, expected_request_count)
        self.timer = timer
        self.replies = {}
        self.retry_replies = {}
        self.phase = "armed"
        self.t_prime = None


@dataclass
class ServerConfig:
    rtc_enabled: bool = True  # test-only switch; disabling sends responses eagerly
    recovery_timeout: Optional[int] = 1_000_000  # backup-coordinator timer, usec
    gc_interval: Optional[int] = 500_000
    gc_retention: int = 2_000  # keep decided versions this long for smart retry
    detail_trace: bool = False  # per-operation engine log records


class NCCServer(Node):
    def __init__(self, node_id: int, config: Optional[ServerConfig] = None):
        super().__init__(node_id)
        self.config = config or ServerConfig()
        self.store: Dict[int, List[Version]] = {}
        self.resp_qs: Dict[int, List[QItem]] = {}
        self.ro_seen = set()  # read-only request ids, for at-least-once dedup
        self.watermark: Timestamp = TS_ZERO
        self.txs: Dict[TxId, TxInfo] = {}
        self.decisions: Dict[TxId, str] = {}
        self._vid_seq = 0
        self._recovery: Dict[TxId, _RecoveryState] = {}
        # instrumentation
        self.responses_sent = 0
        self.responses_delayed = 0
        self.early_aborts = 0
        self.ro_aborts = 0
        self.smart_retry_ok = 0
        self.smart_retry_fail = 0
        self.gc_reclaimed = 0

    def start(self):
        """Arm periodic garbage collection; call once the node is registered."""
        if self.config.gc_interval:
            self.set_timer(self.config.gc_interval, self._gc_tick, daemon=True)

    # -- message dispatch -----------------------------------------------------

    def on_message(self, src: int, msg) -> None:
        if isinstance(msg, ExecuteReq):
            self.handle_execute(src, msg)
        elif isinstance(msg, CommitAbort):
            self.apply_decision(msg.tx, msg.decision)
        elif isinstance(msg, SmartRetryReq):
            ok = self.try_smart_retry(msg.tx, msg.t_prime)
            if not ok and msg.tx not in self.decisions:
                # a failed retry means the coordinator must abort; deciding
                # locally keeps a later backup recovery from diverging
                self.apply_decision(msg.tx, ABORTED)
            self.send(src, SmartRetryResp(tx=msg.tx, server=self.node_id, ok=ok))
        elif isinstance(msg, RecoverQuery):
            self.send(src, self.recover_query(msg.tx))
        elif isinstance(msg, RecoverReply):
            self._recovery_on_reply(msg)
        elif isinstance(msg, SmartRetryResp):
            self._recovery_on_retry_reply(msg)
        else:
            raise TypeError(f"server cannot handle {type(msg).__name__}")

    # -- store helpers ----------------------------------------------------------

    def _versions(self, key: int) -> List[Version]:
        vers = self.store.get(key)
        if vers is None:
            vers = [Version(key, b"", TS_ZERO, TS_ZERO, COMMITTED, None, "init", (0, 0))]
            self.store[key] = vers
        return vers

    def _log(self, kind, **extra):
        if self.config.detail_trace:
            self.sim.record(kind, node=self.node_id, **extra)

    # -- execution -----------------------------------------------------------------

    def handle_execute(self, src: int, msg: ExecuteReq) -> None:
        req = msg.req
        t = msg.t
        if msg.backup == self.node_id and msg.cohorts:
            self._register_recovery(req.tx, msg.cohorts)
        info = self.txs.get(req.tx)
        if info is not None and req.req_id in info.executed:
            return  # duplicate delivery
        if req.tx in self.decisions:
            return  # decision raced ahead of a (reordered) request

        if req.is_read_only:
            if req.req_id in self.ro_seen:
                return  # duplicate delivery
            self.ro_seen.add(req.req_id)
            self._execute_read_only(req, t, msg.t_ro, src)
            self.watermark = max(self.watermark, t)
            return

        # early abort: not the highest timestamp seen and the response could
        # not be sent immediately (some undecided queue entry blocks it)
        if (
            self.config.rtc_enabled
            and t < self.watermark
            and self._would_delay(req.key, req.kind, req.tx)
        ):
            self.watermark = max(self.watermark, t)
            self.early_aborts += 1
            self._log("early_abort", tx=req.tx.encode(), key=req.key)
            self.send(src, EarlyAbortResp(tx=req.tx, idx=req.idx, key=req.key))
            return
        self.watermark = max(self.watermark, t)
        self._execute_request(req, t, src)
        self._pump(req.key)

    def _would_delay(self, key: int, kind: str, tx: TxId) -> bool:
        """Whether a response on key would be held back by the release rule."""
        q = self.resp_qs.get(key)
        if not q:
            return False
        for item in q:
            if item.q_status != UNDECIDED or item.request.tx == tx:
                continue
            if item.request.kind == WRITE:
                return True
            if kind == WRITE and not item.ro:
                return True
        return False

    def _execute_request(self, req: Request, t: Timestamp, dst: int) -> None:
        """Alg. 2 non-blocking execute; enqueues the response, does not pump."""
        info = self.txs.get(req.tx)
        if info is None:
            info = self.txs[req.tx] = TxInfo()
        vers = self._versions(req.key)
        curr = vers[-1]
        t_s = self.now()
        if req.kind == WRITE:
            t_w = t.bumped_above(curr.write_floor(req.tx))
            self._vid_seq += 1
            vid = f"{req.key}:{req.tx.encode()}:{req.idx}"
            ver = Version(
                req.key, req.value, t_w, t_w, UNDECIDED, req.tx, vid, (self._vid_seq, 0)
            )
            ver.undecided_accessors.add(req.tx)
            vers.append(ver)
            info.created.append(ver)
            pair = TimestampPair(t_w, t_w)
            resp = ExecuteResp(
                tx=req.tx, idx=req.idx, key=req.key, kind=WRITE, pair=pair, t_s=t_s
            )
            self.sim.record(
                "wr", node=self.node_id, tx=req.tx.encode(), key=req.key,
                ver=vid, order=[self._vid_seq, 0],
            )
            observed = None
        else:
            curr.refine_t_r(req.tx, t)
            if curr.status == UNDECIDED:
                curr.undecided_accessors.add(req.tx)
            info.read.append(curr)
            pair = TimestampPair(curr.t_w, curr.t_r)
            resp = ExecuteResp(
                tx=req.tx, idx=req.idx, key=req.key, kind=READ, pair=pair,
                t_s=t_s, value=curr.value,
            )
            observed = curr
        if req.req_id not in info.executed:
            info.executed.add(req.req_id)
            info.keys.append(req.key)
        info.pair_by_req[req.req_id] = pair
        self._log("exec", tx=req.tx.encode(), key=req.key, op=req.kind)
        item = QItem(resp, req, t, observed, dst, self.sim.step)
        self.resp_qs.setdefault(req.key, []).append(item)
        self._log("enq", tx=req.tx.encode(), key=req.key)
        if not self.config.rtc_enabled:
            self._send_item(item)

    def _execute_read_only(self, req: Request, t: Timestamp, t_ro, dst: int) -> None:
        vers = self._versions(req.key)
        curr = vers[-1]
        # staleness check: the client's t_ro bounds the writes it knows about
        # on this server; a version beyond that bound means the pre-assigned t
        # may be too small for the safeguard, so reject instead of executing
        if curr.t_w > (t_ro if t_ro is not None else TS_ZERO):
            self.ro_aborts += 1
            hint = None
            for v in reversed(vers):
                if v.status == COMMITTED:
                    hint = v.t_w
                    break
            self._log("ro_abort", tx=req.tx.encode(), key=req.key)
            self.send(dst, RoAbortResp(tx=req.tx, idx=req.idx, key=req.key, hint_t_ro=hint))
            return
        curr.refine_t_r(req.tx, t)
        pair = TimestampPair(curr.t_w, curr.t_r)
        resp = ExecuteResp(
            tx=req.tx, idx=req.idx, key=req.key, kind=READ, pair=pair,
            t_s=self.now(), value=curr.value,
        )
        if curr.status == COMMITTED:
            # dependencies trivially satisfied; bypass the queue entirely so
            # later writes never wait on a read-only transaction
            self.sim.record(
                "rd", node=self.node_id, tx=req.tx.encode(), key=req.key, ver=curr.vid
            )
            self.responses_sent += 1
            self.send(dst, resp)
            return
        item = QItem(resp, req, t, curr, dst, self.sim.step, ro=True)
        curr.ro_items.append(item)
        self.resp_qs.setdefault(req.key, []).append(item)

    # -- response timing control -------------------------------------------------

    def _send_item(self, item: QItem) -> None:
        if item.resp is None:
            return
        resp = item.resp
        item.resp = None
        if resp.kind == READ:
            # rebuild the pair from current version state: the version may
            # have been repositioned by a smart retry between enqueue and
            # release, and a stale pair could let a safeguard wrongly pass
            ver = item.observed
            if item.ts > ver.t_r:
                ver.t_r = item.ts
            resp.pair = TimestampPair(ver.t_w, ver.t_r)
            info = self.txs.get(resp.tx)
            if info is not None and item.request.req_id in info.pair_by_req:
                info.pair_by_req[item.request.req_id] = resp.pair
            self.sim.record(
                "rd", node=self.node_id, tx=resp.tx.encode(), key=resp.key,
                ver=ver.vid,
            )
        self.responses_sent += 1
        if self.sim.step != item.exec_step:
            self.responses_delayed += 1
            resp.delayed = True
        self._log("send", tx=resp.tx.encode(), key=resp.key)
        self.send(item.dst, resp)

    def _pump(self, key: int) -> None:
        """Release every response whose same-key dependencies are decided.

        A read response depends on every earlier undecided write (the version
        it read, plus version order); a write response additionally depends
        on earlier undecided reads of read-write transactions.  Dependencies
        within one transaction are vacuous: its responses release together.
        Reads that observed a since-removed (aborted) version are fixed
        locally by re-executing them against the current most recent version.
        """
        if not self.config.rtc_enabled:
            q = self.resp_qs.get(key)
            if q:
                self.resp_qs[key] = [it for it in q if it.q_status == UNDECIDED]
            return
        q = self.resp_qs.get(key)
        if not q:
            return
        changed = True
        while changed:
            changed = False
            write_txs = set()
            read_txs = set()
            i = 0
            while i < len(q):
                item = q[i]
                if item.q_status != UNDECIDED:
                    q.pop(i)
                    changed = True
                    continue
                if item.observed is not None and item.observed.removed:
                    q.pop(i)
                    if item.ro:
                        self._execute_read_only(item.request, item.ts, None, item.dst)
                    else:
                        self._execute_request(item.request, item.ts, item.dst)
                    changed = True
                    continue
                tx = item.request.tx
                if item.request.kind == READ:
                    if write_txs <= {tx}:
                        self._send_item(item)
                    if not item.ro:
                        # read-only snapshots never delay later writes
                        read_txs.add(tx)
                else:
                    if (write_txs | read_txs) <= {tx}:
                        self._send_item(item)
                    write_txs.add(tx)
                i += 1
        if not q:
            del self.resp_qs[key]

    # -- decisions ------------------------------------------------------------------

    def apply_decision(self, tx: TxId, decision: str) -> None:
        if tx in self.decisions:
            return  # duplicate or late message
        info = self.txs.get(tx)
        if info is None:
            self._log("warn_unknown_decision", tx=tx.encode())
            return
        self.decisions[tx] = decision
        info.decided = decision
        self._log("sdec", tx=tx.encode(), d=decision[0])
        now = self.now()
        for ver in info.created:
            if decision == COMMITTED:
                ver.status = COMMITTED
            else:
                ver.removed = True
                try:
                    self.store[ver.key].remove(ver)
                except ValueError:
                    pass
            ver.undecided_accessors.discard(tx)
            if not ver.undecided_accessors:
                ver.decided_at = now
            self._release_ro_items(ver, decision)
        for ver in info.read:
            ver.undecided_accessors.discard(tx)
            if not ver.undecided_accessors:
                ver.decided_at = now
        state = self._recovery.pop(tx, None)
        if state is not None and state.timer is not None:
            self.sim.cancel(state.timer)
        for key in dict.fromkeys(info.keys):
            q = self.resp_qs.get(key)
            if not q:
                continue
            for item in q:
                if item.request.tx == tx:
                    item.q_status = decision
            self._pump(key)

    def _release_ro_items(self, ver: Version, decision: str) -> None:
        items, ver.ro_items = ver.ro_items, []
        for item in items:
            q = self.resp_qs.get(item.request.key)
            if q is None or item not in q:
                continue
            q.remove(item)
            if decision == COMMITTED:
                self._send_item(item)
            else:
                self._execute_read_only(item.request, item.ts, None, item.dst)
            self._pump(item.request.key)

    # -- smart retry ---------------------------------------------------------------

    def try_smart_retry(self, tx: TxId, t_prime: Timestamp) -> bool:
        """Reposition tx's accesses at t_prime; all-or-nothing per server."""
        decided = self.decisions.get(tx)
        if decided is not None:
            return decided == COMMITTED  # idempotent under duplication
        info = self.txs.get(tx)
        if info is None:
            self.smart_retry_fail += 1
            return False
        for ver in info.created + info.read:
            if ver.removed:
                self.smart_retry_fail += 1
                return False  # garbage collected or aborted: not repositionable
            nxt = self._successor(ver)
            if nxt is not None and nxt.creator != tx and nxt.t_w <= t_prime:
                self.smart_retry_fail += 1
                return False
            if ver.creator == tx and ver.t_w != ver.t_r:
                self.smart_retry_fail += 1
                return False
        for ver in info.created:
            ver.t_w = t_prime
            ver.t_r = t_prime
            ver.t_r_owner = None
            ver.t_r_runner_up = t_prime
        for ver in info.read:
            ver.refine_t_r(tx, t_prime)
        self.smart_retry_ok += 1
        return True

    def _successor(self, ver: Version) -> Optional[Version]:
        vers = self.store.get(ver.key, ())
        for i, v in enumerate(vers):
            if v is ver:
                return vers[i + 1] if i + 1 < len(vers) else None
        return None

    # -- garbage collection ----------------------------------------------------------

    def garbage_collect(self) -> int:
        """Reclaim old committed versions no longer reachable by smart retry."""
        now = self.now()
        reclaimed = 0
        for key, vers in self.store.items():
            if len(vers) <= 1:
                continue
            # the newest committed version must survive: undecided successors
            # may yet abort, leaving it as the key's current state
            last_committed = None
            for v in reversed(vers):
                if v.status == COMMITTED:
                    last_committed = v
                    break
            keep = []
            for v in vers[:-1]:
                if (
                    v is not last_committed
                    and v.status == COMMITTED
                    and not v.undecided_accessors
                    and v.decided_at is not None
                    and now - v.decided_at >= self.config.gc_retention
                ):
                    v.removed = True
                    reclaimed += 1
                else:
                    keep.append(v)
            keep.append(vers[-1])
            if len(keep) != len(vers):
                self.store[key] = keep
        self.gc_reclaimed += reclaimed
        if reclaimed:
            self._log("gc", n=reclaimed)
        return reclaimed

    def _gc_tick(self):
        self.garbage_collect()
        self.set_timer(self.config.gc_interval, self._gc_tick, daemon=True)

    # -- client-failure recovery (backup coordinator + cohort sides) ----------------

    def _register_recovery(self, tx: TxId, cohorts) -> None:
        if self.config.recovery_timeout is None:
            return
        if tx in self._recovery or tx in self.decisions:
            return
        timer = self.set_timer(
            self.config.recovery_timeout, lambda: self._recovery_fire(tx)
        )
        self._recovery[tx] = _RecoveryState(tuple(cohorts), timer)

    def _recovery_fire(self, tx: TxId) -> None:
        state = self._recovery.get(tx)
        if state is None or tx in self.decisions:
            return
        state.phase = "query"
        self._log("recover_start", tx=tx.encode())
        for server, _count in state.cohorts:
            self.send(server, RecoverQuery(tx=tx))

    def recover_query(self, tx: TxId) -> RecoverReply:
        info = self.txs.get(tx)
        if info is None:
            return RecoverReply(tx=tx, server=self.node_id, executed=False)
        return RecoverReply(
            tx=tx,
            server=self.node_id,
            executed=True,
            n_requests=len(info.pairs),
            pairs=tuple(info.pairs),
            decided=info.decided,
        )

    def _recovery_on_reply(self, msg: RecoverReply) -> None:
        state = self._recovery.get(msg.tx)
        if state is None or state.phase != "query":
            return
        state.replies[msg.server] = msg
        if len(state.replies) < len(state.cohorts):
            return
        # reconstruct the client's decision from cohort execution records
        decided = [r.decided for r in state.replies.values() if r.decided]
        if decided:
            self._recovery_finish(msg.tx, decided[0])
            return
        pairs = []
        for server, expected in state.cohorts:
            reply = state.replies[server]
            if not reply.executed or reply.n_requests < expected:
                self._recovery_finish(msg.tx, ABORTED)
                return
            pairs.extend(reply.pairs)
        t_w_max = max(p.t_w for p in pairs)
        t_r_min = min(p.t_r for p in pairs)
        if t_w_max <= t_r_min:
            self._recovery_finish(msg.tx, COMMITTED)
            return
        state.phase = "retry"
        state.t_prime = t_w_max
        for server, _count in state.cohorts:
            self.send(server, SmartRetryReq(tx=msg.tx, t_prime=t_w_max))

    def _recovery_on_retry_reply(self, msg: SmartRetryResp) -> None:
        state = self._recovery.get(msg.tx)
        if state is None or state.phase != "retry":
            return
        state.retry_replies[msg.server] = msg.ok
        if len(state.retry_replies) < len(state.cohorts):
            return
        ok = all(state.retry_replies.values())
        self._recovery_finish(msg.tx, COMMITTED if ok else ABORTED)

    def _recovery_finish(self, tx: TxId, decision: str) -> None:
        state = self._recovery.pop(tx, None)
        if state is None:
            return
        self._log("recover_done", tx=tx.encode(), d=decision[0])
        self.sim.record("rdec", node=self.node_id, tx=tx.encode(), d=decision[0])
        for server, _count in state.cohorts:
            if server == self.node_id:
                self.apply_decision(tx, decision)
            else:
                self.send(server, CommitAbort(tx=tx, decision=decision))

    # -- invariants (test support) ----------------------------------------------------

    def assert_invariants(self) -> None:
        for key, vers in self.store.items():
            for a, b in zip(vers, vers[1:]):
                assert a.t_w < b.t_w, f"t_w not strictly increasing on key {key}"
            for v in vers:
                assert v.t_w <= v.t_r, f"t_w > t_r on key {key}"
