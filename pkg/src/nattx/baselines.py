"""Baseline concurrency-control protocols over the same simulated network.

Four protocols share the transaction-logic interface and trace schema of the
main engine so every run can be fed to the same checker and metrics code:

- distributed OCC: execute, validate-and-lock, then asynchronous commit
  (three message rounds per transaction).
- distributed 2PL, no-wait: combined execute-and-lock round, asynchronous
  commit (two rounds); lock conflicts abort immediately.
- distributed 2PL, wound-wait: execute-and-lock with waiting, an explicit
  prepare round, then asynchronous commit (three rounds); older transactions
  wound younger lock holders, so waits-for chains cannot cycle.
- MVTO: multi-version timestamp ordering with client-clock timestamps;
  reads of undecided versions wait for the decision, read-only transactions
  never abort and never send commit messages.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional

from .core import (
    ABORTED,
    COMMITTED,
    READ,
    UNDECIDED,
    WRITE,
    Timestamp,
    TS_ZERO,
    TxId,
    message,
)
from .simnet import Node

OUT_COMMITTED = "committed"
OUT_ABORTED = "aborted"


# ---------------------------------------------------------------------------
# Wire messages.
# ---------------------------------------------------------------------------


@message
class BReadReq:
    tx: TxId
    idx: int
    key: int


@message
class BReadResp:
    tx: TxId
    idx: int
    key: int
    value: bytes
    vid: str


@message
class BWriteBuf:
    tx: TxId
    idx: int
    key: int
    value: bytes


@message
class BAck:
    tx: TxId
    idx: int


@message
class BPrepare:
    tx: TxId
    reads: tuple  # ((key, vid), ...)
    writes: tuple  # (key, ...)


@message
class BPrepareResp:
    tx: TxId
    server: int
    ok: bool


@message
class BDecision:
    tx: TxId
    decision: str


@message
class LockExec:
    tx: TxId
    idx: int
    key: int
    mode: str  # READ or WRITE
    ts: Timestamp  # wound-wait priority; ignored by no-wait
    value: Optional[bytes] = None


@message
class LockResp:
    tx: TxId
    idx: int
    key: int
    ok: bool
    value: Optional[bytes] = None
    vid: Optional[str] = None


@message
class Wound:
    tx: TxId


@message
class MReq:
    tx: TxId
    idx: int
    key: int
    kind: str
    ts: Timestamp
    value: Optional[bytes] = None


@message
class MResp:
    tx: TxId
    idx: int
    key: int
    ok: bool
    value: Optional[bytes] = None
    vid: Optional[str] = None


# ---------------------------------------------------------------------------
# Single-version committed store shared by the lock-based and OCC servers.
# ---------------------------------------------------------------------------


class _Cell:
    __slots__ = ("value", "vid", "seq")

    def __init__(self):
        self.value = b""
        self.vid = "init"
        self.seq = 0


class _StoreServer(Node):
    def __init__(self, node_id: int):
        super().__init__(node_id)
        self.cells: Dict[int, _Cell] = {}
        self.decisions: Dict[TxId, str] = {}

    def _cell(self, key: int) -> _Cell:
        cell = self.cells.get(key)
        if cell is None:
            cell = self.cells[key] = _Cell()
        return cell

    def _install(self, tx: TxId, key: int, value: bytes) -> None:
        cell = self._cell(key)
        cell.seq += 1
        cell.vid = f"{key}:{tx.encode()}:i"
        cell.value = value
        self.sim.record(
            "wr", node=self.node_id, tx=tx.encode(), key=key,
            ver=cell.vid, order=[cell.seq, 0],
        )

    def _record_read(self, tx: TxId, key: int, vid: str) -> None:
        self.sim.record("rd", node=self.node_id, tx=tx.encode(), key=key, ver=vid)


# ---------------------------------------------------------------------------
# Distributed OCC.
# ---------------------------------------------------------------------------


class OccServer(_StoreServer):
    def __init__(self, node_id: int):
        super().__init__(node_id)
        self.write_locks: Dict[int, TxId] = {}
        self.buffered: Dict[TxId, Dict[int, bytes]] = {}
        self.prepared: Dict[TxId, tuple] = {}  # tx -> (locked keys,)
        self.seen = set()

    def on_message(self, src: int, msg) -> None:
        if isinstance(msg, BReadReq):
            if (msg.tx, msg.idx) in self.seen:
                return
            self.seen.add((msg.tx, msg.idx))
            cell = self._cell(msg.key)
            self._record_read(msg.tx, msg.key, cell.vid)
            self.send(src, BReadResp(tx=msg.tx, idx=msg.idx, key=msg.key,
                                     value=cell.value, vid=cell.vid))
        elif isinstance(msg, BWriteBuf):
            if (msg.tx, msg.idx) in self.seen:
                return
            self.seen.add((msg.tx, msg.idx))
            self.buffered.setdefault(msg.tx, {})[msg.key] = msg.value
            self.send(src, BAck(tx=msg.tx, idx=msg.idx))
        elif isinstance(msg, BPrepare):
            self.send(src, BPrepareResp(tx=msg.tx, server=self.node_id,
                                        ok=self._validate(msg)))
        elif isinstance(msg, BDecision):
            self._decide(msg.tx, msg.decision)
        else:
            raise TypeError(f"OCC server cannot handle {type(msg).__name__}")

    def _validate(self, msg: BPrepare) -> bool:
        if msg.tx in self.prepared:
            return True  # duplicate prepare
        # reads valid iff unchanged and not about to be overwritten
        for key, vid in msg.reads:
            holder = self.write_locks.get(key)
            if holder is not None and holder != msg.tx:
                return False
            if self._cell(key).vid != vid:
                return False
        for key in msg.writes:
            holder = self.write_locks.get(key)
            if holder is not None and holder != msg.tx:
                return False
        for key in msg.writes:
            self.write_locks[key] = msg.tx
        self.prepared[msg.tx] = tuple(msg.writes)
        return True

    def _decide(self, tx: TxId, decision: str) -> None:
        if tx in self.decisions:
            return
        self.decisions[tx] = decision
        buffered = self.buffered.pop(tx, {})
        locked = self.prepared.pop(tx, ())
        if decision == COMMITTED:
            for key in sorted(buffered):
                self._install(tx, key, buffered[key])
        for key in locked:
            if self.write_locks.get(key) == tx:
                del self.write_locks[key]


# ---------------------------------------------------------------------------
# Distributed 2PL (no-wait and wound-wait variants).
# ---------------------------------------------------------------------------


class _LockState:
    __slots__ = ("holders", "waiters")

    def __init__(self):
        self.holders: Dict[TxId, str] = {}  # tx -> mode
        self.waiters: List[LockExecEntry] = []


class LockExecEntry:
    __slots__ = ("msg", "src")

    def __init__(self, msg: LockExec, src: int):
        self.msg = msg
        self.src = src


class LockServer(_StoreServer):
    def __init__(self, node_id: int, no_wait: bool):
        super().__init__(node_id)
        self.no_wait = no_wait
        self.locks: Dict[int, _LockState] = {}
        self.buffered: Dict[TxId, Dict[int, bytes]] = {}
        self.held_keys: Dict[TxId, set] = {}
        self.client_of: Dict[TxId, int] = {}  # wound notifications go here
        self.wounded = set()
        self.seen = set()

    def on_message(self, src: int, msg) -> None:
        if isinstance(msg, LockExec):
            if (msg.tx, msg.idx) in self.seen:
                return
            self.seen.add((msg.tx, msg.idx))
            if msg.tx in self.decisions:
                return  # decision raced ahead
            self.client_of[msg.tx] = src
            self._acquire(LockExecEntry(msg, src))
        elif isinstance(msg, BPrepare):
            self.send(src, BPrepareResp(tx=msg.tx, server=self.node_id, ok=True))
        elif isinstance(msg, BDecision):
            self._decide(msg.tx, msg.decision)
        else:
            raise TypeError(f"lock server cannot handle {type(msg).__name__}")

    def _conflicts(self, state: _LockState, tx: TxId, mode: str) -> List[TxId]:
        out = []
        for holder, held_mode in state.holders.items():
            if holder == tx:
                continue
            if mode == WRITE or held_mode == WRITE:
                out.append(holder)
        return out

    def _acquire(self, entry: LockExecEntry) -> None:
        msg = entry.msg
        state = self.locks.setdefault(msg.key, _LockState())
        conflicts = self._conflicts(state, msg.tx, msg.mode)
        if not conflicts and not self._blocked_by_waiter(state, msg):
            self._grant(entry, state)
            return
        if self.no_wait:
            self.send(entry.src, LockResp(tx=msg.tx, idx=msg.idx, key=msg.key, ok=False))
            return
        # wound-wait: an older requester wounds every younger conflicting
        # holder, then waits for the lock like everyone else
        for holder in conflicts:
            if msg.ts < holder.start_timestamp and holder not in self.wounded:
                self.wounded.add(holder)
                self.send(self.client_of[holder], Wound(tx=holder))
        state.waiters.append(entry)
        state.waiters.sort(key=lambda e: e.msg.ts)

    def _blocked_by_waiter(self, state: _LockState, msg: LockExec) -> bool:
        # no-wait has no waiters; wound-wait must not let a young request
        # jump over an older queued one it conflicts with
        for entry in state.waiters:
            other = entry.msg
            if other.tx == msg.tx:
                continue
            if (msg.mode == WRITE or other.mode == WRITE) and other.ts < msg.ts:
                return True
        return False

    def _grant(self, entry: LockExecEntry, state: _LockState) -> None:
        msg = entry.msg
        existing = state.holders.get(msg.tx)
        if existing is None or (existing == READ and msg.mode == WRITE):
            state.holders[msg.tx] = msg.mode
        self.held_keys.setdefault(msg.tx, set()).add(msg.key)
        cell = self._cell(msg.key)
        if msg.mode == WRITE:
            self.buffered.setdefault(msg.tx, {})[msg.key] = msg.value
            resp = LockResp(tx=msg.tx, idx=msg.idx, key=msg.key, ok=True)
        else:
            self._record_read(msg.tx, msg.key, cell.vid)
            resp = LockResp(tx=msg.tx, idx=msg.idx, key=msg.key, ok=True,
                            value=cell.value, vid=cell.vid)
        self.send(entry.src, resp)

    def _decide(self, tx: TxId, decision: str) -> None:
        if tx in self.decisions:
            return
        self.decisions[tx] = decision
        self.wounded.discard(tx)
        buffered = self.buffered.pop(tx, {})
        if decision == COMMITTED:
            for key in sorted(buffered):
                self._install(tx, key, buffered[key])
        keys = self.held_keys.pop(tx, set())
        for key, state in self.locks.items():
            state.waiters = [e for e in state.waiters if e.msg.tx != tx]
        for key in sorted(keys):
            state = self.locks[key]
            state.holders.pop(tx, None)
            self._grant_waiters(key, state)

    def _grant_waiters(self, key: int, state: _LockState) -> None:
        progressed = True
        while progressed:
            progressed = False
            for i, entry in enumerate(state.waiters):
                if not self._conflicts(state, entry.msg.tx, entry.msg.mode):
                    state.waiters.pop(i)
                    self._grant(entry, state)
                    progressed = True
                    break


# ---------------------------------------------------------------------------
# MVTO.
# ---------------------------------------------------------------------------


class _MVersion:
    __slots__ = ("key", "t_w", "value", "status", "rts", "vid", "creator", "waiters")

    def __init__(self, key, t_w, value, status, vid, creator):
        self.key = key
        self.t_w = t_w
        self.value = value
        self.status = status
        self.rts = t_w
        self.vid = vid
        self.creator = creator
        self.waiters = []  # deferred reads: (tx, idx, ts, dst)


class MvtoServer(Node):
    def __init__(self, node_id: int):
        super().__init__(node_id)
        self.store: Dict[int, List[_MVersion]] = {}
        self.tx_versions: Dict[TxId, List[_MVersion]] = {}
        self.decisions: Dict[TxId, str] = {}
        self.seen = set()

    def _versions(self, key: int) -> List[_MVersion]:
        vers = self.store.get(key)
        if vers is None:
            vers = [_MVersion(key, TS_ZERO, b"", COMMITTED, "init", None)]
            self.store[key] = vers
        return vers

    def on_message(self, src: int, msg) -> None:
        if isinstance(msg, MReq):
            if (msg.tx, msg.idx) in self.seen:
                return
            self.seen.add((msg.tx, msg.idx))
            if msg.tx in self.decisions:
                return
            if msg.kind == READ:
                self._read(msg, src)
            else:
                self._write(msg, src)
        elif isinstance(msg, BDecision):
            self._decide(msg.tx, msg.decision)
        else:
            raise TypeError(f"MVTO server cannot handle {type(msg).__name__}")

    def _read(self, msg: MReq, dst: int) -> None:
        vers = self._versions(msg.key)
        ver = None
        for v in reversed(vers):
            if v.t_w <= msg.ts:
                ver = v
                break
        if msg.ts > ver.rts:
            ver.rts = msg.ts
        if ver.status == UNDECIDED:
            # avoid dirty reads: hold the response until the writer decides
            ver.waiters.append((msg.tx, msg.idx, msg.ts, dst))
            return
        self._send_read(msg.tx, msg.idx, msg.key, ver, dst)

    def _send_read(self, tx, idx, key, ver: _MVersion, dst: int) -> None:
        self.sim.record("rd", node=self.node_id, tx=tx.encode(), key=key, ver=ver.vid)
        self.send(dst, MResp(tx=tx, idx=idx, key=key, ok=True,
                             value=ver.value, vid=ver.vid))

    def _write(self, msg: MReq, dst: int) -> None:
        vers = self._versions(msg.key)
        i = len(vers)
        while i > 0 and vers[i - 1].t_w > msg.ts:
            i -= 1
        pred = vers[i - 1] if i > 0 else None
        if (pred is not None and pred.rts > msg.ts) or (
            pred is not None and pred.t_w == msg.ts
        ):
            # a reader at a later timestamp already observed the predecessor
            self.send(dst, MResp(tx=msg.tx, idx=msg.idx, key=msg.key, ok=False))
            return
        vid = f"{msg.key}:{msg.tx.encode()}:{msg.idx}"
        ver = _MVersion(msg.key, msg.ts, msg.value, UNDECIDED, vid, msg.tx)
        vers.insert(i, ver)
        self.tx_versions.setdefault(msg.tx, []).append(ver)
        self.sim.record(
            "wr", node=self.node_id, tx=msg.tx.encode(), key=msg.key,
            ver=vid, order=[msg.ts.physical, msg.ts.client_id],
        )
        self.send(dst, MResp(tx=msg.tx, idx=msg.idx, key=msg.key, ok=True, vid=vid))

    def _decide(self, tx: TxId, decision: str) -> None:
        if tx in self.decisions:
            return
        self.decisions[tx] = decision
        for ver in self.tx_versions.pop(tx, []):
            waiters, ver.waiters = ver.waiters, []
            if decision == COMMITTED:
                ver.status = COMMITTED
                for wtx, idx, ts, dst in waiters:
                    self._send_read(wtx, idx, ver.key, ver, dst)
            else:
                self.store[ver.key].remove(ver)
                for wtx, idx, ts, dst in waiters:
                    # re-execute the deferred read against the surviving chain
                    self._read(MReq(tx=wtx, idx=idx, key=ver.key, kind=READ, ts=ts), dst)


# ---------------------------------------------------------------------------
# Clients.
# ---------------------------------------------------------------------------


class _BTx:
    __slots__ = (
        "txid", "logic", "gen", "shot_index", "n_shots", "requests", "pending",
        "values", "reads", "writes", "participants", "rounds", "callback",
        "done", "outcome", "is_ro", "prep_pending", "prep_ok", "failed",
    )

    def __init__(self, txid, logic, callback, is_ro):
        self.txid = txid
        self.logic = logic
        self.gen = None
        self.shot_index = -1
        self.n_shots = logic.n_shots
        self.requests = []
        self.pending = set()
        self.values = {}
        self.reads = []  # (server, key, vid)
        self.writes = []  # (server, key, value)
        self.participants = {}
        self.rounds = 0
        self.callback = callback
        self.done = False
        self.outcome = None
        self.is_ro = is_ro
        self.prep_pending = None
        self.prep_ok = True
        self.failed = False


class _BaseClient(Node):
    """Shot-driving scaffolding shared by all baseline clients."""

    def __init__(self, node_id: int, client_id: int, server_for_key: Callable[[int], int]):
        super().__init__(node_id)
        self.client_id = client_id
        self.server_for_key = server_for_key
        self.txs: Dict[TxId, _BTx] = {}
        self._last_physical = -1
        self.stats = {"committed": 0, "aborted": 0}

    def _fresh_txid(self) -> TxId:
        physical = self.now()
        if physical <= self._last_physical:
            physical = self._last_physical + 1
        self._last_physical = physical
        return TxId(Timestamp(physical, self.client_id))

    def submit(self, logic, callback: Callable) -> TxId:
        txid = self._fresh_txid()
        is_ro = bool(getattr(logic, "read_only", False))
        tx = _BTx(txid, logic, callback, is_ro)
        self.txs[txid] = tx
        tx.gen = logic.shots()
        self.sim.record("issue", node=self.node_id, tx=txid.encode())
        self._issue_shot(tx, next(tx.gen))
        return txid

    def _issue_shot(self, tx: _BTx, ops) -> None:
        tx.shot_index += 1
        tx.rounds += 1
        tx.values = {}
        for op in ops:
            kind, key = op[0], op[1]
            idx = len(tx.requests)
            tx.requests.append((kind, key))
            server = self.server_for_key(key)
            tx.participants[server] = tx.participants.get(server, 0) + 1
            tx.pending.add(idx)
            value = op[2] if kind == WRITE else None
            self._send_op(tx, idx, key, kind, value, server)

    def _send_op(self, tx, idx, key, kind, value, server):
        raise NotImplementedError

    def _op_done(self, tx: _BTx, idx: int, key: int, value) -> None:
        if tx.done or idx not in tx.pending:
            return
        tx.pending.discard(idx)
        if tx.requests[idx][0] == READ:
            tx.values[key] = value
        if tx.pending:
            return
        if tx.shot_index == tx.n_shots - 1:
            self._shots_complete(tx)
        else:
            try:
                ops = tx.gen.send(dict(tx.values))
            except StopIteration:
                self._shots_complete(tx)
                return
            self._issue_shot(tx, ops)

    def _shots_complete(self, tx: _BTx) -> None:
        raise NotImplementedError

    def _finalize(self, tx: _BTx, decision: str, send_decision: bool = True) -> None:
        tx.done = True
        tx.outcome = OUT_COMMITTED if decision == COMMITTED else OUT_ABORTED
        self.stats["committed" if decision == COMMITTED else "aborted"] += 1
        if send_decision:
            tx.rounds += 1
        self.sim.record(
            "dec", node=self.node_id, tx=tx.txid.encode(),
            d="c" if decision == COMMITTED else "a",
        )
        if send_decision:
            for server in tx.participants:
                self.send(server, BDecision(tx=tx.txid, decision=decision))
        self.sim.record(
            "txn", node=self.node_id, tx=tx.txid.encode(), outcome=tx.outcome,
            rounds=tx.rounds, ro=tx.is_ro, retried=False, delayed=False,
            shots=tx.n_shots,
        )
        del self.txs[tx.txid]
        results = dict(tx.values) if decision == COMMITTED else {}
        tx.callback(tx.txid, tx.outcome, results)


class DOccClient(_BaseClient):
    """Three rounds: execute, validate-and-lock, asynchronous decision."""

    def _send_op(self, tx, idx, key, kind, value, server):
        if kind == READ:
            self.send(server, BReadReq(tx=tx.txid, idx=idx, key=key))
        else:
            tx.writes.append((server, key, value))
            self.send(server, BWriteBuf(tx=tx.txid, idx=idx, key=key, value=value))

    def on_message(self, src: int, msg) -> None:
        if isinstance(msg, BReadResp):
            tx = self.txs.get(msg.tx)
            if tx is None:
                return
            tx.reads.append((src, msg.key, msg.vid))
            self._op_done(tx, msg.idx, msg.key, msg.value)
        elif isinstance(msg, BAck):
            tx = self.txs.get(msg.tx)
            if tx is None:
                return
            self._op_done(tx, msg.idx, None, None)
        elif isinstance(msg, BPrepareResp):
            self._on_prepare(msg)
        else:
            raise TypeError(f"OCC client cannot handle {type(msg).__name__}")

    def _shots_complete(self, tx: _BTx) -> None:
        tx.rounds += 1
        tx.prep_pending = set(tx.participants)
        for server in tx.participants:
            reads = tuple((k, v) for s, k, v in tx.reads if s == server)
            writes = tuple(k for s, k, _v in tx.writes if s == server)
            self.send(server, BPrepare(tx=tx.txid, reads=reads, writes=writes))

    def _on_prepare(self, msg: BPrepareResp) -> None:
        tx = self.txs.get(msg.tx)
        if tx is None or tx.done or tx.prep_pending is None:
            return
        tx.prep_pending.discard(msg.server)
        tx.prep_ok = tx.prep_ok and msg.ok
        if not tx.prep_pending:
            self._finalize(tx, COMMITTED if tx.prep_ok else ABORTED)


class D2plClient(_BaseClient):
    """Lock-based client; no-wait commits in 2 rounds, wound-wait in 3."""

    def __init__(self, node_id, client_id, server_for_key, no_wait: bool):
        super().__init__(node_id, client_id, server_for_key)
        self.no_wait = no_wait

    def _send_op(self, tx, idx, key, kind, value, server):
        self.send(server, LockExec(tx=tx.txid, idx=idx, key=key, mode=kind,
                                   ts=tx.txid.start_timestamp, value=value))

    def on_message(self, src: int, msg) -> None:
        if isinstance(msg, LockResp):
            tx = self.txs.get(msg.tx)
            if tx is None or tx.done:
                return
            if not msg.ok:
                self._finalize(tx, ABORTED)
                return
            self._op_done(tx, msg.idx, msg.key, msg.value)
        elif isinstance(msg, Wound):
            tx = self.txs.get(msg.tx)
            if tx is None or tx.done:
                return
            self._finalize(tx, ABORTED)
        elif isinstance(msg, BPrepareResp):
            tx = self.txs.get(msg.tx)
            if tx is None or tx.done or tx.prep_pending is None:
                return
            tx.prep_pending.discard(msg.server)
            if not tx.prep_pending:
                self._finalize(tx, COMMITTED)
        else:
            raise TypeError(f"2PL client cannot handle {type(msg).__name__}")

    def _shots_complete(self, tx: _BTx) -> None:
        if self.no_wait:
            self._finalize(tx, COMMITTED)
            return
        tx.rounds += 1
        tx.prep_pending = set(tx.participants)
        for server in tx.participants:
            self.send(server, BPrepare(tx=tx.txid, reads=(), writes=()))


class MvtoClient(_BaseClient):
    """Timestamp-ordered client; reads never abort, read-only is one round."""

    def _send_op(self, tx, idx, key, kind, value, server):
        self.send(server, MReq(tx=tx.txid, idx=idx, key=key, kind=kind,
                               ts=tx.txid.start_timestamp, value=value))

    def on_message(self, src: int, msg) -> None:
        if not isinstance(msg, MResp):
            raise TypeError(f"MVTO client cannot handle {type(msg).__name__}")
        tx = self.txs.get(msg.tx)
        if tx is None or tx.done:
            return
        if not msg.ok:
            tx.failed = True
            tx.pending.discard(msg.idx)
            if not tx.pending:
                self._finalize(tx, ABORTED)
            return
        if tx.failed:
            tx.pending.discard(msg.idx)
            if not tx.pending:
                self._finalize(tx, ABORTED)
            return
        self._op_done(tx, msg.idx, msg.key, msg.value)

    def _shots_complete(self, tx: _BTx) -> None:
        if tx.is_ro:
            # snapshot reads need no cleanup: commit without messages
            self._finalize(tx, COMMITTED, send_decision=False)
        else:
            self._finalize(tx, COMMITTED)
