"""Post-hoc strict-serializability checking over event traces.

Builds a real-time serialization graph (RSG) over committed transactions:
execution edges (wr / rw / ww) derived from per-key version order, plus
real-time edges (tx1 committed before tx2 issued its first request).  A
history is strictly serializable iff the execution-edge subgraph is acyclic
(total order) and no execution path inverts a real-time edge.

A brute-force oracle enumerates serial orders for tiny histories and must
agree with the graph-based verdict.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

INIT_VERSION = "init"


class MalformedTrace(Exception):
    pass


@dataclass
class History:
    """Checker view of one run: per-transaction events keyed by tx id string."""

    issue_time: Dict[str, int] = field(default_factory=dict)
    commit_time: Dict[str, int] = field(default_factory=dict)  # committed only
    aborted: set = field(default_factory=set)
    # (tx, key, version_id) per read actually returned to the client
    reads: List[Tuple[str, int, str]] = field(default_factory=list)
    # (tx, key, version_id, order) per version created
    writes: List[Tuple[str, int, str, tuple]] = field(default_factory=list)

    @property
    def committed(self):
        return self.commit_time


def history_from_trace(trace) -> History:
    """Extract checker events from a trace record stream.

    Consumes only the history-event schema: ``issue``, ``rd``, ``wr`` and
    ``dec`` records; everything else (transport records, engine internals)
    is ignored, keeping the checker protocol-agnostic.
    """
    h = History()
    for rec in trace:
        k = rec["k"]
        if k == "issue":
            h.issue_time.setdefault(rec["tx"], rec["t"])
        elif k == "rd":
            h.reads.append((rec["tx"], rec["key"], rec["ver"]))
        elif k == "wr":
            h.writes.append((rec["tx"], rec["key"], rec["ver"], tuple(rec["order"])))
        elif k in ("dec", "rdec"):
            # "rdec" is a recovery coordinator's decision for a crashed
            # client; the earliest decision instant is the commit point
            if rec["d"] == "c":
                prev = h.commit_time.get(rec["tx"])
                if prev is None or rec["t"] < prev:
                    h.commit_time[rec["tx"]] = rec["t"]
            else:
                h.aborted.add(rec["tx"])
    return h


@dataclass
class Rsg:
    vertices: List[str]
    # adjacency over execution edges only, tagged for witnesses
    exe_edges: Dict[str, List[Tuple[str, str]]]  # tx -> [(tx2, tag)]
    issue_time: Dict[str, int]
    commit_time: Dict[str, int]


def build_rsg(history: History) -> Rsg:
    committed = history.commit_time
    for tx in committed:
        if tx not in history.issue_time:
            raise MalformedTrace(f"committed tx {tx} has no issue event")
        if tx in history.aborted:
            raise MalformedTrace(f"tx {tx} both committed and aborted")

    # per-key committed version order
    versions: Dict[int, List[Tuple[tuple, str, str]]] = {}
    creator: Dict[str, str] = {}
    for tx, key, ver, order in history.writes:
        if tx not in committed:
            continue
        versions.setdefault(key, []).append((order, ver, tx))
        creator[ver] = tx
    for key, lst in versions.items():
        lst.sort(key=lambda item: item[0])

    edges: Dict[str, List[Tuple[str, str]]] = {tx: [] for tx in committed}

    def add_edge(a, b, tag):
        if a != b:
            edges[a].append((b, tag))

    # ww edges between creators of adjacent versions; the initial version
    # has no creator so the first committed version has no ww predecessor
    successor: Dict[str, Optional[str]] = {}
    for key, lst in versions.items():
        prev_ver = INIT_VERSION
        prev_tx = None
        for order, ver, tx in lst:
            successor[prev_ver] = tx
            if prev_tx is not None:
                add_edge(prev_tx, tx, "ww")
            prev_ver, prev_tx = ver, tx
        successor[prev_ver] = None
    successor.setdefault(INIT_VERSION, None)

    # wr and rw edges from reads
    per_key_successor: Dict[Tuple[int, str], Optional[str]] = {}
    for key, lst in versions.items():
        prev = INIT_VERSION
        for order, ver, tx in lst:
            per_key_successor[(key, prev)] = tx
            prev = ver
        per_key_successor[(key, prev)] = None

    for tx, key, ver in history.reads:
        if tx not in committed:
            continue
        if ver != INIT_VERSION:
            if ver not in creator:
                raise MalformedTrace(
                    f"read of unknown or uncommitted version {ver} by {tx}"
                )
            add_edge(creator[ver], tx, "wr")
        nxt = per_key_successor.get((key, ver))
        if nxt is None and (key, ver) not in per_key_successor:
            # key never written by a committed tx; only init readable
            if ver != INIT_VERSION:
                raise MalformedTrace(f"read of unknown version {ver} by {tx}")
            nxt = None
        if nxt is not None:
            add_edge(tx, nxt, "rw")

    return Rsg(
        vertices=sorted(committed),
        exe_edges=edges,
        issue_time={tx: history.issue_time[tx] for tx in committed},
        commit_time=dict(committed),
    )


def check_total_order(rsg: Rsg):
    """Invariant 1: execution-edge subgraph is acyclic.

    Returns (True, None) or (False, cycle) where cycle is a vertex list.
    """
    WHITE, GREY, BLACK = 0, 1, 2
    color = {v: WHITE for v in rsg.vertices}
    stack_path = []

    for root in rsg.vertices:
        if color[root] != WHITE:
            continue
        # iterative DFS with explicit path for witness extraction
        stack = [(root, iter(rsg.exe_edges[root]))]
        color[root] = GREY
        stack_path.append(root)
        while stack:
            node, it = stack[-1]
            advanced = False
            for succ, _tag in it:
                if color[succ] == GREY:
                    i = stack_path.index(succ)
                    return False, stack_path[i:] + [succ]
                if color[succ] == WHITE:
                    color[succ] = GREY
                    stack_path.append(succ)
                    stack.append((succ, iter(rsg.exe_edges[succ])))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack_path.pop()
                stack.pop()
    return True, None


def _topo_order(rsg: Rsg):
    indeg = {v: 0 for v in rsg.vertices}
    for v in rsg.vertices:
        for succ, _ in rsg.exe_edges[v]:
            indeg[succ] += 1
    frontier = [v for v in rsg.vertices if indeg[v] == 0]
    order = []
    while frontier:
        v = frontier.pop()
        order.append(v)
        for succ, _ in rsg.exe_edges[v]:
            indeg[succ] -= 1
            if indeg[succ] == 0:
                frontier.append(succ)
    if len(order) != len(rsg.vertices):
        return None  # cyclic; total-order check reports the witness
    return order


def check_real_time(rsg: Rsg):
    """Invariant 2: no execution path tx2 -> tx1 when tx1 really-precedes tx2.

    Equivalent formulation used here: a violation exists iff some execution
    path u ~> v has commit(v) < issue(u), i.e. v committed before u was
    issued yet u transitively affects v.  Computed in one pass over a
    topological order by propagating the maximum ancestor issue time.

    Returns (True, None) or (False, (tx1, tx2)) where tx1 really-precedes
    tx2 but tx2 reaches tx1 over execution edges.
    """
    order = _topo_order(rsg)
    if order is None:
        return True, None  # cyclic graphs are reported by Invariant 1

    # max issue time over strict execution ancestors, with a backpointer to
    # the ancestor achieving it for witness reconstruction
    max_issue = {v: None for v in rsg.vertices}
    anc = {v: None for v in rsg.vertices}
    for v in order:
        cand = max_issue[v]
        for succ, _ in rsg.exe_edges[v]:
            best = rsg.issue_time[v]
            who = v
            if cand is not None and cand > best:
                best = cand
                who = anc[v]
            if max_issue[succ] is None or best > max_issue[succ]:
                max_issue[succ] = best
                anc[succ] = who

    for v in rsg.vertices:
        if max_issue[v] is not None and rsg.commit_time[v] < max_issue[v]:
            return False, (v, anc[v])  # v really-precedes anc[v], yet anc[v] ~> v
    return True, None


def check_history(history: History):
    """Full check; returns (ok, kind, witness)."""
    rsg = build_rsg(history)
    ok, cycle = check_total_order(rsg)
    if not ok:
        return False, "cycle", cycle
    ok, inv = check_real_time(rsg)
    if not ok:
        return False, "inversion", inv
    return True, None, None


# ---------------------------------------------------------------------------
# Brute-force oracle: enumerate serial orders for tiny histories.
# ---------------------------------------------------------------------------


def brute_force_oracle(history: History, max_tx: int = 8) -> bool:
    """True iff some permutation of the committed transactions that respects
    the real-time order and the observed per-key version order replays to
    exactly the observed reads.

    Independent of the RSG path: plain backtracking over linear extensions.
    """
    txs = sorted(history.commit_time)
    if len(txs) > max_tx:
        raise ValueError(f"oracle limited to {max_tx} transactions")

    committed = set(txs)
    writes_of: Dict[str, List[Tuple[int, str]]] = {tx: [] for tx in txs}
    version_pos: Dict[int, List[str]] = {}
    ver_creator: Dict[str, str] = {}
    per_key = {}
    for tx, key, ver, order in history.writes:
        if tx in committed:
            per_key.setdefault(key, []).append((order, ver, tx))
    for key, lst in per_key.items():
        lst.sort(key=lambda item: item[0])
        version_pos[key] = [ver for _, ver, _ in lst]
        for _, ver, tx in lst:
            writes_of[tx].append((key, ver))
            ver_creator[ver] = tx

    reads_of: Dict[str, List[Tuple[int, str]]] = {tx: [] for tx in txs}
    for tx, key, ver in history.reads:
        if tx in committed:
            if ver != INIT_VERSION and ver not in ver_creator:
                return False  # read of an uncommitted version can never replay
            reads_of[tx].append((key, ver))

    issue = history.issue_time
    commit = history.commit_time

    n = len(txs)
    placed = [None] * n
    used = set()

    def feasible(tx, position_state):
        latest, write_idx = position_state
        # real-time order: everything committed before tx's issue must be placed
        for other in txs:
            if other in used or other == tx:
                continue
            if commit[other] < issue[tx]:
                return False
        # reads must observe the current latest version per key
        for key, ver in reads_of[tx]:
            if latest.get(key, INIT_VERSION) != ver:
                return False
        # writes must extend the observed version order
        for key, ver in writes_of[tx]:
            idx = write_idx.get(key, 0)
            order = version_pos.get(key, [])
            if idx >= len(order) or order[idx] != ver:
                return False
        return True

    def backtrack(depth, latest, write_idx):
        if depth == n:
            return True
        for tx in txs:
            if tx in used:
                continue
            if not feasible(tx, (latest, write_idx)):
                continue
            used.add(tx)
            new_latest = latest
            new_idx = write_idx
            if writes_of[tx]:
                new_latest = dict(latest)
                new_idx = dict(write_idx)
                for key, ver in writes_of[tx]:
                    new_latest[key] = ver
                    new_idx[key] = new_idx.get(key, 0) + 1
            if backtrack(depth + 1, new_latest, new_idx):
                used.discard(tx)
                return True
            used.discard(tx)
        return False

    return backtrack(0, {}, {})


def check_trace(trace, oracle: bool = False):
    """Convenience entry point used by the CLI.

    Returns (exit_code, detail): 0 ok, 2 violation, 3 malformed.
    """
    try:
        history = history_from_trace(trace)
        ok, kind, witness = check_history(history)
    except MalformedTrace as exc:
        return 3, str(exc)
    if not ok:
        return 2, {"kind": kind, "witness": witness}
    if oracle and len(history.commit_time) <= 8:
        if not brute_force_oracle(history):
            return 2, {"kind": "oracle-disagrees", "witness": None}
    return 0, None
