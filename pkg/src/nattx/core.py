"""Shared domain types: timestamps, transaction ids, requests, and wire messages.

Timestamps are (physical, client_id) pairs with lexicographic total order.
Physical time is an integer tick count (one tick = one microsecond of
virtual time); using integers keeps comparisons exact and traces
platform-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional


class Timestamp:
    """Totally ordered (physical, client_id) timestamp.

    No two timestamps from distinct clients compare equal: ties on the
    physical component are broken by client id.
    """

    __slots__ = ("physical", "client_id")

    def __init__(self, physical: int, client_id: int):
        self.physical = physical
        self.client_id = client_id

    def __eq__(self, other):
        return (
            isinstance(other, Timestamp)
            and self.physical == other.physical
            and self.client_id == other.client_id
        )

    def __lt__(self, other):
        if self.physical != other.physical:
            return self.physical < other.physical
        return self.client_id < other.client_id

    def __le__(self, other):
        return self < other or self == other

    def __gt__(self, other):
        return not (self <= other)

    def __ge__(self, other):
        return not (self < other)

    def __hash__(self):
        return hash((self.physical, self.client_id))

    def plus(self, delta: int) -> "Timestamp":
        # arithmetic touches only the physical component, keeping the
        # client id so uniqueness semantics survive t+1 / t+delta
        return Timestamp(self.physical + delta, self.client_id)

    def bumped_above(self, floor: "Timestamp") -> "Timestamp":
        """Smallest timestamp with this client id that is >= self and > floor."""
        if self > floor:
            return self
        return Timestamp(floor.physical + 1, self.client_id)

    def encode(self) -> str:
        return f"{self.physical}.{self.client_id}"

    @staticmethod
    def decode(text: str) -> "Timestamp":
        phys, cid = text.split(".")
        return Timestamp(int(phys), int(cid))

    def __repr__(self):
        return f"Timestamp({self.physical}, {self.client_id})"


TS_ZERO = Timestamp(0, -1)


def ts_compare(a: Timestamp, b: Timestamp) -> int:
    """-1, 0, or +1 for a <, ==, > b under the lexicographic total order."""
    if a.physical != b.physical:
        return -1 if a.physical < b.physical else 1
    if a.client_id != b.client_id:
        return -1 if a.client_id < b.client_id else 1
    return 0


class TxId:
    """Transaction identity: the pre-assigned start timestamp.

    A from-scratch retry is a new transaction and gets a fresh TxId.
    """

    __slots__ = ("physical", "client_id")

    def __init__(self, start: Timestamp):
        self.physical = start.physical
        self.client_id = start.client_id

    @property
    def start_timestamp(self) -> Timestamp:
        return Timestamp(self.physical, self.client_id)

    def __eq__(self, other):
        return (
            isinstance(other, TxId)
            and self.physical == other.physical
            and self.client_id == other.client_id
        )

    def __hash__(self):
        return hash((self.physical, self.client_id))

    def __lt__(self, other):
        return (self.physical, self.client_id) < (other.physical, other.client_id)

    def encode(self) -> str:
        return f"{self.physical}.{self.client_id}"

    @staticmethod
    def decode(text: str) -> "TxId":
        return TxId(Timestamp.decode(text))

    def __repr__(self):
        return f"TxId({self.physical}.{self.client_id})"


@dataclass
class TimestampPair:
    """Per-version (t_w, t_r): creator timestamp and highest reader timestamp."""

    t_w: Timestamp
    t_r: Timestamp

    def __post_init__(self):
        assert self.t_w <= self.t_r, "t_w must never exceed t_r"

    def encode(self):
        return [self.t_w.encode(), self.t_r.encode()]

    @staticmethod
    def decode(obj) -> "TimestampPair":
        return TimestampPair(Timestamp.decode(obj[0]), Timestamp.decode(obj[1]))


READ = "r"
WRITE = "w"


@dataclass
class Request:
    """One read or write of a transaction."""

    tx: TxId
    idx: int  # position within the transaction, unique per tx
    key: int
    kind: str  # READ or WRITE
    value: Optional[bytes] = None
    shot_index: int = 0
    is_read_only: bool = False
    is_last_shot: bool = False

    def __post_init__(self):
        if self.kind == WRITE:
            assert self.value is not None, "write carries a value"
        else:
            assert self.value is None, "read carries no value"

    @property
    def req_id(self):
        return (self.tx, self.idx)


# ---------------------------------------------------------------------------
# Wire messages.  Every message can be encoded to a JSON-friendly dict and
# decoded back to an identical value; traces and tests rely on the round trip.
# ---------------------------------------------------------------------------

_MESSAGE_TYPES = {}


def _wire_encode(value):
    if isinstance(value, Timestamp):
        return {"_ts": value.encode()}
    if isinstance(value, TxId):
        return {"_tx": value.encode()}
    if isinstance(value, TimestampPair):
        return {"_pair": value.encode()}
    if isinstance(value, Request):
        return {
            "_req": {
                "tx": value.tx.encode(),
                "idx": value.idx,
                "key": value.key,
                "kind": value.kind,
                "value": value.value.hex() if value.value is not None else None,
                "shot_index": value.shot_index,
                "is_read_only": value.is_read_only,
                "is_last_shot": value.is_last_shot,
            }
        }
    if isinstance(value, bytes):
        return {"_b": value.hex()}
    if isinstance(value, tuple):
        return [_wire_encode(v) for v in value]
    if isinstance(value, list):
        return [_wire_encode(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _wire_encode(v) for k, v in value.items()}
    return value


def _wire_decode(value):
    if isinstance(value, dict):
        if "_ts" in value:
            return Timestamp.decode(value["_ts"])
        if "_tx" in value:
            return TxId.decode(value["_tx"])
        if "_pair" in value:
            return TimestampPair.decode(value["_pair"])
        if "_req" in value:
            r = value["_req"]
            return Request(
                tx=TxId.decode(r["tx"]),
                idx=r["idx"],
                key=r["key"],
                kind=r["kind"],
                value=bytes.fromhex(r["value"]) if r["value"] is not None else None,
                shot_index=r["shot_index"],
                is_read_only=r["is_read_only"],
                is_last_shot=r["is_last_shot"],
            )
        if "_b" in value:
            return bytes.fromhex(value["_b"])
        return {k: _wire_decode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_wire_decode(v) for v in value]
    return value


def message(cls):
    """Register a dataclass as a wire message kind."""
    cls = dataclass(cls)
    _MESSAGE_TYPES[cls.__name__] = cls
    return cls


def encode_message(msg) -> dict:
    # "_mkind" cannot collide with field names (fields are identifiers)
    out = {"_mkind": type(msg).__name__}
    for f in fields(msg):
        out[f.name] = _wire_encode(getattr(msg, f.name))
    return out


def decode_message(obj: dict):
    cls = _MESSAGE_TYPES[obj["_mkind"]]
    kwargs = {}
    for f in fields(cls):
        raw = _wire_decode(obj[f.name])
        if isinstance(raw, list):
            raw = _as_tuple(raw)
        kwargs[f.name] = raw
    return cls(**kwargs)


def _as_tuple(value):
    if isinstance(value, list):
        return tuple(_as_tuple(v) for v in value)
    return value


@message
class ExecuteReq:
    req: Request
    t: Timestamp  # pre-assigned transaction timestamp
    t_c: int  # client physical send time, for t_delta sampling
    t_ro: Optional[Timestamp] = None  # read-only staleness check, reads only
    backup: Optional[int] = None  # backup-coordinator server id, last shot
    cohorts: Optional[tuple] = None  # ((server_id, expected_request_count), ...)


@message
class ExecuteResp:
    tx: TxId
    idx: int
    key: int
    kind: str
    pair: TimestampPair
    t_s: int  # server physical execution time, piggybacked
    value: Optional[bytes] = None  # reads only; writes respond "done"
    delayed: bool = False  # response left the server later than it executed


@message
class EarlyAbortResp:
    tx: TxId
    idx: int
    key: int
    early_abort: bool = True


@message
class RoAbortResp:
    tx: TxId
    idx: int
    key: int
    ro_abort: bool = True
    # current most-recent committed t_w, so the client can refresh its t_ro
    hint_t_ro: Optional[Timestamp] = None


@message
class CommitAbort:
    tx: TxId
    decision: str  # "committed" | "aborted"


@message
class SmartRetryReq:
    tx: TxId
    t_prime: Timestamp


@message
class SmartRetryResp:
    tx: TxId
    server: int
    ok: bool


@message
class RecoverQuery:
    tx: TxId


@message
class RecoverReply:
    tx: TxId
    server: int
    executed: bool
    n_requests: int = 0
    pairs: tuple = ()  # TimestampPair per executed request
    decided: Optional[str] = None  # "committed" | "aborted" | None


COMMITTED = "committed"
ABORTED = "aborted"
UNDECIDED = "undecided"
