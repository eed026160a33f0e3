"""Benchmark workload generators.

Four named workloads, each a stream of transaction logics with fixed
parameter defaults:

- google-f1: 0.3% read-write transactions, 1-10 keys per transaction,
  values 1.6 KB with 119 B jitter, rows of 10 columns (modeled as
  sub-keys), zipfian(0.8) row selection.
- facebook-tao: 0.2% writes, read-only transactions of 1-1000 keys,
  single-key writes, values 1-4 KB, a 9.5:1 association-to-object key
  population, zipfian(0.8).
- tpcc-lite: new-order/payment/order-status/delivery/stock-level at
  44/44/4/4/4, 10 districts per warehouse, 8 warehouses per server;
  payment and order-status are multi-shot.  Only access shapes are
  modeled, not item/stock integrity rules.
- google-wf: google-f1 with the write fraction as a free parameter,
  swept over 0.3%-30%.

Popular keys are scattered over the key space with a seeded permutation so
modulo-based server placement stays balanced.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

N_COLUMNS = 10  # columns per row, modeled as sub-keys
DISTRICTS_PER_WAREHOUSE = 10
WAREHOUSES_PER_SERVER = 8
WAREHOUSE_BLOCK = 100_000  # key-id stride per warehouse


class Logic:
    """One transaction: a list of shots, each a list of operations.

    Operations are ('r', key) or ('w', key, value).  ``shots()`` is a
    generator so multi-shot clients can feed read results back in; these
    shapes ignore the values but keep the shot structure.
    """

    __slots__ = ("shot_ops", "read_only", "label")

    def __init__(self, shot_ops: List[list], read_only: bool = False, label: str = "tx"):
        self.shot_ops = shot_ops
        self.read_only = read_only
        self.label = label

    @property
    def n_shots(self) -> int:
        return len(self.shot_ops)

    def shots(self):
        values = None
        for ops in self.shot_ops:
            values = yield ops
        return

    def as_read_write(self) -> "Logic":
        """Same accesses on the read-write path (read-only fallback)."""
        return Logic(self.shot_ops, read_only=False, label=self.label + "-rw")


@dataclass
class WorkloadSpec:
    name: str
    write_fraction: float  # fraction of transactions that are read-write
    keys_ro: tuple = (1, 10)  # inclusive range, keys per read-only tx
    keys_rw: tuple = (1, 10)
    value_mean: int = 1600
    value_sd: int = 119
    value_range: Optional[tuple] = None  # uniform sizes override the normal
    zipf_theta: float = 0.8
    n_keys: int = 100_000
    arrival_rate: float = 200.0  # transactions per simulated second, total
    assoc_to_obj: Optional[float] = None  # key-population ratio, TAO only
    n_warehouses: Optional[int] = None  # tpcc-lite only

    def validate(self) -> None:
        if not (0.0 <= self.write_fraction <= 1.0):
            raise ValueError(f"write_fraction out of range: {self.write_fraction}")
        if self.keys_ro[0] < 1 or self.keys_rw[0] < 1:
            raise ValueError("key counts must be positive")


def workload_spec(name: str, n_servers: int = 4, **overrides) -> WorkloadSpec:
    if name == "google-f1":
        spec = WorkloadSpec(name=name, write_fraction=0.003)
    elif name == "google-wf":
        spec = WorkloadSpec(name=name, write_fraction=0.003)
    elif name == "facebook-tao":
        spec = WorkloadSpec(
            name=name, write_fraction=0.002, keys_ro=(1, 1000), keys_rw=(1, 1),
            value_mean=0, value_sd=0, value_range=(1000, 4000),
            assoc_to_obj=9.5,
        )
    elif name == "tpcc-lite":
        spec = WorkloadSpec(
            name=name, write_fraction=0.92,  # informational; mix drives shapes
            n_warehouses=WAREHOUSES_PER_SERVER * n_servers,
            value_mean=100, value_sd=10,
        )
    else:
        raise ValueError(f"unknown workload {name!r}")
    spec = replace(spec, **overrides)
    spec.validate()
    return spec


def server_for_key(spec: WorkloadSpec, n_servers: int):
    """Key placement: warehouse-affine for tpcc-lite, modulo otherwise."""
    if spec.name == "tpcc-lite":
        def place(key: int) -> int:
            return (key // WAREHOUSE_BLOCK) // WAREHOUSES_PER_SERVER % n_servers
    else:
        def place(key: int) -> int:
            return key % n_servers
    return place


class _ZipfSampler:
    """Zipfian(theta) over a permuted key space; O(log n) per sample."""

    def __init__(self, n: int, theta: float, rng: np.random.Generator):
        ranks = np.arange(1, n + 1, dtype=np.float64)
        weights = ranks ** (-theta)
        self.cum = np.cumsum(weights)
        self.cum /= self.cum[-1]
        self.perm = rng.permutation(n)

    def sample(self, rng: np.random.Generator, k: int = 1) -> np.ndarray:
        idx = np.searchsorted(self.cum, rng.random(k), side="left")
        return self.perm[idx]

    def sample_distinct(self, rng: np.random.Generator, k: int) -> list:
        k = min(k, len(self.perm))  # can't draw more distinct keys than exist
        if k == len(self.perm):
            return [int(key) for key in rng.permutation(self.perm)]
        out = {}
        while len(out) < k:
            for key in self.sample(rng, k - len(out)):
                out[int(key)] = None
        return list(out)


def _value(spec: WorkloadSpec, rng: np.random.Generator) -> bytes:
    if spec.value_range is not None:
        size = int(rng.integers(spec.value_range[0], spec.value_range[1] + 1))
    else:
        size = max(1, int(rng.normal(spec.value_mean, spec.value_sd)))
    return rng.bytes(size)


class _RowWorkload:
    """google-f1 / google-wf / facebook-tao logic stream."""

    def __init__(self, spec: WorkloadSpec, seed):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        n_rows = spec.n_keys // N_COLUMNS if spec.name.startswith("google") else spec.n_keys
        self.n_rows = max(1, n_rows)
        self.columns = spec.name.startswith("google")
        self.sampler = _ZipfSampler(self.n_rows, spec.zipf_theta, self.rng)

    def _keys(self, count: int) -> list:
        rows = self.sampler.sample_distinct(self.rng, count)
        if not self.columns:
            return rows
        cols = self.rng.integers(0, N_COLUMNS, len(rows))
        return [int(r) * N_COLUMNS + int(c) for r, c in zip(rows, cols)]

    def __iter__(self):
        return self

    def __next__(self) -> Logic:
        spec = self.spec
        if self.rng.random() < spec.write_fraction:
            lo, hi = spec.keys_rw
            keys = self._keys(int(self.rng.integers(lo, hi + 1)))
            ops = [("r", k) for k in sorted(keys)]
            ops += [("w", k, _value(spec, self.rng)) for k in sorted(keys)]
            if spec.name == "facebook-tao":
                # single-key blind writes
                ops = [("w", keys[0], _value(spec, self.rng))]
            return Logic([ops], read_only=False, label="rw")
        lo, hi = spec.keys_ro
        keys = self._keys(int(self.rng.integers(lo, hi + 1)))
        return Logic([[("r", k) for k in sorted(keys)]], read_only=True, label="ro")


class _TpccLite:
    """Access shapes of five TPC-C transaction types.

    Key layout inside a warehouse block: district rows, then customer rows,
    then stock rows; order rows are allocated from a per-generator counter
    so inserts land on fresh keys.
    """

    MIX = (("new-order", 0.44), ("payment", 0.44), ("order-status", 0.04),
           ("delivery", 0.04), ("stock-level", 0.04))
    N_CUSTOMERS = 100
    N_STOCK = 200

    def __init__(self, spec: WorkloadSpec, seed):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.n_wh = spec.n_warehouses
        self._order_seq = 0

    # key builders -----------------------------------------------------------
    def _district(self, w, d):
        return w * WAREHOUSE_BLOCK + d

    def _customer(self, w, c):
        return w * WAREHOUSE_BLOCK + DISTRICTS_PER_WAREHOUSE + c

    def _stock(self, w, s):
        return (w * WAREHOUSE_BLOCK + DISTRICTS_PER_WAREHOUSE
                + self.N_CUSTOMERS + s)

    def _order(self, w):
        self._order_seq += 1
        return (w * WAREHOUSE_BLOCK + DISTRICTS_PER_WAREHOUSE
                + self.N_CUSTOMERS + self.N_STOCK + self._order_seq % 50_000)

    def _val(self) -> bytes:
        return _value(self.spec, self.rng)

    def __iter__(self):
        return self

    def __next__(self) -> Logic:
        r = self.rng.random()
        acc = 0.0
        kind = self.MIX[-1][0]
        for name, frac in self.MIX:
            acc += frac
            if r < acc:
                kind = name
                break
        w = int(self.rng.integers(0, self.n_wh))
        d = int(self.rng.integers(0, DISTRICTS_PER_WAREHOUSE))
        c = int(self.rng.integers(0, self.N_CUSTOMERS))
        if kind == "new-order":
            items = sorted({int(s) for s in self.rng.integers(0, self.N_STOCK, 5)})
            ops = [("r", self._district(w, d))]
            ops += [("r", self._stock(w, s)) for s in items]
            ops += [("w", self._district(w, d), self._val())]
            ops += [("w", self._stock(w, s), self._val()) for s in items]
            ops += [("w", self._order(w), self._val())]
            return Logic([ops], label=kind)
        if kind == "payment":
            shot1 = [("r", self._district(w, d)), ("r", self._customer(w, c))]
            shot2 = [("w", self._district(w, d), self._val()),
                     ("w", self._customer(w, c), self._val())]
            return Logic([shot1, shot2], label=kind)
        if kind == "order-status":
            # multi-shot and read-only: runs on the read-write path, the
            # fast path being one-shot only
            shot1 = [("r", self._customer(w, c))]
            shot2 = [("r", self._district(w, d))]
            return Logic([shot1, shot2], read_only=False, label=kind)
        if kind == "delivery":
            ops = [("r", self._district(w, d)),
                   ("w", self._customer(w, c), self._val()),
                   ("w", self._order(w), self._val())]
            return Logic([ops], label=kind)
        # stock-level: one-shot read-only scan
        items = sorted({int(s) for s in self.rng.integers(0, self.N_STOCK, 20)})
        ops = [("r", self._district(w, d))]
        ops += [("r", self._stock(w, s)) for s in items]
        return Logic([ops], read_only=True, label=kind)


def make_generator(spec: WorkloadSpec, seed):
    """Deterministic infinite stream of transaction logics."""
    if spec.name == "tpcc-lite":
        return _TpccLite(spec, seed)
    return _RowWorkload(spec, seed)
