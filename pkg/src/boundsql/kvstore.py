"""Ordered key/value store abstraction.

The engine needs five operations from a store: get/put/delete, ordered
range reads (with limit and direction), a count over a key range, and an
atomic test-and-set. `MemoryKv` is the reference in-memory implementation;
`LatencyKv` decorates any store with per-operation injected latency (real
sleeps or a simulated clock) and records a trace for the SLO module.
"""

from __future__ import annotations

import bisect
import csv
import json
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

OP_KINDS = ("get", "put", "delete", "range", "count_range", "test_and_set")


class StoreError(RuntimeError):
    """Storage unavailable or misused (bad range bounds)."""


@dataclass(frozen=True)
class KvRecord:
    key: bytes
    value: bytes


class MemoryKv:
    """Sorted in-memory store; per-key operations are atomic under a lock."""

    def __init__(self):
        self._data: dict[bytes, bytes] = {}
        self._keys: list[bytes] = []
        self._lock = threading.RLock()

    def get(self, key: bytes) -> KvRecord | None:
        with self._lock:
            value = self._data.get(key)
        return None if value is None else KvRecord(key, value)

    def put(self, key: bytes, value: bytes) -> None:
        with self._lock:
            if key not in self._data:
                bisect.insort(self._keys, key)
            self._data[key] = value

    def delete(self, key: bytes) -> None:
        with self._lock:
            if key in self._data:
                del self._data[key]
                idx = bisect.bisect_left(self._keys, key)
                self._keys.pop(idx)

    def get_range(self, start: bytes | None, end: bytes | None, limit: int,
                  reverse: bool = False) -> list[KvRecord]:
        """Up to `limit` records with start <= key < end, in scan direction."""
        if limit < 1:
            raise StoreError("range limit must be >= 1")
        if start is not None and end is not None and start > end:
            raise StoreError("invalid range: start > end")
        with self._lock:
            lo = 0 if start is None else bisect.bisect_left(self._keys, start)
            hi = len(self._keys) if end is None else bisect.bisect_left(self._keys, end)
            if reverse:
                selected = self._keys[max(lo, hi - limit):hi][::-1]
            else:
                selected = self._keys[lo:min(hi, lo + limit)]
            return [KvRecord(k, self._data[k]) for k in selected]

    def count_range(self, start: bytes | None, end: bytes | None) -> int:
        if start is not None and end is not None and start > end:
            raise StoreError("invalid range: start > end")
        with self._lock:
            lo = 0 if start is None else bisect.bisect_left(self._keys, start)
            hi = len(self._keys) if end is None else bisect.bisect_left(self._keys, end)
        return hi - lo

    def test_and_set(self, key: bytes, expected: bytes | None, new: bytes) -> bool:
        """Atomic conditional write; `expected is None` matches absence."""
        with self._lock:
            current = self._data.get(key)
            if current != expected:
                return False
            if key not in self._data:
                bisect.insort(self._keys, key)
            self._data[key] = new
            return True

    def __len__(self) -> int:
        return len(self._data)


# --- latency injection -------------------------------------------------

@dataclass(frozen=True)
class DistributionSpec:
    """One sampling distribution: constant | uniform | lognormal | empirical-file.

    `per_tuple_ms` adds a deterministic transfer cost proportional to the
    number of records moved by the request.
    """
    kind: str
    params: dict
    per_tuple_ms: float = 0.0

    def sample(self, rng: np.random.Generator, tuple_count: int) -> float:
        if self.kind == "constant":
            base = float(self.params["ms"])
        elif self.kind == "uniform":
            base = float(rng.uniform(self.params["lo"], self.params["hi"]))
        elif self.kind == "lognormal":
            base = float(rng.lognormal(self.params["mu"], self.params["sigma"]))
        elif self.kind == "empirical":
            base = float(rng.choice(self.params["samples"]))
        else:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        return max(0.0, base + self.per_tuple_ms * tuple_count)


def _parse_dist(spec: dict, base_dir=None) -> DistributionSpec:
    kind = spec["kind"]
    per_tuple = float(spec.get("per_tuple_ms", 0.0))
    if kind == "empirical-file":
        path = spec["path"]
        if base_dir is not None:
            import os
            path = os.path.join(base_dir, path)
        with open(path) as fh:
            samples = [float(line.strip()) for line in fh if line.strip()]
        if not samples:
            raise ValueError(f"empirical latency file {path} is empty")
        return DistributionSpec("empirical", {"samples": samples}, per_tuple)
    params = {k: v for k, v in spec.items() if k not in ("kind", "per_tuple_ms")}
    return DistributionSpec(kind, params, per_tuple)


@dataclass(frozen=True)
class _Window:
    start_ms: float
    end_ms: float
    default: DistributionSpec | None
    ops: dict


class LatencyProfile:
    """Per-operation-kind delay distributions, optionally varying over
    non-overlapping time windows (to emulate periods of degraded storage
    performance)."""

    def __init__(self, default: DistributionSpec, ops: dict | None = None,
                 windows: list[_Window] | None = None):
        self.default = default
        self.ops = ops or {}
        self.windows = windows or []

    @classmethod
    def constant(cls, ms: float, per_tuple_ms: float = 0.0) -> "LatencyProfile":
        return cls(DistributionSpec("constant", {"ms": ms}, per_tuple_ms))

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "LatencyProfile":
        default = _parse_dist(doc["default"], base_dir)
        ops = {k: _parse_dist(v, base_dir) for k, v in doc.get("ops", {}).items()}
        windows = []
        for w in doc.get("windows", []):
            windows.append(_Window(
                start_ms=float(w["start_min"]) * 60_000.0,
                end_ms=float(w["end_min"]) * 60_000.0,
                default=_parse_dist(w["default"], base_dir) if "default" in w else None,
                ops={k: _parse_dist(v, base_dir) for k, v in w.get("ops", {}).items()},
            ))
        return cls(default, ops, windows)

    @classmethod
    def load(cls, path: str) -> "LatencyProfile":
        import os
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_dict(doc, base_dir=os.path.dirname(os.path.abspath(path)))

    def _spec_for(self, op_kind: str, now_ms: float) -> DistributionSpec:
        for w in self.windows:
            if w.start_ms <= now_ms < w.end_ms:
                if op_kind in w.ops:
                    return w.ops[op_kind]
                if w.default is not None:
                    return w.default
                break
        return self.ops.get(op_kind, self.default)

    def sample(self, rng: np.random.Generator, op_kind: str, now_ms: float,
               tuple_count: int) -> float:
        return self._spec_for(op_kind, now_ms).sample(rng, tuple_count)


class SimClock:
    """Virtual clock for latency experiments that must not really sleep."""

    def __init__(self, start_ms: float = 0.0):
        self.now_ms = float(start_ms)

    def advance(self, ms: float) -> None:
        self.now_ms += ms


@dataclass
class TraceRow:
    timestamp_ms: float
    op_kind: str
    alpha: str
    beta_bytes: int
    latency_ms: float


TRACE_HEADER = ["timestamp_ms", "op_kind", "alpha", "beta_bytes", "latency_ms"]


def write_trace_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for r in rows:
            writer.writerow([f"{r.timestamp_ms:.3f}", r.op_kind, r.alpha,
                             r.beta_bytes, f"{r.latency_ms:.3f}"])


def read_trace_csv(path: str) -> list[TraceRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(TraceRow(float(rec["timestamp_ms"]), rec["op_kind"],
                                 rec["alpha"], int(rec["beta_bytes"]),
                                 float(rec["latency_ms"])))
    return rows


class LatencyKv:
    """Store decorator that injects sampled latency per operation.

    With a SimClock the decorator never sleeps; sampled latencies accumulate
    in `pending_latencies` for the (single-threaded) caller to drain and fold
    into its own critical-path accounting. Without a clock it sleeps for
    real, which is what the executor-strategy experiments measure.

    Every operation is also appended to `trace` as a request-level row.
    """

    def __init__(self, inner, profile: LatencyProfile, clock: SimClock | None = None,
                 seed: int = 0, record_trace: bool = False):
        self.inner = inner
        self.profile = profile
        self.clock = clock
        self.record_trace = record_trace
        self.trace: list[TraceRow] = []
        self.pending_latencies: list[float] = []
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()
        self._start_wall = time.monotonic()

    @property
    def sim(self) -> bool:
        return self.clock is not None

    def _now_ms(self) -> float:
        if self.clock is not None:
            return self.clock.now_ms
        return (time.monotonic() - self._start_wall) * 1000.0

    def _observe(self, op_kind: str, tuple_count: int, byte_count: int) -> None:
        now = self._now_ms()
        with self._lock:
            latency = self.profile.sample(self._rng, op_kind, now, tuple_count)
            if self.record_trace:
                self.trace.append(TraceRow(now, op_kind, str(tuple_count),
                                           byte_count, latency))
            if self.sim:
                self.pending_latencies.append(latency)
        if not self.sim and latency > 0:
            time.sleep(latency / 1000.0)

    def drain_latencies(self) -> list[float]:
        with self._lock:
            out = self.pending_latencies
            self.pending_latencies = []
        return out

    def get(self, key):
        rec = self.inner.get(key)
        found = 0 if rec is None else 1
        self._observe("get", found, len(rec.value) if rec else 0)
        return rec

    def put(self, key, value):
        self.inner.put(key, value)
        self._observe("put", 1, len(value))

    def delete(self, key):
        self.inner.delete(key)
        self._observe("delete", 0, 0)

    def get_range(self, start, end, limit, reverse=False):
        recs = self.inner.get_range(start, end, limit, reverse)
        self._observe("range", len(recs), sum(len(r.value) for r in recs))
        return recs

    def count_range(self, start, end):
        n = self.inner.count_range(start, end)
        self._observe("count_range", 0, 0)
        return n

    def test_and_set(self, key, expected, new):
        ok = self.inner.test_and_set(key, expected, new)
        self._observe("test_and_set", 1, len(new))
        return ok


class FlakyKv:
    """Fault-injection decorator: raises StoreError after `fail_after` more
    operations. Used to exercise the storage-unavailable error path."""

    def __init__(self, inner, fail_after: int):
        self.inner = inner
        self.remaining = fail_after

    def _tick(self):
        if self.remaining <= 0:
            raise StoreError("storage unavailable (injected)")
        self.remaining -= 1

    def get(self, key):
        self._tick()
        return self.inner.get(key)

    def put(self, key, value):
        self._tick()
        return self.inner.put(key, value)

    def delete(self, key):
        self._tick()
        return self.inner.delete(key)

    def get_range(self, start, end, limit, reverse=False):
        self._tick()
        return self.inner.get_range(start, end, limit, reverse)

    def count_range(self, start, end):
        self._tick()
        return self.inner.count_range(start, end)

    def test_and_set(self, key, expected, new):
        self._tick()
        return self.inner.test_and_set(key, expected, new)
