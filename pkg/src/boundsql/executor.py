"""Iterator-model execution of physical plans over the key/value store.

Three fetch strategies share one operator pipeline:

  lazy      one record per request (chunk size 1), everything sequential;
            the per-tuple baseline, so its request count is NOT held to the
            batched operation bound
  simple    each remote operator prefetches up to its limit hint in one
            request, requests issued sequentially
  parallel  independent requests inside a remote operator (dereference gets,
            per-join-key ranges) go out concurrently as one wave

Stores wrapped with a SimClock-driven LatencyKv run single-threaded; the
executor folds drained per-request latencies into a simulated wall time
(sum over sequential calls, max over a wave). Real stores just sleep.

Key layout: every index (the covering primary index holds the base records)
lives under its own order-preserving namespace prefix; secondary index
entry values hold the base record's key bytes.
"""

from __future__ import annotations

import base64
import hashlib
import heapq
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import keycodec
from .catalog import IndexDef, Schema
from .keycodec import KeyCodecError
from .kvstore import KvRecord
from .physical import (IndexFKJoin, IndexScan, LocalAggregate, LocalSelection,
                       LocalSort, LocalStop, PhysicalPlan, SortedIndexJoin)
from .query import (ColumnRef, Comparison, InList, Literal, Parameter,
                    TokenMatch)
from .textsearch import tokenize_text


class ExecError(RuntimeError):
    pass


class UnboundParameterError(ExecError):
    pass


class MissingIndexError(ExecError):
    pass


class CursorError(ExecError):
    pass


class BoundExceededError(ExecError):
    """Instrumented execution used more requests/tuples than the static bound."""


class WriteError(ExecError):
    pass


class DuplicateKeyError(WriteError):
    pass


class CardinalityViolationError(WriteError):
    def __init__(self, table: str, attributes, limit: int):
        self.table = table
        self.attributes = frozenset(attributes)
        self.limit = limit
        attrs = ", ".join(sorted(attributes))
        super().__init__(f"cardinality limit {limit} on {table}({attrs}) exceeded")


class ConcurrentUpdateError(WriteError):
    pass


class NotFoundError(WriteError):
    pass


@dataclass
class ExecutionStats:
    strategy: str
    requests: int = 0
    tuples: int = 0
    wall_ms: float = 0.0
    dangling_skipped: int = 0
    per_operator: dict = field(default_factory=dict)

    def add(self, node_id: str, label: str, requests: int = 0, tuples: int = 0):
        self.requests += requests
        self.tuples += tuples
        r, t = self.per_operator.get(node_id, (label, 0, 0))[1:] \
            if node_id in self.per_operator else (0, 0)
        self.per_operator[node_id] = (label, r + requests, t + tuples)

    def summary(self) -> str:
        return (f"requests={self.requests} tuples={self.tuples} "
                f"wall_ms={self.wall_ms:.2f}")


@dataclass(frozen=True)
class PageCursor:
    query_id: str
    page_size: int
    positions: dict  # stream id -> key bytes, or None when exhausted
    offsets: dict  # node id -> rows already emitted (materialized subtrees)


_CURSOR_VERSION = 1
_DONE = "done"


def serialize_cursor(cursor: PageCursor) -> str:
    doc = {
        "v": _CURSOR_VERSION,
        "qid": cursor.query_id,
        "ps": cursor.page_size,
        "pos": {sid: (_DONE if key is None else key.hex())
                for sid, key in cursor.positions.items()},
        "off": dict(cursor.offsets),
    }
    payload = json.dumps(doc, sort_keys=True).encode()
    checksum = hashlib.sha256(payload).hexdigest()[:8]
    return base64.urlsafe_b64encode(payload + b"|" + checksum.encode()).decode()


def deserialize_cursor(text: str) -> PageCursor:
    try:
        raw = base64.urlsafe_b64decode(text.encode())
        payload, checksum = raw.rsplit(b"|", 1)
    except Exception as exc:
        raise CursorError(f"malformed cursor: {exc}") from exc
    if hashlib.sha256(payload).hexdigest()[:8] != checksum.decode():
        raise CursorError("cursor checksum mismatch (corrupted token)")
    doc = json.loads(payload)
    if doc.get("v") != _CURSOR_VERSION:
        raise CursorError(f"unsupported cursor version {doc.get('v')}")
    positions = {sid: (None if val == _DONE else bytes.fromhex(val))
                 for sid, val in doc["pos"].items()}
    return PageCursor(doc["qid"], doc["ps"], positions, dict(doc["off"]))


# --- key building ---------------------------------------------------------

def _index_signature(index: IndexDef) -> str:
    return "/".join(f.render() for f in index.fields)


def index_namespace(index: IndexDef) -> bytes:
    if index.covering:
        tag = f"t/{index.table}"
    else:
        tag = f"i/{index.table}/{_index_signature(index)}"
    return keycodec.encode_value("string", tag)


def tokenize(text: str) -> list[str]:
    """Engine-facing alias; index maintenance and probes share it."""
    return tokenize_text(text)


class Engine:
    """Stateless query/write engine bound to one schema and one store.

    Plans whose indexes are not registered in this engine's schema raise
    MissingIndexError: registration must happen before the data is written,
    or the index has nothing in it.
    """

    def __init__(self, schema: Schema, store, max_workers: int = 32,
                 unsafe_fetch_chunk: int = 10):
        self.schema = schema
        self.store = store
        self.unsafe_fetch_chunk = unsafe_fetch_chunk
        self._max_workers = max_workers
        self._pool: ThreadPoolExecutor | None = None
        self._pool_lock = threading.Lock()
        self.fault_hook = None  # callable(stage: str), for crash-ordering tests

    # -- shared helpers --

    def _pool_get(self) -> ThreadPoolExecutor:
        with self._pool_lock:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=self._max_workers)
            return self._pool

    @property
    def _sim(self) -> bool:
        return bool(getattr(self.store, "sim", False))

    def _table_types(self, table: str) -> list[str]:
        return [c.col_type for c in self.schema.table(table).columns]

    def base_key(self, table: str, values: dict) -> bytes:
        t = self.schema.table(table)
        ns = index_namespace(self.schema.primary_index(table))
        parts = [ns]
        for col in t.primary_key:
            parts.append(keycodec.encode_value(t.column(col).col_type, values[col]))
        return b"".join(parts)

    def _encode_record(self, table: str, values: dict) -> bytes:
        t = self.schema.table(table)
        ordered = [values[c.name] for c in t.columns]
        return keycodec.encode_record(self._table_types(table), ordered)

    def _decode_record(self, table: str, data: bytes) -> dict:
        t = self.schema.table(table)
        vals = keycodec.decode_record(self._table_types(table), data)
        return dict(zip(t.column_names, vals))

    def _entry_keys(self, index: IndexDef, values: dict) -> list[bytes]:
        """All entry keys one tuple contributes to an index (token fields
        fan out to one entry per distinct token)."""
        t = self.schema.table(index.table)
        ns = index_namespace(index)
        prefixes = [ns]
        for f in index.fields:
            if f.token:
                toks = sorted(set(tokenize_text(values[f.column])))
                prefixes = [p + keycodec.encode_value("string", tok)
                            for p in prefixes for tok in toks]
            else:
                enc = keycodec.encode_value(t.column(f.column).col_type,
                                            values[f.column])
                prefixes = [p + enc for p in prefixes]
        return prefixes

    def _coerce(self, col_type: str, value):
        if col_type == "int64":
            if isinstance(value, bool):
                raise KeyCodecError("expected int, got bool")
            if isinstance(value, str):
                return int(value)
            return value
        if col_type == "timestamp":
            if isinstance(value, str):
                if value.lstrip("-").isdigit():
                    return int(value)
                from datetime import datetime, timezone
                dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
                if dt.tzinfo is None:
                    dt = dt.replace(tzinfo=timezone.utc)
                return int(dt.timestamp() * 1000)
            return value
        if col_type == "boolean":
            if isinstance(value, str):
                if value.lower() in ("true", "1"):
                    return True
                if value.lower() in ("false", "0"):
                    return False
                raise KeyCodecError(f"bad boolean {value!r}")
            return value
        return value

    def _coerce_tuple(self, table: str, values: dict) -> dict:
        t = self.schema.table(table)
        if set(values) != set(t.column_names):
            missing = set(t.column_names) - set(values)
            extra = set(values) - set(t.column_names)
            bits = []
            if missing:
                bits.append(f"missing columns: {', '.join(sorted(missing))}")
            if extra:
                bits.append(f"unknown columns: {', '.join(sorted(extra))}")
            raise WriteError(f"tuple for {table} invalid ({'; '.join(bits)})")
        out = {}
        for col in t.columns:
            out[col.name] = self._coerce(col.col_type, values[col.name])
            keycodec.encode_value(col.col_type, out[col.name])  # type check
        return out

    # -- query execution --

    def bind_params(self, plan: PhysicalPlan, params: dict) -> dict:
        bound = {}
        for name, spec in plan.param_specs.items():
            if name not in params:
                raise UnboundParameterError(f"parameter {name!r} is not bound")
            value = params[name]
            if spec[0] == "scalar":
                bound[name] = self._coerce(spec[1], value)
            elif spec[0] == "token":
                toks = tokenize_text(str(value))
                if len(toks) != 1:
                    raise UnboundParameterError(
                        f"parameter {name!r} must be a single token, got {value!r}")
                bound[name] = toks[0]
            else:  # list
                _, col_type, declared = spec
                if not isinstance(value, (list, tuple)):
                    raise UnboundParameterError(f"parameter {name!r} must be a list")
                if len(value) > declared:
                    raise UnboundParameterError(
                        f"parameter {name!r} has {len(value)} values; the query "
                        f"declared at most {declared}")
                bound[name] = [self._coerce(col_type, v) for v in value]
        unknown = set(params) - set(plan.param_specs)
        if unknown:
            raise UnboundParameterError(
                f"unknown parameters: {', '.join(sorted(unknown))}")
        return bound

    def execute(self, plan: PhysicalPlan, params: dict | None = None,
                strategy: str = "parallel", instrument: bool = True):
        """Run a plan to completion; returns (rows, stats). Rows are tuples
        in plan.output_columns order."""
        if strategy not in ("lazy", "simple", "parallel"):
            raise ExecError(f"unknown strategy {strategy!r}")
        bound_params = self.bind_params(plan, params or {})
        stats = ExecutionStats(strategy=strategy)
        run = _Run(self, plan, bound_params, strategy, stats)
        start = time.monotonic()
        rows = list(run.rows(plan.root, tracked=False))
        stats.wall_ms = run.sim_wall if self._sim \
            else (time.monotonic() - start) * 1000.0
        projected = [tuple(r.get(key) for _, key in plan.output_columns)
                     for r in rows]
        if instrument and strategy != "lazy" and plan.operation_bound is not None:
            ob = plan.operation_bound
            if stats.requests > ob.max_requests or stats.tuples > ob.max_tuples:
                raise BoundExceededError(
                    f"observed requests={stats.requests} tuples={stats.tuples} "
                    f"exceed bound requests<={ob.max_requests} "
                    f"tuples<={ob.max_tuples}")
        return projected, stats

    def execute_page(self, plan: PhysicalPlan, params: dict | None = None,
                     cursor=None, instrument: bool = True):
        """Fetch the next page of a PAGINATE plan; returns
        (rows, next_cursor | None, stats)."""
        if not plan.is_paginated:
            raise ExecError("execute_page requires a PAGINATE plan "
                            "(root LocalStop(kind=paginate))")
        if isinstance(cursor, str):
            cursor = deserialize_cursor(cursor)
        if cursor is not None and cursor.query_id != plan.query_id:
            raise CursorError("cursor does not belong to this query plan")
        bound_params = self.bind_params(plan, params or {})
        stats = ExecutionStats(strategy="paged")
        run = _Run(self, plan, bound_params, "simple", stats,
                   positions=dict(cursor.positions) if cursor else {},
                   offsets=dict(cursor.offsets) if cursor else {})
        start = time.monotonic()
        page_size = plan.root.count
        rows = []
        source = run.rows(plan.root.child, tracked=True)
        for row in source:
            rows.append(row)
            if len(rows) >= page_size:
                break
        stats.wall_ms = run.sim_wall if self._sim \
            else (time.monotonic() - start) * 1000.0
        projected = [tuple(r.get(key) for _, key in plan.output_columns)
                     for r in rows]
        if instrument and plan.operation_bound is not None:
            ob = plan.operation_bound
            if stats.requests > ob.max_requests or stats.tuples > ob.max_tuples:
                raise BoundExceededError(
                    f"page used requests={stats.requests} tuples={stats.tuples}, "
                    f"bound is requests<={ob.max_requests} tuples<={ob.max_tuples}")
        if len(rows) < page_size:
            return projected, None, stats
        next_cursor = PageCursor(plan.query_id, page_size,
                                 dict(run.positions), dict(run.offsets))
        return projected, next_cursor, stats

    # -- write path --

    def _fault(self, stage: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(stage)

    def _secondary_indexes(self, table: str) -> list[IndexDef]:
        primary = self.schema.primary_index(table)
        return [i for i in self.schema.indexes_for(table) if i != primary]

    def insert(self, table: str, values: dict) -> None:
        """Write protocol: secondary index entries first, then the record via
        test-and-set (primary-key uniqueness), then the cardinality check by
        count range, deleting the record again on violation."""
        values = self._coerce_tuple(table, values)
        bkey = self.base_key(table, values)
        record = self._encode_record(table, values)
        written = []
        for index in self._secondary_indexes(table):
            for ekey in self._entry_keys(index, values):
                self.store.put(ekey, bkey)
                written.append(ekey)
        self._fault("insert:after-index-puts")
        if not self.store.test_and_set(bkey, None, record):
            existing = self.store.get(bkey)
            keep = set()
            if existing is not None:
                old = self._decode_record(table, existing.value)
                for index in self._secondary_indexes(table):
                    keep.update(self._entry_keys(index, old))
            for ekey in written:
                if ekey not in keep:
                    self.store.delete(ekey)
            raise DuplicateKeyError(f"duplicate primary key in {table}")
        self._fault("insert:after-record-put")
        violation = self._check_constraints(table, values)
        if violation is not None:
            self.store.delete(bkey)
            for ekey in written:
                self.store.delete(ekey)
            raise CardinalityViolationError(table, violation.attributes,
                                            violation.limit)

    def _check_constraints(self, table: str, values: dict):
        for c in self.schema.constraints_for(table):
            index = self._enforcement_index(c)
            t = self.schema.table(table)
            prefix = index_namespace(index)
            for f in index.fields[: len(c.attributes)]:
                prefix += keycodec.encode_value(t.column(f.column).col_type,
                                                values[f.column])
            upper = keycodec.increment_bytes(prefix)
            count = self.store.count_range(prefix, upper)
            if count > c.limit:
                return c
        return None

    def _enforcement_index(self, constraint) -> IndexDef:
        for index in self.schema.indexes_for(constraint.table):
            lead = index.fields[: len(constraint.attributes)]
            if (all(not f.token for f in lead)
                    and {f.column for f in lead} == set(constraint.attributes)):
                return index
        raise MissingIndexError(
            f"no index serves constraint on {constraint.table}"
            f"({', '.join(sorted(constraint.attributes))})")

    def update(self, table: str, values: dict) -> None:
        """Same-key update: new index entries, conditional record swap, then
        stale entry deletion. Re-checks constraints whose attributes changed."""
        values = self._coerce_tuple(table, values)
        bkey = self.base_key(table, values)
        existing = self.store.get(bkey)
        if existing is None:
            raise NotFoundError(f"no {table} row with that primary key")
        old = self._decode_record(table, existing.value)
        record = self._encode_record(table, values)
        old_entries, new_entries = set(), set()
        for index in self._secondary_indexes(table):
            old_entries.update(self._entry_keys(index, old))
            new_entries.update(self._entry_keys(index, values))
        for ekey in sorted(new_entries - old_entries):
            self.store.put(ekey, bkey)
        self._fault("update:after-index-puts")
        if not self.store.test_and_set(bkey, existing.value, record):
            for ekey in sorted(new_entries - old_entries):
                self.store.delete(ekey)
            raise ConcurrentUpdateError(f"{table} row changed concurrently")
        self._fault("update:after-record-put")
        changed = {c for c in self.schema.table(table).column_names
                   if old[c] != values[c]}
        for c in self.schema.constraints_for(table):
            if not (c.attributes & changed):
                continue
            violation = self._check_constraints(table, values)
            if violation is not None:
                self.store.test_and_set(bkey, record, existing.value)
                for ekey in sorted(new_entries - old_entries):
                    self.store.delete(ekey)
                raise CardinalityViolationError(table, violation.attributes,
                                                violation.limit)
            break
        for ekey in sorted(old_entries - new_entries):
            self.store.delete(ekey)

    def delete(self, table: str, key_values: dict) -> None:
        """Delete by primary key; the record goes first so index entries only
        ever dangle (never point at wrong data)."""
        t = self.schema.table(table)
        missing = set(t.primary_key) - set(key_values)
        if missing:
            raise WriteError(f"missing primary key columns: {sorted(missing)}")
        coerced = {c: self._coerce(t.column(c).col_type, key_values[c])
                   for c in t.primary_key}
        bkey = self.base_key(table, coerced)
        existing = self.store.get(bkey)
        if existing is None:
            raise NotFoundError(f"no {table} row with that primary key")
        old = self._decode_record(table, existing.value)
        self.store.delete(bkey)
        self._fault("delete:after-record-delete")
        for index in self._secondary_indexes(table):
            for ekey in self._entry_keys(index, old):
                self.store.delete(ekey)

    def bulk_load(self, table: str, rows) -> int:
        """Fast seeding path for constraint-consistent data; bypasses the
        per-insert uniqueness and cardinality protocols."""
        n = 0
        for values in rows:
            values = self._coerce_tuple(table, values)
            self.store.put(self.base_key(table, values),
                           self._encode_record(table, values))
            for index in self._secondary_indexes(table):
                bkey = self.base_key(table, values)
                for ekey in self._entry_keys(index, values):
                    self.store.put(ekey, bkey)
            n += 1
        return n

    def sweep_dangling(self) -> dict:
        """Offline garbage collection: delete index entries whose base record
        is missing (dangling) or no longer matches (stale)."""
        removed = {"dangling": 0, "stale": 0}
        for table in self.schema.tables:
            for index in self._secondary_indexes(table):
                ns = index_namespace(index)
                upper = keycodec.increment_bytes(ns)
                start = ns
                while True:
                    batch = self.store.get_range(start, upper, 256)
                    if not batch:
                        break
                    for rec in batch:
                        base = self.store.get(rec.value)
                        if base is None:
                            self.store.delete(rec.key)
                            removed["dangling"] += 1
                            continue
                        row = self._decode_record(table, base.value)
                        if rec.key not in self._entry_keys(index, row):
                            self.store.delete(rec.key)
                            removed["stale"] += 1
                    start = keycodec.successor_bytes(batch[-1].key)
        return removed


# --- the operator pipeline -------------------------------------------------

class _Rev:
    """Inverts comparison order, for descending merge keys."""
    __slots__ = ("v",)

    def __init__(self, v):
        self.v = v

    def __lt__(self, other):
        return other.v < self.v

    def __eq__(self, other):
        return self.v == other.v


class _Run:
    def __init__(self, engine: Engine, plan: PhysicalPlan, params: dict,
                 strategy: str, stats: ExecutionStats,
                 positions: dict | None = None, offsets: dict | None = None):
        self.engine = engine
        self.plan = plan
        self.params = params
        self.strategy = strategy
        self.stats = stats
        self.sim = engine._sim
        self.sim_wall = 0.0
        self.positions = positions if positions is not None else {}
        self.offsets = offsets if offsets is not None else {}
        self.paged = positions is not None

    # latency accounting ---------------------------------------------------

    def _drain(self) -> list[float]:
        if self.sim:
            return self.engine.store.drain_latencies()
        return []

    def _call(self, fn):
        out = fn()
        if self.sim:
            self.sim_wall += sum(self._drain())
        return out

    def _wave(self, thunks: list):
        if not thunks:
            return []
        if self.strategy != "parallel" or len(thunks) == 1:
            return [self._call(t) for t in thunks]
        if self.sim:
            results, lats = [], []
            for t in thunks:
                results.append(t())
                lats.extend(self._drain())
            self.sim_wall += max(lats, default=0.0)
            return results
        pool = self.engine._pool_get()
        return list(pool.map(lambda t: t(), thunks))

    # store access with stats ------------------------------------------------

    def _range(self, node, start, end, limit, reverse):
        recs = self._call(lambda: self.engine.store.get_range(start, end, limit,
                                                              reverse))
        self.stats.add(node.node_id, node.label, requests=1)
        return recs

    def _get(self, node, key):
        rec = self._call(lambda: self.engine.store.get(key))
        self.stats.add(node.node_id, node.label, requests=1)
        return rec

    # node dispatch ----------------------------------------------------------

    def rows(self, node, tracked: bool):
        if isinstance(node, IndexScan):
            yield from self._scan_rows(node, tracked)
        elif isinstance(node, IndexFKJoin):
            yield from self._fk_rows(node, tracked)
        elif isinstance(node, SortedIndexJoin):
            yield from self._sij_rows(node, tracked)
        elif isinstance(node, LocalSelection):
            for row in self.rows(node.child, tracked):
                if self._eval_pred(node.predicate, row):
                    yield row
        elif isinstance(node, LocalStop):
            emitted = 0
            for row in self.rows(node.child, tracked):
                yield row
                emitted += 1
                if emitted >= node.count:
                    break
        elif isinstance(node, LocalSort):
            yield from self._sorted_rows(node, tracked)
        elif isinstance(node, LocalAggregate):
            yield from self._aggregate_rows(node, tracked)
        else:
            raise ExecError(f"unknown plan node {node!r}")

    # operand / predicate evaluation ------------------------------------------

    def _value(self, operand, row=None):
        if isinstance(operand, Literal):
            return operand.value
        if isinstance(operand, Parameter):
            return self.params[operand.name]
        if isinstance(operand, ColumnRef):
            return row[f"{operand.table}.{operand.column}"]
        raise ExecError(f"unknown operand {operand!r}")

    def _eval_pred(self, pred, row) -> bool:
        if isinstance(pred, Comparison):
            lhs = row[f"{pred.lhs.table}.{pred.lhs.column}"]
            rhs = self._value(pred.rhs, row)
            if pred.op == "=":
                return lhs == rhs
            if pred.op == "<":
                return lhs < rhs
            if pred.op == "<=":
                return lhs <= rhs
            if pred.op == ">":
                return lhs > rhs
            return lhs >= rhs
        if isinstance(pred, TokenMatch):
            lhs = row[f"{pred.lhs.table}.{pred.lhs.column}"]
            probe = self._value(pred.rhs, row)
            return probe in tokenize_text(lhs)
        if isinstance(pred, InList):
            lhs = row[f"{pred.lhs.table}.{pred.lhs.column}"]
            return lhs in self.params[pred.param.name]
        raise ExecError(f"unknown predicate {pred!r}")

    # index scan ---------------------------------------------------------------

    def _scan_rows(self, node: IndexScan, tracked: bool):
        if not self.engine.schema.has_index(node.index):
            raise MissingIndexError(
                f"plan requires index {node.index.render()} which is not "
                f"registered in the engine schema")
        table = self.engine.schema.table(node.table)
        ns = index_namespace(node.index)
        if node.in_field is not None:
            elements = self.params[node.in_field[1].name]
        else:
            elements = [None]
        if node.point_lookup:
            yield from self._point_rows(node, table, ns, elements, tracked)
            return
        for i, element in enumerate(elements):
            stream_id = node.node_id if node.in_field is None \
                else f"{node.node_id}:{i}"
            yield from self._range_rows(node, table, ns, element, stream_id,
                                        tracked)

    def _prefix_bytes(self, node: IndexScan, table, ns: bytes, element) -> bytes:
        prefix = ns
        eq_vals = {col: self._value(op) for col, op in node.eq_fields}
        if node.token_field is not None:
            probe = self._value(node.token_field[1])
            toks = tokenize_text(str(probe))
            if len(toks) != 1:
                raise UnboundParameterError("token probe must be one token")
            eq_vals[node.token_field[0]] = toks[0]
        if node.in_field is not None:
            eq_vals[node.in_field[0]] = element
        for f in node.index.fields:
            if f.token:
                if f.column not in eq_vals:
                    break
                prefix += keycodec.encode_value("string", eq_vals[f.column])
            elif f.column in eq_vals:
                prefix += keycodec.encode_value(table.column(f.column).col_type,
                                                eq_vals[f.column])
            else:
                break
        return prefix

    def _point_rows(self, node: IndexScan, table, ns, elements, tracked: bool):
        pending = []
        for i, element in enumerate(elements):
            sid = node.node_id if node.in_field is None else f"{node.node_id}:{i}"
            if tracked and self.positions.get(sid, b"") is None:
                continue  # already delivered in an earlier page
            pending.append((sid, self._prefix_bytes(node, table, ns, element)))
        recs = self._wave([(lambda k=k: self.engine.store.get(k))
                           for _, k in pending])
        self.stats.add(node.node_id, node.label, requests=len(pending))
        for (sid, _), rec in zip(pending, recs):
            if tracked:
                self.positions[sid] = None
            if rec is None:
                continue
            self.stats.add(node.node_id, node.label, tuples=1)
            row = self.engine._decode_record(node.table, rec.value)
            yield {f"{node.alias}.{c}": v for c, v in row.items()}

    def _range_bounds(self, node: IndexScan, table, prefix: bytes):
        start = prefix
        end = keycodec.increment_bytes(prefix)
        if node.range_field is not None:
            col, lows, highs = node.range_field
            col_type = table.column(col).col_type
            for operand, strict in lows:
                enc = prefix + keycodec.encode_value(col_type, self._value(operand))
                candidate = keycodec.increment_bytes(enc) if strict else enc
                if candidate is not None and candidate > start:
                    start = candidate
            for operand, strict in highs:
                enc = prefix + keycodec.encode_value(col_type, self._value(operand))
                candidate = enc if strict else keycodec.increment_bytes(enc)
                if candidate is not None and (end is None or candidate < end):
                    end = candidate
        return start, end

    def _range_rows(self, node: IndexScan, table, ns, element, stream_id,
                    tracked: bool):
        prefix = self._prefix_bytes(node, table, ns, element)
        start, end = self._range_bounds(node, table, prefix)
        reverse = node.direction == "reverse"
        if tracked:
            pos = self.positions.get(stream_id, b"")
            if pos is None:
                return  # exhausted in an earlier page
            if isinstance(pos, bytes) and pos != b"":
                if reverse:
                    end = pos if (end is None or pos < end) else end
                else:
                    succ = keycodec.successor_bytes(pos)
                    start = succ if succ > start else start
        hint = node.limit_hint
        budget = hint if hint is not None else None
        chunk = 1 if self.strategy == "lazy" else \
            (hint if hint is not None else self.engine.unsafe_fetch_chunk)
        while True:
            ask = chunk if budget is None else min(chunk, budget)
            if ask <= 0:
                break
            if end is not None and start >= end:
                break
            batch = self._range(node, start, end, ask, reverse)
            for entry_key, row in self._materialize(node, batch):
                if tracked:
                    self.positions[stream_id] = entry_key
                yield row
            if len(batch) < ask:
                break
            if budget is not None:
                budget -= len(batch)
                if budget <= 0:
                    break
            if reverse:
                end = batch[-1].key
            else:
                start = keycodec.successor_bytes(batch[-1].key)
        if tracked:
            self.positions[stream_id] = None  # exhausted

    def _materialize(self, node, batch: list[KvRecord]):
        """Turn index entries into rows; dereference + validate when the
        index is non-covering."""
        out = []
        if node.covering:
            for rec in batch:
                self.stats.add(node.node_id, node.label, tuples=1)
                row = self.engine._decode_record(node.table, rec.value)
                out.append((rec.key, {f"{node.alias}.{c}": v
                                      for c, v in row.items()}))
            return out
        gets = self._wave([(lambda k=rec.value: self.engine.store.get(k))
                           for rec in batch])
        self.stats.add(node.node_id, node.label, requests=len(batch))
        ns_len = len(index_namespace(node.index))
        layout = []
        table = self.engine.schema.table(node.table)
        for f in node.index.fields:
            layout.append(("string" if f.token else
                           table.column(f.column).col_type, False))
        for rec, base in zip(batch, gets):
            if base is None:
                self.stats.dangling_skipped += 1
                continue
            row = self.engine._decode_record(node.table, base.value)
            entry_vals = keycodec.decode_key(rec.key[ns_len:], layout)
            stale = False
            for f, v in zip(node.index.fields, entry_vals):
                if f.token:
                    if v not in tokenize_text(row[f.column]):
                        stale = True
                        break
                elif row[f.column] != v:
                    stale = True
                    break
            if stale:
                self.stats.dangling_skipped += 1
                continue
            self.stats.add(node.node_id, node.label, tuples=1)
            out.append((rec.key, {f"{node.alias}.{c}": v for c, v in row.items()}))
        return out

    # FK join --------------------------------------------------------------------

    def _fk_rows(self, node: IndexFKJoin, tracked: bool):
        table = self.engine.schema.table(node.table)
        child = self.rows(node.child, tracked)
        if self.strategy == "parallel":
            child_rows = list(child)
            keys = [self._fk_key(node, table, row) for row in child_rows]
            recs = self._wave([(lambda k=k: self.engine.store.get(k))
                               for k in keys])
            self.stats.add(node.node_id, node.label, requests=len(keys))
            for row, rec in zip(child_rows, recs):
                merged = self._fk_merge(node, row, rec)
                if merged is not None:
                    yield merged
            return
        for row in child:
            rec = self._get(node, self._fk_key(node, table, row))
            merged = self._fk_merge(node, row, rec)
            if merged is not None:
                yield merged

    def _fk_key(self, node: IndexFKJoin, table, row) -> bytes:
        values = {}
        for col, ref in node.key_mapping:
            values[col] = row[f"{ref.table}.{ref.column}"]
        return self.engine.base_key(node.table, values)

    def _fk_merge(self, node: IndexFKJoin, row, rec):
        if rec is None:
            return None  # dangling reference; inner join drops it
        self.stats.add(node.node_id, node.label, tuples=1)
        right = self.engine._decode_record(node.table, rec.value)
        merged = dict(row)
        merged.update({f"{node.alias}.{c}": v for c, v in right.items()})
        return merged

    # sorted index join ------------------------------------------------------------

    def _sij_rows(self, node: SortedIndexJoin, tracked: bool):
        if not self.engine.schema.has_index(node.index):
            raise MissingIndexError(
                f"plan requires index {node.index.render()} which is not "
                f"registered in the engine schema")
        table = self.engine.schema.table(node.table)
        ns = index_namespace(node.index)
        reverse = node.direction == "reverse"
        child_rows = list(self.rows(node.child, tracked=False))
        streams = []
        for i, row in enumerate(child_rows):
            prefix = ns
            for f in node.index.fields[: len(node.key_mapping) + len(node.eq_fields)]:
                join_ref = next((ref for c, ref in node.key_mapping
                                 if c == f.column), None)
                if join_ref is not None:
                    val = row[f"{join_ref.table}.{join_ref.column}"]
                else:
                    operand = next(op for c, op in node.eq_fields if c == f.column)
                    val = self._value(operand)
                prefix += keycodec.encode_value(table.column(f.column).col_type, val)
            stream = _SijStream(i, row, prefix, f"{node.node_id}:{prefix.hex()}",
                                reverse)
            if tracked:
                pos = self.positions.get(stream.stream_id, b"")
                if pos is None:
                    continue  # exhausted in an earlier page
                if pos != b"":
                    if reverse:
                        stream.end = pos
                    else:
                        stream.start = keycodec.successor_bytes(pos)
            streams.append(stream)

        if self.strategy == "parallel":
            live = [s for s in streams if not s.empty_window()]
            thunks = [(lambda s=s: self.engine.store.get_range(
                s.start, s.end, node.per_key_limit, reverse)) for s in live]
            batches = self._wave(thunks)
            self.stats.add(node.node_id, node.label, requests=len(live))
            for s, batch in zip(live, batches):
                s.buffer = self._materialize(node, batch)
                s.fetched = len(batch)
                s.exhausted = len(batch) < node.per_key_limit
                s.advance_window(batch)
            for s in streams:
                if s.empty_window():
                    s.exhausted = True
        else:
            for s in streams:
                self._sij_refill(node, s)

        if not node.sort_keys:
            for s in streams:
                while True:
                    nxt = self._sij_next(node, s)
                    if nxt is None:
                        break
                    entry_key, right_row = nxt
                    if tracked:
                        self.positions[s.stream_id] = entry_key
                    merged = dict(s.row)
                    merged.update(right_row)
                    yield merged
                if tracked and s.exhausted and not s.buffer:
                    self.positions[s.stream_id] = None
            return

        heap = []
        counter = 0
        for s in streams:
            nxt = self._sij_next(node, s)
            if nxt is not None:
                heapq.heappush(heap, (self._sij_key(node, nxt[1]), s.order,
                                      counter, s, nxt))
                counter += 1
        while heap:
            _, _, _, s, (entry_key, right_row) = heapq.heappop(heap)
            if tracked:
                self.positions[s.stream_id] = entry_key
            merged = dict(s.row)
            merged.update(right_row)
            yield merged
            nxt = self._sij_next(node, s)
            if nxt is not None:
                heapq.heappush(heap, (self._sij_key(node, nxt[1]), s.order,
                                      counter, s, nxt))
                counter += 1
            elif tracked and s.exhausted:
                self.positions[s.stream_id] = None

    def _sij_key(self, node: SortedIndexJoin, right_row):
        key_vals = []
        for item in node.sort_keys:
            v = right_row[f"{node.alias}.{item.column.column}"]
            key_vals.append(_Rev(v) if item.descending else v)
        return tuple(key_vals)

    def _sij_next(self, node: SortedIndexJoin, s):
        """Next buffered entry; refills within the per-key fetch budget."""
        while not s.buffer:
            if s.exhausted or s.fetched >= node.per_key_limit:
                return None
            self._sij_refill(node, s)
            if s.exhausted and not s.buffer:
                return None
        return s.buffer.pop(0)

    def _sij_refill(self, node: SortedIndexJoin, s) -> None:
        if s.empty_window():
            s.exhausted = True
            return
        chunk = 1 if self.strategy == "lazy" else node.per_key_limit
        ask = min(chunk, node.per_key_limit - s.fetched)
        if ask <= 0:
            return
        batch = self._range(node, s.start, s.end, ask, s.reverse)
        s.buffer.extend(self._materialize(node, batch))
        s.fetched += len(batch)
        if len(batch) < ask:
            s.exhausted = True
        else:
            s.advance_window(batch)

    # local operators ------------------------------------------------------------

    def _sort_extension(self, row_keys) -> list[str]:
        ext = []
        for rel in self.plan.relations:
            table = self.engine.schema.table(rel.table)
            for col in table.primary_key:
                key = f"{rel.alias}.{col}"
                if key in row_keys:
                    ext.append(key)
        return ext

    def _sorted_rows(self, node: LocalSort, tracked: bool):
        rows = list(self.rows(node.child, tracked=False))
        if tracked:
            already = self.offsets.get(node.node_id, 0)
        if not rows:
            return
        ext = self._sort_extension(rows[0].keys())

        def sort_key(row):
            parts = []
            for item in node.keys:
                v = row[f"{item.column.table}.{item.column.column}"]
                parts.append(_Rev(v) if item.descending else v)
            for key in ext:
                parts.append(row[key])
            return tuple(parts)

        rows.sort(key=sort_key)
        if tracked:
            emitted = 0
            for row in rows[already:]:
                emitted += 1
                self.offsets[node.node_id] = already + emitted
                yield row
        else:
            yield from rows

    def _aggregate_rows(self, node: LocalAggregate, tracked: bool):
        rows = list(self.rows(node.child, tracked=False))
        groups: dict = {}
        for row in rows:
            gkey = tuple(row[f"{c.table}.{c.column}"] for c in node.group_keys)
            groups.setdefault(gkey, []).append(row)
        if not node.group_keys and not groups:
            groups[()] = []
        out_rows = []
        for gkey in sorted(groups):  # group columns are same-typed per position
            members = groups[gkey]
            out = {f"{c.table}.{c.column}": v
                   for c, v in zip(node.group_keys, gkey)}
            for item in node.items:
                out[item.render()] = _aggregate(item, members)
            out_rows.append(out)
        if tracked:
            already = self.offsets.get(node.node_id, 0)
            emitted = 0
            for row in out_rows[already:]:
                emitted += 1
                self.offsets[node.node_id] = already + emitted
                yield row
        else:
            yield from out_rows


def _aggregate(item, members):
    from .query import Star
    if item.fn == "COUNT":
        if isinstance(item.arg, Star):
            return len(members)
        key = f"{item.arg.table}.{item.arg.column}"
        return sum(1 for m in members if m[key] is not None)
    key = f"{item.arg.table}.{item.arg.column}"
    values = [m[key] for m in members]
    if not values:
        return None
    if item.fn == "SUM":
        return sum(values)
    if item.fn == "MIN":
        return min(values)
    if item.fn == "MAX":
        return max(values)
    raise ExecError(f"unknown aggregate {item.fn}")


class _SijStream:
    __slots__ = ("order", "row", "prefix", "stream_id", "reverse", "buffer",
                 "fetched", "exhausted", "start", "end")

    def __init__(self, order, row, prefix, stream_id, reverse):
        self.order = order
        self.row = row
        self.prefix = prefix
        self.stream_id = stream_id
        self.reverse = reverse
        self.buffer = []
        self.fetched = 0
        self.exhausted = False
        self.start = prefix
        self.end = keycodec.increment_bytes(prefix)

    def empty_window(self) -> bool:
        return self.end is not None and self.start >= self.end

    def advance_window(self, batch) -> None:
        if not batch:
            return
        if self.reverse:
            self.end = batch[-1].key
        else:
            self.start = keycodec.successor_bytes(batch[-1].key)
