"""Physical planning: greedy matching of logical sections onto the three
remote operators (IndexScan, IndexFKJoin, SortedIndexJoin), local-operator
fallback, rejection of unbounded plans, index selection, and the static
per-query operation bound.

Every remote operator must carry a finite output bound before the plan is
accepted; the bound comes from a stop operator, a data-stop annotation, or
(for IN lists) per-element key coverage times the declared list length.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .catalog import IndexDef, IndexField, Schema
from .lexer import ParseError
from .logical import (Aggregate, DataStop, Join, PlanError, Scan, Selection,
                      Sort, Stop, find_linear_join_ordering, predicate_push_down,
                      pretty, resolve_ast)
from .query import (AggregateItem, ColumnRef, Comparison, InList, Literal,
                    Parameter, QueryAst, Star, TokenMatch, parse_query)
from .stops import insert_data_stops, stop_push_down


class NotScaleIndependentError(PlanError):
    """The optimizer could not bound some section of the plan."""

    def __init__(self, message: str, section=None, notes=(), logical_plan=None,
                 ast=None, schema=None, alias=None):
        super().__init__(message)
        self.section = section
        self.notes = tuple(notes)
        self.logical_plan = logical_plan
        self.ast = ast
        self.schema = schema
        self.alias = alias


# --- physical nodes ------------------------------------------------------

@dataclass
class IndexScan:
    alias: str
    table: str
    index: IndexDef
    eq_fields: tuple  # ((column, operand), ...) in index-field order
    token_field: tuple | None  # (column, operand)
    range_field: tuple | None  # (column, lows, highs); bounds are (operand, strict)
    in_field: tuple | None  # (column, Parameter, declared_length)
    limit_hint: int | None  # None only in unsafe mode
    direction: str  # "forward" | "reverse"
    covering: bool
    point_lookup: bool = False
    constraint_bound: bool = False
    output_bound: int | None = None
    node_id: str = ""

    label = "IndexScan"
    child = None


@dataclass
class IndexFKJoin:
    alias: str  # right relation alias
    table: str
    key_mapping: tuple  # ((right pk column, left ColumnRef), ...) in PK order
    child: object = None
    output_bound: int | None = None
    node_id: str = ""

    label = "IndexFKJoin"


@dataclass
class SortedIndexJoin:
    alias: str
    table: str
    index: IndexDef
    key_mapping: tuple  # ((right column, left ColumnRef), ...) prefix join fields
    eq_fields: tuple  # ((right column, operand), ...) extra prefix equalities
    sort_keys: tuple  # OrderItem over the right relation ((), if unsorted)
    per_key_limit: int = 1
    direction: str = "forward"
    covering: bool = True
    constraint_bound: bool = False
    child: object = None
    output_bound: int | None = None
    node_id: str = ""

    label = "SortedIndexJoin"


@dataclass
class LocalSelection:
    predicate: object
    child: object = None
    output_bound: int | None = None
    node_id: str = ""

    label = "LocalSelection"


@dataclass
class LocalSort:
    keys: tuple
    child: object = None
    output_bound: int | None = None
    node_id: str = ""

    label = "LocalSort"


@dataclass
class LocalStop:
    count: int
    kind: str  # "limit" | "paginate"
    child: object = None
    output_bound: int | None = None
    node_id: str = ""

    label = "LocalStop"


@dataclass
class LocalAggregate:
    items: tuple
    group_keys: tuple
    child: object = None
    output_bound: int | None = None
    node_id: str = ""

    label = "LocalAggregate"


REMOTE_NODES = (IndexScan, IndexFKJoin, SortedIndexJoin)


def walk_nodes(node):
    while node is not None:
        yield node
        node = node.child


@dataclass(frozen=True)
class PerOperatorBound:
    node_id: str
    operator: str
    requests: int
    tuples: int


@dataclass(frozen=True)
class OperationBound:
    max_requests: int
    max_tuples: int
    per_operator: tuple


@dataclass(frozen=True)
class ScalingClassReport:
    klass: str  # "I" | "II" | "rejected" | "unsafe"
    reason: str
    suggestions: tuple = ()


@dataclass(frozen=True)
class PhysicalPlan:
    root: object
    ast: QueryAst
    relations: tuple
    output_columns: tuple  # ((header, row key), ...)
    param_specs: dict  # name -> ("scalar", type) | ("token",) | ("list", type, n)
    operation_bound: OperationBound | None
    scaling: ScalingClassReport
    required_indexes: tuple
    created_indexes: tuple
    query_id: str

    @property
    def is_paginated(self) -> bool:
        return isinstance(self.root, LocalStop) and self.root.kind == "paginate"


# --- remote-operator matching --------------------------------------------

@dataclass
class _Section:
    stops: list
    datastops: list
    sort: Sort | None
    core: object


def _section_of(node) -> _Section:
    stops, datastops, sort = [], [], None
    cur = node
    while True:
        if isinstance(cur, Stop):
            stops.append(cur)
        elif isinstance(cur, DataStop):
            datastops.append(cur)
        elif isinstance(cur, Sort) and sort is None:
            sort = cur
        else:
            break
        cur = cur.child
    return _Section(stops, datastops, sort, cur)


def _selection_stack(node):
    """(predicates, base) for a chain of Selections; base may be anything."""
    preds = []
    cur = node
    while isinstance(cur, Selection):
        preds.append(cur.predicate)
        cur = cur.child
    return preds, cur


@dataclass
class _Match:
    node: object  # remote node, child unset
    remaining: object  # logical child to keep planning (None for leaves)
    wrappers: tuple = ()  # predicates to re-emit as LocalSelections above
    consumed_stop: Stop | None = None


def _is_bound_eq(pred) -> bool:
    return (isinstance(pred, Comparison) and pred.op == "="
            and isinstance(pred.rhs, (Literal, Parameter)))


def match_remote_operator(node, schema: Schema, notes: list) -> _Match | None:
    """Try to map the section starting at `node` onto one remote operator.

    Returns the longest match (annotations + sort + predicates + scan, or
    annotations + sort + join), or None with an explanation appended to
    `notes`."""
    section = _section_of(node)
    core = section.core
    if isinstance(core, (Selection, Scan)):
        return _match_index_scan(section, schema, notes)
    if isinstance(core, Join):
        return _match_join(section, schema, notes)
    return None


def _match_index_scan(section: _Section, schema: Schema, notes: list) -> _Match | None:
    preds, base = _selection_stack(section.core)
    if not isinstance(base, Scan):
        return None  # stack interrupted by an annotation; recursion re-anchors
    alias, table_name = base.alias, base.table
    table = schema.table(table_name)

    # Classify the stack. Predicates that cannot join the contiguous index
    # range become residuals, re-emitted as LocalSelections above the scan;
    # that is only sound when the scan's bound is data-derived (a data-stop
    # or an IN per-element cover fetches everything matching the prefix), so
    # residuals under a standard stop alone reject the match.
    eqs: list = []
    token_pred = None
    in_pred = None
    ranges: dict = {}
    residual: list = []
    eq_cols: list[str] = []
    for p in preds:
        if _is_bound_eq(p):
            if p.lhs.column in eq_cols:
                residual.append(p)
            else:
                eqs.append(p)
                eq_cols.append(p.lhs.column)
        elif isinstance(p, TokenMatch):
            if token_pred is None:
                token_pred = p
            else:
                residual.append(p)
        elif isinstance(p, InList):
            if in_pred is None:
                in_pred = p
            else:
                residual.append(p)
        elif isinstance(p, Comparison) and p.op in ("<", "<=", ">", ">=") \
                and isinstance(p.rhs, (Literal, Parameter)):
            ranges.setdefault(p.lhs.column, []).append(p)
        else:
            residual.append(p)  # col-to-col comparisons and the like
    if len(ranges) > 1:
        cols = ", ".join(sorted(ranges))
        notes.append(f"inequality predicates on {alias} touch more than one "
                     f"attribute ({cols}): non-contiguous index range")
        return None
    range_col = next(iter(ranges), None)

    # Sort keys with equality-bound columns stripped; must start with the
    # inequality attribute and use one uniform direction.
    sort_keys = []
    if section.sort is not None:
        for item in section.sort.keys:
            if item.column.table != alias:
                notes.append(f"ORDER BY {item.column.render()} is not from "
                             f"{alias}; index scan cannot satisfy it")
                return None
            if item.column.column in eq_cols:
                continue
            sort_keys.append(item)
        if sort_keys:
            directions = {k.descending for k in sort_keys}
            if len(directions) > 1:
                notes.append("mixed-direction ORDER BY is not servable by an "
                             "ascending index in either traversal direction")
                return None
            if range_col is not None and sort_keys[0].column.column != range_col:
                notes.append(f"ORDER BY must start with the inequality "
                             f"attribute {range_col} to stay contiguous")
                return None

    # Establish the bound: (count, data_derived, from_constraint) per hint.
    hints: list[tuple[int, bool, bool]] = []
    for s in section.stops:
        hints.append((s.count, False, False))
    for d in section.datastops:
        hints.append((d.count, True, d.source == "constraint"))
    if in_pred is not None:
        covered = set(eq_cols) | {in_pred.lhs.column}
        elem_bound = None
        elem_constraint = False
        if covered >= set(table.primary_key):
            elem_bound = 1
        else:
            for c in schema.constraints_for(table_name):
                if c.attributes <= covered and (elem_bound is None
                                                or c.limit < elem_bound):
                    elem_bound = c.limit
                    elem_constraint = True
        if elem_bound is None:
            notes.append(f"IN list on {alias}.{in_pred.lhs.column} has no "
                         f"per-element bound: remaining keys do not cover the "
                         f"primary key or any cardinality constraint")
            return None
        hints.append((elem_bound, True, elem_constraint))
    usable = [h for h in hints if h[1]] if residual else hints
    if not usable:
        if residual:
            notes.append(f"predicate {residual[0].render()} on {alias} cannot "
                         f"join the index range, and the scan has no "
                         f"data-derived bound to fetch past it")
        else:
            notes.append(f"scan on {alias} has no stop operator or data-stop "
                         f"bound (unbounded index scan)")
        return None
    limit_hint = min(h[0] for h in usable)
    non_constraint_min = min((h[0] for h in usable if not h[2]), default=None)
    constraint_bound = non_constraint_min is None or limit_hint < non_constraint_min

    token_col = token_pred.lhs.column if token_pred else None
    tail = [k.column.column for k in sort_keys] if sort_keys \
        else ([range_col] if range_col else [])
    eq_for_index = list(eq_cols)
    if in_pred is not None:
        eq_for_index.append(in_pred.lhs.column)
    index = _serving_index(schema, table_name, token_col, eq_for_index, tail)
    direction = "reverse" if (sort_keys and sort_keys[0].descending) else "forward"

    eq_ops = {p.lhs.column: p.rhs for p in eqs}
    ordered_eq = []
    in_col = in_pred.lhs.column if in_pred else None
    for f in index.fields:
        if f.token or f.column == in_col:
            continue
        if f.column in eq_ops:
            ordered_eq.append((f.column, eq_ops[f.column]))
    range_spec = None
    if range_col is not None:
        lows = [(p.rhs, p.op == ">") for p in ranges[range_col] if p.op in (">", ">=")]
        highs = [(p.rhs, p.op == "<") for p in ranges[range_col] if p.op in ("<", "<=")]
        range_spec = (range_col, tuple(lows), tuple(highs))

    prefix_cols = ([token_col] if token_col else []) + eq_for_index
    point = (index.covering and range_spec is None and not sort_keys
             and set(prefix_cols) >= {f.column for f in index.fields})

    scan = IndexScan(
        alias=alias, table=table_name, index=index,
        eq_fields=tuple(ordered_eq),
        token_field=(token_col, token_pred.rhs) if token_pred else None,
        range_field=range_spec,
        in_field=(in_col, in_pred.param, in_pred.length) if in_pred else None,
        limit_hint=limit_hint, direction=direction, covering=index.covering,
        point_lookup=point, constraint_bound=constraint_bound,
    )
    consumed = section.stops[0] if section.stops else None
    return _Match(scan, remaining=None, wrappers=tuple(residual),
                  consumed_stop=consumed)


def _match_join(section: _Section, schema: Schema, notes: list) -> _Match | None:
    join = section.core
    right_preds, right_base = _right_stack(join.right)
    if right_base is None:
        notes.append("join right input is not a base relation")
        return None
    right_table = schema.table(right_base.table)
    covered = {p.rhs.column for p in join.predicates}
    fk = covered >= set(right_table.primary_key)
    has_annotations = bool(section.stops or section.datastops or section.sort)

    if fk and not has_annotations:
        # Key-preserving join: one get per child tuple.
        mapping = []
        used = []
        for col in right_table.primary_key:
            pred = next(p for p in join.predicates if p.rhs.column == col)
            mapping.append((col, pred.lhs))
            used.append(pred)
        # Join equalities beyond the PK and filters on the fetched relation
        # are re-checked above the join; output stays <= child either way.
        wrappers = [p for p in join.predicates if p not in used]
        wrappers.extend(right_preds)
        node = IndexFKJoin(alias=right_base.alias, table=right_base.table,
                           key_mapping=tuple(mapping))
        return _Match(node, remaining=join.left, wrappers=tuple(wrappers))
    if fk:
        return None  # peel annotations locally; the FK join matches beneath

    # Sorted index join needs a limit hint from the annotations above.
    hints = [(s.count, False) for s in section.stops]
    hints += [(d.count, d.source == "constraint") for d in section.datastops]
    if not hints:
        notes.append(f"join into {right_base.alias} has no limit hint above it "
                     f"and its key does not cover the primary key of "
                     f"{right_base.table}")
        return None
    per_key = min(h[0] for h in hints)
    non_constraint_min = min((h[0] for h in hints if not h[1]), default=None)
    constraint_bound = non_constraint_min is None or per_key < non_constraint_min

    right_eqs = []
    for p in right_preds:
        if _is_bound_eq(p):
            right_eqs.append(p)
        else:
            notes.append(f"predicate {p.render()} on {right_base.alias} is not "
                         f"servable inside a sorted index join")
            return None
    join_cols = [p.rhs.column for p in join.predicates]
    eq_cols = [p.lhs.column for p in right_eqs]
    if len(set(join_cols + eq_cols)) != len(join_cols + eq_cols):
        notes.append("duplicate join/equality columns in sorted index join")
        return None

    sort_keys = []
    if section.sort is not None:
        for item in section.sort.keys:
            if item.column.table != right_base.alias:
                notes.append(f"ORDER BY {item.column.render()} does not come "
                             f"from the join's inner relation "
                             f"{right_base.alias}")
                return None
            if item.column.column in eq_cols or item.column.column in join_cols:
                continue
            sort_keys.append(item)
        if sort_keys and len({k.descending for k in sort_keys}) > 1:
            notes.append("mixed-direction ORDER BY is not servable by a "
                         "sorted index join")
            return None

    tail = [k.column.column for k in sort_keys]
    index = _serving_index(schema, right_base.table, None,
                           join_cols + eq_cols, tail)
    direction = "reverse" if (sort_keys and sort_keys[0].descending) else "forward"

    eq_ops = {p.lhs.column: p.rhs for p in right_eqs}
    join_map = {p.rhs.column: p.lhs for p in join.predicates}
    mapping, eq_fields = [], []
    for f in index.fields[: len(join_cols) + len(eq_cols)]:
        if f.column in join_map:
            mapping.append((f.column, join_map[f.column]))
        else:
            eq_fields.append((f.column, eq_ops[f.column]))

    node = SortedIndexJoin(
        alias=right_base.alias, table=right_base.table, index=index,
        key_mapping=tuple(mapping), eq_fields=tuple(eq_fields),
        sort_keys=tuple(sort_keys), per_key_limit=per_key,
        direction=direction, covering=index.covering,
        constraint_bound=constraint_bound,
    )
    consumed = section.stops[0] if section.stops else None
    return _Match(node, remaining=join.left, consumed_stop=consumed)


def _right_stack(node):
    preds = []
    cur = node
    while isinstance(cur, (Selection, DataStop)):
        if isinstance(cur, Selection):
            preds.append(cur.predicate)
        cur = cur.child
    if isinstance(cur, Scan):
        return preds, cur
    return preds, None


def _serving_index(schema: Schema, table_name: str, token_col, eq_cols, tail) -> IndexDef:
    """Find an existing index serving (token, equality set, ordered tail), or
    synthesize one. Covering (primary) indexes win ties to avoid the extra
    dereference round trip."""
    table = schema.table(table_name)
    candidates = []
    for idx in schema.indexes_for(table_name):
        if _serves(idx, token_col, eq_cols, tail):
            candidates.append(idx)
    if candidates:
        candidates.sort(key=lambda i: (not i.covering, len(i.fields)))
        return candidates[0]
    fields: list[IndexField] = []
    if token_col is not None:
        fields.append(IndexField(token_col, token=True))
    seen = set()
    for col in list(eq_cols) + list(tail):
        if col not in seen:
            fields.append(IndexField(col))
            seen.add(col)
    for col in table.primary_key:
        if col not in seen:
            fields.append(IndexField(col))
            seen.add(col)
    return IndexDef(table_name, tuple(fields), covering=False)


def _serves(index: IndexDef, token_col, eq_cols, tail) -> bool:
    fields = list(index.fields)
    pos = 0
    if token_col is not None:
        if not fields or not fields[0].token or fields[0].column != token_col:
            return False
        pos = 1
    elif fields and fields[0].token:
        return False
    eq_set = set(eq_cols)
    lead = fields[pos : pos + len(eq_set)]
    if len(lead) != len(eq_set) or any(f.token for f in lead):
        return False
    if {f.column for f in lead} != eq_set:
        return False
    pos += len(eq_set)
    for col in tail:
        if pos >= len(fields) or fields[pos].token or fields[pos].column != col:
            return False
        pos += 1
    return True


# --- plan generation -----------------------------------------------------

def plan_generate(logical_plan, schema: Schema, ast: QueryAst):
    """Recursive descent: remote match first (wrapping a consumed standard
    stop back as a LocalStop), local operator otherwise, error when neither
    applies."""
    notes: list[str] = []

    def generate(node):
        if node is None:
            return None
        match = match_remote_operator(node, schema, notes)
        if match is not None:
            match.node.child = generate(match.remaining)
            out = match.node
            for pred in reversed(match.wrappers):
                out = LocalSelection(pred, out)
            if match.consumed_stop is not None:
                out = LocalStop(match.consumed_stop.count,
                                match.consumed_stop.kind, out)
            return out
        if isinstance(node, Stop):
            return LocalStop(node.count, node.kind, generate(node.child))
        if isinstance(node, Sort):
            return LocalSort(node.keys, generate(node.child))
        if isinstance(node, Selection):
            return LocalSelection(node.predicate, generate(node.child))
        if isinstance(node, DataStop):
            return generate(node.child)
        if isinstance(node, Aggregate):
            return LocalAggregate(node.items, node.group_keys, generate(node.child))
        alias = node.alias if isinstance(node, Scan) else None
        raise NotScaleIndependentError(
            "Not scale-independent: " + (notes[-1] if notes else
                                         "unbounded plan section"),
            section=node, notes=notes, logical_plan=logical_plan, ast=ast,
            schema=schema, alias=alias)

    return generate(logical_plan)


def _assign_ids(root) -> None:
    for i, node in enumerate(_preorder(root)):
        node.node_id = f"n{i}"


def _preorder(node):
    if node is None:
        return
    yield node
    yield from _preorder(node.child)


class _Unbounded(Exception):
    pass


def compute_operation_bound(root) -> OperationBound | None:
    """Static worst-case request and tuple counts, per the per-operator rules
    (one range per scan plus dereference gets when non-covering; one get per
    child tuple for FK joins; one range per child tuple for sorted joins)."""
    rows = []

    def visit(node):
        if node is None:
            return 0
        child_out = visit(node.child)
        if isinstance(node, IndexScan):
            if node.limit_hint is None:
                raise _Unbounded()
            batch = node.in_field[2] if node.in_field else 1
            requests = batch * (1 + (0 if node.covering else node.limit_hint))
            tuples = batch * node.limit_hint
            out = batch * node.limit_hint
        elif isinstance(node, IndexFKJoin):
            requests = child_out
            tuples = child_out
            out = child_out
        elif isinstance(node, SortedIndexJoin):
            requests = child_out * (1 + (0 if node.covering else node.per_key_limit))
            tuples = child_out * node.per_key_limit
            out = child_out * node.per_key_limit
        else:
            requests = 0
            tuples = 0
            out = child_out
            if isinstance(node, LocalStop):
                out = min(node.count, child_out)
        node.output_bound = out
        rows.append(PerOperatorBound(node.node_id, node.label, requests, tuples))
        return out

    try:
        visit(root)
    except _Unbounded:
        return None
    rows.reverse()  # top-down reading order
    return OperationBound(sum(r.requests for r in rows),
                          sum(r.tuples for r in rows), tuple(rows))


def select_indexes(root, schema: Schema):
    """All indexes the plan touches, plus the subset not yet registered."""
    used, created = [], []
    for node in _preorder(root):
        if isinstance(node, (IndexScan, SortedIndexJoin)):
            if node.index not in used:
                used.append(node.index)
            if not schema.has_index(node.index) and node.index not in created:
                created.append(node.index)
        elif isinstance(node, IndexFKJoin):
            primary = schema.primary_index(node.table)
            if primary not in used:
                used.append(primary)
    return tuple(used), tuple(created)


# --- compilation pipeline ------------------------------------------------

def compile_query(source, schema: Schema):
    """Full pipeline: parse (if text), logical plan, stop phase, physical
    generation, operation bound, scaling class. Raises
    NotScaleIndependentError when no bounded plan exists."""
    ast = parse_query(source) if isinstance(source, str) else source
    ast = resolve_ast(ast, schema)
    logical = find_linear_join_ordering(ast, schema)
    logical = predicate_push_down(logical)
    logical = insert_data_stops(logical, schema)
    logical = stop_push_down(logical, schema)
    root = plan_generate(logical, schema, ast)
    _assign_ids(root)
    bound = compute_operation_bound(root)
    used, created = select_indexes(root, schema)
    scaling = _classify(root)
    return _bundle(root, ast, schema, bound, scaling, used, created)


def compile_unsafe_scan(source, schema: Schema, alias: str, attrs):
    """Cost-based-style fallback: an unbounded index scan over `attrs` of
    `alias` with every other clause evaluated locally. For comparison
    experiments only; the plan has no operation bound."""
    ast = parse_query(source) if isinstance(source, str) else source
    ast = resolve_ast(ast, schema)
    rel = next((r for r in ast.relations if r.alias == alias), None)
    if rel is None:
        raise PlanError(f"unknown relation {alias}")
    if len(ast.relations) != 1:
        raise PlanError("unsafe scan supports single-relation queries")
    attrs = list(attrs)
    eq_preds = {p.lhs.column: p for p in ast.predicates
                if _is_bound_eq(p) and p.lhs.column in attrs}
    if set(eq_preds) != set(attrs):
        raise PlanError(f"unsafe scan needs equality predicates on {attrs}")
    index = _serving_index(schema, rel.table, None, attrs, [])
    ordered_eq = []
    for f in index.fields:
        if f.column in eq_preds:
            ordered_eq.append((f.column, eq_preds[f.column].rhs))
    root: object = IndexScan(
        alias=alias, table=rel.table, index=index, eq_fields=tuple(ordered_eq),
        token_field=None, range_field=None, in_field=None,
        limit_hint=None, direction="forward", covering=index.covering)
    for p in ast.predicates:
        if p.lhs.column in eq_preds and _is_bound_eq(p):
            continue
        root = LocalSelection(p, root)
    if ast.order_by:
        root = LocalSort(ast.order_by, root)
    if ast.limit is not None:
        root = LocalStop(ast.limit.count, ast.limit.kind, root)
    _assign_ids(root)
    used, created = select_indexes(root, schema)
    scaling = ScalingClassReport("unsafe", "unbounded index scan (unsafe mode)")
    return _bundle(root, ast, schema, None, scaling, used, created)


def _classify(root) -> ScalingClassReport:
    constrained = [n for n in _preorder(root)
                   if isinstance(n, (IndexScan, SortedIndexJoin))
                   and n.constraint_bound]
    if constrained:
        names = sorted({f"{n.table}" for n in constrained})
        return ScalingClassReport(
            "II", f"bounded through cardinality constraints on "
                  f"{', '.join(names)}")
    return ScalingClassReport(
        "I", "bounded by primary-key equality and fixed limits only")


def _bundle(root, ast, schema, bound, scaling, used, created) -> PhysicalPlan:
    output_columns = _output_columns(ast, schema)
    params = _param_specs(ast, schema)
    doc = plan_to_dict(root)
    digest = hashlib.sha256(
        json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
    return PhysicalPlan(root=root, ast=ast, relations=ast.relations,
                        output_columns=tuple(output_columns),
                        param_specs=params, operation_bound=bound,
                        scaling=scaling, required_indexes=used,
                        created_indexes=created, query_id=digest)


def _output_columns(ast: QueryAst, schema: Schema):
    table_of = {r.alias: r.table for r in ast.relations}
    cols = []
    for item in ast.projections:
        if isinstance(item, Star):
            aliases = [item.table] if item.table else [r.alias for r in ast.relations]
            for alias in aliases:
                for col in schema.table(table_of[alias]).columns:
                    cols.append((f"{alias}.{col.name}", f"{alias}.{col.name}"))
        elif isinstance(item, ColumnRef):
            key = f"{item.table}.{item.column}"
            cols.append((key, key))
        elif isinstance(item, AggregateItem):
            cols.append((item.render(), item.render()))
    return cols


def _param_specs(ast: QueryAst, schema: Schema):
    table_of = {r.alias: r.table for r in ast.relations}
    specs = {}
    for pred in ast.predicates:
        if isinstance(pred, Comparison) and isinstance(pred.rhs, Parameter):
            col = schema.table(table_of[pred.lhs.table]).column(pred.lhs.column)
            specs[pred.rhs.name] = ("scalar", col.col_type)
        elif isinstance(pred, TokenMatch) and isinstance(pred.rhs, Parameter):
            specs[pred.rhs.name] = ("token",)
        elif isinstance(pred, InList):
            col = schema.table(table_of[pred.lhs.table]).column(pred.lhs.column)
            specs[pred.param.name] = ("list", col.col_type, pred.length)
    return specs


# --- serialization and explain -------------------------------------------

def _operand_doc(op):
    if isinstance(op, Literal):
        return {"literal": op.value}
    if isinstance(op, Parameter):
        return {"param": op.name}
    if isinstance(op, ColumnRef):
        return {"column": op.render()}
    raise TypeError(op)


def plan_to_dict(root) -> dict:
    def node_doc(node):
        if node is None:
            return None
        doc: dict = {"op": node.label, "id": node.node_id}
        if isinstance(node, IndexScan):
            doc.update({
                "relation": node.alias, "table": node.table,
                "index": node.index.render(), "covering": node.covering,
                "eq": [[c, _operand_doc(o)] for c, o in node.eq_fields],
                "limit_hint": node.limit_hint, "direction": node.direction,
                "point_lookup": node.point_lookup,
            })
            if node.token_field:
                doc["token"] = [node.token_field[0], _operand_doc(node.token_field[1])]
            if node.range_field:
                col, lows, highs = node.range_field
                doc["range"] = {
                    "column": col,
                    "low": [[_operand_doc(o), strict] for o, strict in lows],
                    "high": [[_operand_doc(o), strict] for o, strict in highs]}
            if node.in_field:
                doc["in"] = {"column": node.in_field[0],
                             "param": node.in_field[1].name,
                             "length": node.in_field[2]}
        elif isinstance(node, IndexFKJoin):
            doc.update({"relation": node.alias, "table": node.table,
                        "key": [[c, ref.render()] for c, ref in node.key_mapping]})
        elif isinstance(node, SortedIndexJoin):
            doc.update({
                "relation": node.alias, "table": node.table,
                "index": node.index.render(), "covering": node.covering,
                "key": [[c, ref.render()] for c, ref in node.key_mapping],
                "eq": [[c, _operand_doc(o)] for c, o in node.eq_fields],
                "sort": [k.render() for k in node.sort_keys],
                "per_key_limit": node.per_key_limit,
                "direction": node.direction,
            })
        elif isinstance(node, LocalSelection):
            doc["predicate"] = node.predicate.render()
        elif isinstance(node, LocalSort):
            doc["keys"] = [k.render() for k in node.keys]
        elif isinstance(node, LocalStop):
            doc.update({"count": node.count, "kind": node.kind})
        elif isinstance(node, LocalAggregate):
            doc.update({"aggregates": [i.render() for i in node.items],
                        "group_by": [c.render() for c in node.group_keys]})
        doc["child"] = node_doc(node.child)
        return doc

    return node_doc(root)


def plan_json(bundle: PhysicalPlan) -> str:
    doc = {
        "version": 1,
        "query_id": bundle.query_id,
        "plan": plan_to_dict(bundle.root),
        "scaling_class": bundle.scaling.klass,
        "output_columns": [list(c) for c in bundle.output_columns],
        "required_indexes": [i.render() for i in bundle.required_indexes],
    }
    if bundle.operation_bound is not None:
        ob = bundle.operation_bound
        doc["operation_bound"] = {
            "max_requests": ob.max_requests, "max_tuples": ob.max_tuples,
            "per_operator": [{"id": r.node_id, "operator": r.operator,
                              "requests": r.requests, "tuples": r.tuples}
                             for r in ob.per_operator]}
    return json.dumps(doc, sort_keys=True, indent=2)


def describe_node(node) -> str:
    if isinstance(node, IndexScan):
        bits = [f"{node.table} via {node.index.render()}"]
        if node.eq_fields or node.token_field or node.in_field:
            parts = []
            if node.token_field:
                parts.append(f"token({node.token_field[0]})")
            parts.extend(c for c, _ in node.eq_fields)
            if node.in_field:
                parts.append(f"{node.in_field[0]} IN[{node.in_field[2]}]")
            bits.append("prefix=(" + ", ".join(parts) + ")")
        if node.range_field:
            bits.append(f"range on {node.range_field[0]}")
        bits.append("hint=" + ("unbounded" if node.limit_hint is None
                               else str(node.limit_hint)))
        if node.direction == "reverse":
            bits.append("desc")
        if node.point_lookup:
            bits.append("point")
        return f"IndexScan({', '.join(bits)})"
    if isinstance(node, IndexFKJoin):
        keys = ", ".join(f"{ref.render()}={node.alias}.{c}"
                         for c, ref in node.key_mapping)
        return f"IndexFKJoin({node.table} on {keys})"
    if isinstance(node, SortedIndexJoin):
        keys = ", ".join(f"{ref.render()}={node.alias}.{c}"
                         for c, ref in node.key_mapping)
        bits = [f"{node.table} via {node.index.render()}", keys,
                f"per_key<={node.per_key_limit}"]
        if node.sort_keys:
            bits.append("sort=" + ", ".join(k.render() for k in node.sort_keys))
        if node.direction == "reverse":
            bits.append("desc")
        return f"SortedIndexJoin({', '.join(bits)})"
    if isinstance(node, LocalSelection):
        return f"LocalSelection({node.predicate.render()})"
    if isinstance(node, LocalSort):
        return "LocalSort(" + ", ".join(k.render() for k in node.keys) + ")"
    if isinstance(node, LocalStop):
        return f"LocalStop({node.count}, {node.kind})"
    if isinstance(node, LocalAggregate):
        items = ", ".join(i.render() for i in node.items)
        return f"LocalAggregate({items})"
    return node.label


def explain(bundle: PhysicalPlan) -> str:
    per_op = {}
    if bundle.operation_bound is not None:
        per_op = {r.node_id: r for r in bundle.operation_bound.per_operator}
    lines = []
    depth = 0
    for node in _preorder(bundle.root):
        suffix = ""
        row = per_op.get(node.node_id)
        if row is not None and isinstance(node, REMOTE_NODES):
            suffix = (f"  [requests<={row.requests} tuples<={row.tuples}"
                      f" out<={node.output_bound}]")
        elif node.output_bound is not None:
            suffix = f"  [out<={node.output_bound}]"
        lines.append("  " * depth + describe_node(node) + suffix)
        depth += 1
    if bundle.operation_bound is not None:
        ob = bundle.operation_bound
        lines.append(f"-- bound: requests<={ob.max_requests} "
                     f"tuples<={ob.max_tuples}")
    else:
        lines.append("-- bound: none (unsafe plan)")
    lines.append(f"-- class: {bundle.scaling.klass} ({bundle.scaling.reason})")
    if bundle.created_indexes:
        for idx in bundle.created_indexes:
            lines.append(f"-- requires new index: {idx.render()}")
    return "\n".join(lines)
