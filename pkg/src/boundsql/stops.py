"""Optimizer phase one: insert data-stop annotations from primary-key and
cardinality-constraint coverage, then push stop operators down.

A data-stop may pass any predicate other than the ones that caused it: the
constraint bounds what can exist in the database, so later filters cannot
make the section exceed it. A standard stop (LIMIT/PAGINATE) is reductive
semantics, so it never passes a Selection; it may sink into the left input
of a key-preserving join (join equalities covering the right relation's
full primary key, i.e. at most one match per left tuple) as a copy, with an
adjacent Sort moving along when all its keys come from the left input.
"""

from __future__ import annotations

from dataclasses import replace

from .catalog import Schema
from .logical import (DataStop, Join, Scan, Selection, Sort, Stop,
                      aliases_under, is_bound_equality)


def insert_data_stops(plan, schema: Schema):
    """For each relation whose literal/parameter equality attributes cover
    the full primary key, annotate with DataStop(1); otherwise, if they
    cover some constraint's attribute set, annotate with the smallest
    matching limit. Runs after predicate pushdown."""

    def walk(node):
        if isinstance(node, Scan):
            return node
        if isinstance(node, Join):
            return Join(node.predicates, walk(node.left), walk(node.right))
        if isinstance(node, Selection):
            alias = _stack_owner(node)
            if alias is not None:
                annotated = _annotate_stack(node, alias, schema)
                if annotated is not None:
                    return annotated
                return node
            return Selection(node.predicate, walk(node.child))
        return replace(node, child=walk(node.child))

    return walk(plan)


def _stack_owner(node):
    """Alias of the scan under a pure Selection stack, else None."""
    cur = node
    while isinstance(cur, Selection):
        cur = cur.child
    return cur.alias if isinstance(cur, Scan) else None


def _stack_predicates(node):
    preds = []
    cur = node
    while isinstance(cur, Selection):
        preds.append(cur.predicate)
        cur = cur.child
    return preds, cur


def _annotate_stack(node, alias: str, schema: Schema):
    preds, scan = _stack_predicates(node)
    table = schema.table(scan.table)
    bound = frozenset(p.lhs.column for p in preds
                      if is_bound_equality(p) and p.lhs.table == alias)
    if bound >= set(table.primary_key):
        return DataStop(1, frozenset(table.primary_key), alias, "pk", node)
    best = None
    for c in schema.constraints_for(scan.table):
        if c.attributes <= bound and (best is None or c.limit < best.limit):
            best = c
    if best is not None:
        return DataStop(best.limit, best.attributes, alias, "constraint", node)
    return None


def stop_push_down(plan, schema: Schema):
    """Push DataStops past non-causing selections and sink standard stops
    into key-preserving joins. Pure tree rewrite."""
    return _push_standard_stops(_push_data_stops(plan), schema)


def _push_data_stops(node):
    if isinstance(node, Scan):
        return node
    if isinstance(node, Join):
        return Join(node.predicates, _push_data_stops(node.left),
                    _push_data_stops(node.right))
    if isinstance(node, DataStop):
        lowered = _sink_datastop(node)
        if lowered is not None:
            return lowered
    return replace(node, child=_push_data_stops(node.child))


def _sink_datastop(ds: DataStop):
    """Reorder the selection stack under a DataStop so causing predicates sit
    directly under it and everything else floats above it."""
    preds, base = _stack_predicates(ds.child)
    if not isinstance(base, Scan):
        return None
    causing = [p for p in preds
               if is_bound_equality(p) and p.lhs.column in ds.causing_attributes]
    others = [p for p in preds if p not in causing]
    inner = base
    for p in reversed(causing):
        inner = Selection(p, inner)
    out = DataStop(ds.count, ds.causing_attributes, ds.alias, ds.source, inner)
    for p in reversed(others):
        out = Selection(p, out)
    return out


def _push_standard_stops(node, schema: Schema):
    if isinstance(node, Scan):
        return node
    if isinstance(node, Join):
        return Join(node.predicates, _push_standard_stops(node.left, schema),
                    _push_standard_stops(node.right, schema))
    if isinstance(node, Stop):
        return Stop(node.count, node.kind, _sink_stop(node, schema))
    return replace(node, child=_push_standard_stops(node.child, schema))


def _sink_stop(stop: Stop, schema: Schema):
    """Copy a standard stop (and move an eligible Sort) into the left inputs
    of key-preserving joins. The original stop stays at the top, so result
    truncation never depends on referential integrity."""
    child = stop.child
    sort = child if isinstance(child, Sort) else None
    below = sort.child if sort is not None else child
    rewritten = _descend(stop, sort, below, schema)
    if rewritten is below:
        return _push_standard_stops(child, schema) if not isinstance(child, Sort) \
            else Sort(sort.keys, _push_standard_stops(below, schema))
    return rewritten


def _descend(stop: Stop, sort, node, schema: Schema):
    if not (isinstance(node, Join) and _is_key_preserving(node, schema)):
        return node
    if sort is not None:
        left_aliases = aliases_under(node.left)
        if not all(k.column.table in left_aliases for k in sort.keys):
            return node
    inner = _descend(stop, sort, node.left, schema)
    if inner is node.left:
        if sort is not None:
            inner = Sort(sort.keys, inner)
        inner = Stop(stop.count, "limit", inner)
    return Join(node.predicates, inner, _push_standard_stops(node.right, schema))


def _is_key_preserving(join: Join, schema: Schema) -> bool:
    right = join.right
    while isinstance(right, (Selection, DataStop)):
        right = right.child
    if not isinstance(right, Scan):
        return False
    covered = {p.rhs.column for p in join.predicates}
    return covered >= set(schema.table(right.table).primary_key)
