"""Logical planning: name resolution, linear join ordering, predicate
pushdown. The output is a left-deep operator tree that the stop phase and
the physical planner rewrite further."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .catalog import Schema, SchemaError
from .query import (ColumnRef, Comparison, InList, Literal, Parameter, QueryAst,
                    TokenMatch)


class PlanError(ValueError):
    """Query cannot be planned (disconnected joins, unknown columns...)."""


# --- plan nodes ----------------------------------------------------------

@dataclass(frozen=True)
class Scan:
    alias: str
    table: str


@dataclass(frozen=True)
class Selection:
    predicate: object
    child: object


@dataclass(frozen=True)
class Join:
    predicates: tuple  # Comparison(lhs in left subtree, rhs ColumnRef in right)
    left: object
    right: object


@dataclass(frozen=True)
class Sort:
    keys: tuple  # of OrderItem
    child: object


@dataclass(frozen=True)
class Stop:
    count: int
    kind: str  # "limit" | "paginate"
    child: object


@dataclass(frozen=True)
class DataStop:
    """Annotation: this section yields at most `count` tuples because of a
    schema cardinality constraint (or primary-key uniqueness when count=1)."""
    count: int
    causing_attributes: frozenset[str]
    alias: str
    source: str  # "pk" | "constraint"
    child: object


@dataclass(frozen=True)
class Aggregate:
    items: tuple  # AggregateItem
    group_keys: tuple  # ColumnRef
    child: object


def aliases_under(node) -> frozenset[str]:
    if isinstance(node, Scan):
        return frozenset([node.alias])
    if isinstance(node, Join):
        return aliases_under(node.left) | aliases_under(node.right)
    return aliases_under(node.child)


def predicate_aliases(pred) -> set[str]:
    out = set()
    for ref in predicate_columns(pred):
        out.add(ref.table)
    return out


def predicate_columns(pred) -> list[ColumnRef]:
    if isinstance(pred, Comparison):
        refs = [pred.lhs]
        if isinstance(pred.rhs, ColumnRef):
            refs.append(pred.rhs)
        return refs
    if isinstance(pred, (TokenMatch, InList)):
        return [pred.lhs]
    raise TypeError(f"unknown predicate {pred!r}")


def is_join_predicate(pred) -> bool:
    return (isinstance(pred, Comparison) and pred.op == "="
            and isinstance(pred.rhs, ColumnRef)
            and pred.rhs.table != pred.lhs.table)


def is_bound_equality(pred) -> bool:
    """Equality against a literal or parameter (what data-stops key on)."""
    return (isinstance(pred, Comparison) and pred.op == "="
            and isinstance(pred.rhs, (Literal, Parameter)))


# --- name resolution -----------------------------------------------------

def resolve_ast(ast: QueryAst, schema: Schema) -> QueryAst:
    """Qualify every column reference with its relation alias and validate
    all names against the schema."""
    alias_tables: dict[str, str] = {}
    for rel in ast.relations:
        schema.table(rel.table)
        alias_tables[rel.alias] = rel.table

    def resolve(ref: ColumnRef) -> ColumnRef:
        if ref.table is not None:
            if ref.table not in alias_tables:
                raise PlanError(f"unknown relation {ref.table} in {ref.render()}")
            table = schema.table(alias_tables[ref.table])
            if not table.has_column(ref.column):
                raise PlanError(f"unknown column {ref.render()}")
            return ref
        owners = [a for a, t in alias_tables.items()
                  if schema.table(t).has_column(ref.column)]
        if not owners:
            raise PlanError(f"unknown column {ref.column}")
        if len(owners) > 1:
            raise PlanError(f"ambiguous column {ref.column} "
                            f"(in {', '.join(sorted(owners))})")
        return ColumnRef(owners[0], ref.column)

    def resolve_pred(pred):
        if isinstance(pred, Comparison):
            rhs = resolve(pred.rhs) if isinstance(pred.rhs, ColumnRef) else pred.rhs
            return Comparison(resolve(pred.lhs), pred.op, rhs)
        if isinstance(pred, TokenMatch):
            lhs = resolve(pred.lhs)
            col = schema.table(alias_tables[lhs.table]).column(lhs.column)
            if col.col_type != "string":
                raise PlanError(f"LIKE requires a string column, {lhs.render()} "
                                f"is {col.col_type}")
            return TokenMatch(lhs, pred.rhs)
        if isinstance(pred, InList):
            return InList(resolve(pred.lhs), pred.param, pred.length)
        raise TypeError(pred)

    def resolve_proj(item):
        from .query import AggregateItem, Star
        if isinstance(item, Star):
            if item.table is not None and item.table not in alias_tables:
                raise PlanError(f"unknown relation {item.table} in {item.render()}")
            return item
        if isinstance(item, ColumnRef):
            return resolve(item)
        if isinstance(item, AggregateItem):
            arg = item.arg if isinstance(item.arg, Star) else resolve(item.arg)
            return AggregateItem(item.fn, arg)
        raise TypeError(item)

    from .query import OrderItem
    return replace(
        ast,
        projections=tuple(resolve_proj(p) for p in ast.projections),
        predicates=tuple(resolve_pred(p) for p in ast.predicates),
        group_by=tuple(resolve(c) for c in ast.group_by),
        order_by=tuple(OrderItem(resolve(o.column), o.descending)
                       for o in ast.order_by),
    )


# --- join ordering -------------------------------------------------------

def bound_equality_attrs(ast: QueryAst, alias: str) -> frozenset[str]:
    return frozenset(p.lhs.column for p in ast.predicates
                     if is_bound_equality(p) and p.lhs.table == alias)


def _access_score(ast: QueryAst, schema: Schema, rel) -> int:
    """Lower is better: 0 full-PK equality, 1 constraint cover, 2 stop plus
    some sargable predicate or the leading sort key, 3 nothing."""
    table = schema.table(rel.table)
    bound = bound_equality_attrs(ast, rel.alias)
    if bound >= set(table.primary_key):
        return 0
    for c in schema.constraints_for(rel.table):
        if c.attributes <= bound:
            return 1
    if ast.limit is not None:
        has_pred = any(rel.alias in predicate_aliases(p) for p in ast.predicates)
        owns_sort = bool(ast.order_by) and ast.order_by[0].column.table == rel.alias
        if has_pred or owns_sort or len(ast.relations) == 1:
            return 2
    return 3


def find_linear_join_ordering(ast: QueryAst, schema: Schema) -> object:
    """Resolve names and build the initial left-deep plan.

    The leftmost relation is the one with the best bound access path
    (FROM-clause order breaks ties); each following relation must connect to
    the already-joined set through a join-equality predicate.
    """
    ast = resolve_ast(ast, schema)
    join_preds = [p for p in ast.predicates if is_join_predicate(p)]
    local_preds = [p for p in ast.predicates if not is_join_predicate(p)]

    order = [rel for rel in ast.relations]
    order.sort(key=lambda rel: (_access_score(ast, schema, rel),
                                ast.relations.index(rel)))
    first = order[0]

    chosen = [first]
    remaining = [r for r in ast.relations if r is not first]
    consumed_joins: set[int] = set()
    tree: object = Scan(first.alias, first.table)
    while remaining:
        placed = None
        for rel in remaining:  # FROM order among the connected
            edge = [p for p in join_preds
                    if predicate_aliases(p) <= {c.alias for c in chosen} | {rel.alias}
                    and rel.alias in predicate_aliases(p)]
            if edge:
                placed = (rel, edge)
                break
        if placed is None:
            names = ", ".join(r.alias for r in remaining)
            raise PlanError(f"disconnected join graph: no join predicate links "
                            f"{names} to the other relations (cross products "
                            f"are not supported)")
        rel, edge = placed
        oriented = tuple(_orient(p, rel.alias) for p in edge)
        tree = Join(oriented, tree, Scan(rel.alias, rel.table))
        chosen.append(rel)
        remaining.remove(rel)

    for pred in local_preds:
        tree = Selection(pred, tree)
    if ast.has_aggregates:
        tree = Aggregate(tuple(p for p in ast.projections), ast.group_by, tree)
    if ast.order_by:
        tree = Sort(ast.order_by, tree)
    if ast.limit is not None:
        tree = Stop(ast.limit.count, ast.limit.kind, tree)
    return tree


def _orient(pred: Comparison, right_alias: str) -> Comparison:
    """Normalize a join predicate so rhs is the column of the new (right)
    relation."""
    if pred.rhs.table == right_alias:
        return pred
    return Comparison(pred.rhs, "=", pred.lhs)


# --- predicate pushdown --------------------------------------------------

def predicate_push_down(plan) -> object:
    """Sink every single-relation predicate to directly above its scan.

    Multi-relation predicates (join equalities live at Join nodes already;
    cross-relation inequalities stay as Selections) are left in place.
    """
    pending: list = []

    def strip(node):
        if isinstance(node, Selection):
            if len(predicate_aliases(node.predicate)) == 1:
                pending.append(node.predicate)
                return strip(node.child)
            return Selection(node.predicate, strip(node.child))
        if isinstance(node, Join):
            return Join(node.predicates, strip(node.left), strip(node.right))
        if isinstance(node, Scan):
            return node
        return replace(node, child=strip(node.child))

    out = strip(plan)
    for pred in pending:  # forward order keeps the original stacking
        out = _attach(out, pred)
    return out


def _attach(node, pred):
    """Attach a pending predicate above the scan of its relation."""
    target = next(iter(predicate_aliases(pred)))
    if isinstance(node, Scan):
        if node.alias == target:
            return Selection(pred, node)
        return node
    if isinstance(node, Join):
        if target in aliases_under(node.right):
            return Join(node.predicates, node.left, _attach(node.right, pred))
        return Join(node.predicates, _attach(node.left, pred), node.right)
    return replace(node, child=_attach(node.child, pred))


# --- pretty printing -----------------------------------------------------

def _describe(node) -> str:
    if isinstance(node, Scan):
        if node.alias == node.table:
            return f"Scan({node.table})"
        return f"Scan({node.table} AS {node.alias})"
    if isinstance(node, Selection):
        return f"Selection({node.predicate.render()})"
    if isinstance(node, Join):
        preds = " AND ".join(p.render() for p in node.predicates)
        return f"Join({preds})"
    if isinstance(node, Sort):
        keys = ", ".join(k.render() for k in node.keys)
        return f"Sort({keys})"
    if isinstance(node, Stop):
        return f"Stop({node.count}, {node.kind})"
    if isinstance(node, DataStop):
        attrs = ", ".join(sorted(node.causing_attributes))
        return f"DataStop({node.count}, {node.alias}({attrs}))"
    if isinstance(node, Aggregate):
        items = ", ".join(i.render() for i in node.items)
        return f"Aggregate({items})"
    return type(node).__name__


def pretty(plan, highlight=None) -> str:
    """Indented operator tree; nodes in `highlight` get a >>> marker."""
    highlight = highlight or set()
    lines: list[str] = []

    def walk(node, depth):
        marker = ">>> " if id(node) in highlight else ""
        lines.append("  " * depth + marker + _describe(node))
        if isinstance(node, Join):
            walk(node.left, depth + 1)
            walk(node.right, depth + 1)
        elif not isinstance(node, Scan):
            walk(node.child, depth + 1)

    walk(plan, 0)
    return "\n".join(lines)
