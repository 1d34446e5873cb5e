"""Schema catalog: DDL parsing, cardinality constraints, index registry.

The DDL dialect is plain CREATE TABLE plus one extension clause,
`CARDINALITY LIMIT <n> (<attrs>)`, which declares the maximum number of
tuples that may share one combination of values for the named attributes.
Schemas are immutable; `register_index` returns a new Schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .keycodec import COLUMN_TYPES
from .lexer import ParseError, TokenStream, tokenize

DEFAULT_STRING_LEN = 255

_TYPE_ALIASES = {
    "INT": "int64", "INTEGER": "int64", "INT64": "int64", "BIGINT": "int64",
    "STRING": "string", "TEXT": "string", "VARCHAR": "string",
    "BOOLEAN": "boolean", "BOOL": "boolean",
    "TIMESTAMP": "timestamp",
}


class SchemaError(ValueError):
    """Schema-level validation failure (unknown column, bad constraint...)."""


@dataclass(frozen=True)
class Column:
    name: str
    col_type: str
    max_len: int = 0  # strings only: declared max character count

    @property
    def max_encoded_size(self) -> int:
        if self.col_type in ("int64", "timestamp"):
            return 8
        if self.col_type == "boolean":
            return 1
        # worst case: every char escapes to 2 bytes in a 4-byte codepoint
        return self.max_len * 4 + 1


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[Column, ...]
    primary_key: tuple[str, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column in table {self.name}")
        if not self.primary_key:
            raise SchemaError(f"table {self.name} has no primary key")
        for col in self.primary_key:
            if col not in names:
                raise SchemaError(f"primary key column {col} not in table {self.name}")

    def column(self, name: str) -> Column:
        for col in self.columns:
            if col.name == name:
                return col
        raise SchemaError(f"unknown column {name} in table {self.name}")

    def has_column(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def max_tuple_size(self) -> int:
        """Upper bound on the serialized record size, used as the model beta."""
        return sum(c.max_encoded_size + 2 for c in self.columns)


@dataclass(frozen=True)
class CardinalityConstraint:
    table: str
    attributes: frozenset[str]
    limit: int


@dataclass(frozen=True)
class IndexField:
    column: str
    token: bool = False

    def render(self) -> str:
        return f"token({self.column})" if self.token else self.column


@dataclass(frozen=True)
class IndexDef:
    table: str
    fields: tuple[IndexField, ...]
    covering: bool = False

    def render(self) -> str:
        inner = ", ".join(f.render() for f in self.fields)
        return f"{self.table}({inner})"

    @property
    def plain_columns(self) -> tuple[str, ...]:
        return tuple(f.column for f in self.fields if not f.token)


@dataclass(frozen=True)
class Schema:
    tables: dict
    constraints: tuple[CardinalityConstraint, ...]
    indexes: tuple[IndexDef, ...]

    def table(self, name: str) -> TableDef:
        try:
            return self.tables[name]
        except KeyError:
            raise SchemaError(f"unknown table {name}") from None

    def constraints_for(self, table: str) -> list[CardinalityConstraint]:
        return [c for c in self.constraints if c.table == table]

    def indexes_for(self, table: str) -> list[IndexDef]:
        return [i for i in self.indexes if i.table == table]

    def primary_index(self, table: str) -> IndexDef:
        pk = self.table(table).primary_key
        for idx in self.indexes_for(table):
            if idx.covering and idx.fields == tuple(IndexField(c) for c in pk):
                return idx
        raise SchemaError(f"missing primary index for {table}")

    def has_index(self, index: IndexDef) -> bool:
        return any(i.table == index.table and i.fields == index.fields
                   for i in self.indexes)

    def with_constraint_limit(self, table: str, attributes, limit: int) -> "Schema":
        """Copy with the matching constraint's limit replaced (or added)."""
        attrs = frozenset(attributes)
        out = []
        found = False
        for c in self.constraints:
            if c.table == table and c.attributes == attrs:
                out.append(replace(c, limit=limit))
                found = True
            else:
                out.append(c)
        if not found:
            _check_constraint(self.table(table), attrs, limit)
            out.append(CardinalityConstraint(table, attrs, limit))
        schema = Schema(self.tables, tuple(out), self.indexes)
        return _ensure_support_indexes(schema)


def _check_constraint(table: TableDef, attrs: frozenset[str], limit: int) -> None:
    if not attrs:
        raise SchemaError(f"empty cardinality constraint on {table.name}")
    for a in attrs:
        if not table.has_column(a):
            raise SchemaError(f"constraint references unknown column {a} "
                              f"in table {table.name}")
    if limit < 1:
        raise SchemaError("limit must be >= 1")
    if attrs >= set(table.primary_key):
        raise SchemaError(
            f"constraint on {table.name} covers the full primary key, "
            f"which already implies limit 1")


def register_index(schema: Schema, index: IndexDef) -> Schema:
    """Add an index if an equal field list is not already registered."""
    table = schema.table(index.table)
    for f in index.fields:
        if not table.has_column(f.column):
            raise SchemaError(f"index references unknown column {f.column} "
                              f"in table {index.table}")
        if f.token and table.column(f.column).col_type != "string":
            raise SchemaError(f"token({f.column}) requires a string column")
    if not set(table.primary_key) <= set(index.plain_columns):
        raise SchemaError(
            f"index {index.render()} does not end with enough primary-key "
            f"columns to identify base tuples")
    if schema.has_index(index):
        return schema
    return Schema(schema.tables, schema.constraints, schema.indexes + (index,))


def _ensure_support_indexes(schema: Schema) -> Schema:
    """Every constraint needs some index whose leading plain fields equal its
    attribute set, or the count-range enforcement at write time has nothing
    to count over. The primary index usually serves."""
    for c in schema.constraints:
        table = schema.table(c.table)
        if any(_prefix_serves(idx, c.attributes) for idx in schema.indexes_for(c.table)):
            continue
        fields = tuple(IndexField(a) for a in sorted(c.attributes))
        fields += tuple(IndexField(k) for k in table.primary_key
                        if k not in c.attributes)
        schema = register_index(schema, IndexDef(c.table, fields, covering=False))
    return schema


def _prefix_serves(index: IndexDef, attrs: frozenset[str]) -> bool:
    lead = index.fields[: len(attrs)]
    return (all(not f.token for f in lead)
            and {f.column for f in lead} == set(attrs))


# --- DDL text form ------------------------------------------------------

def parse_ddl(source: str) -> Schema:
    """Parse CREATE TABLE statements into a Schema.

    Each table gets a covering primary index; each cardinality constraint
    gets an enforcement index when no existing index serves its attributes.
    """
    ts = TokenStream(tokenize(source))
    tables: dict[str, TableDef] = {}
    constraints: list[CardinalityConstraint] = []
    indexes: list[IndexDef] = []
    while ts.peek().kind != "EOF":
        ts.expect_keyword("CREATE")
        ts.expect_keyword("TABLE")
        name_tok = ts.expect_ident("table name")
        if name_tok.text in tables:
            raise ParseError(f"duplicate table {name_tok.text}",
                             name_tok.line, name_tok.col)
        columns: list[Column] = []
        pk: tuple[str, ...] | None = None
        raw_constraints: list[tuple[frozenset[str], int, TokenStream]] = []
        ts.expect_punct("(")
        while True:
            if ts.at_keyword("PRIMARY"):
                tok = ts.next()
                ts.expect_keyword("KEY")
                if pk is not None:
                    raise ParseError("duplicate PRIMARY KEY clause", tok.line, tok.col)
                pk = tuple(_ident_list(ts))
            elif ts.at_keyword("CARDINALITY"):
                ts.next()
                ts.expect_keyword("LIMIT")
                limit_tok = ts.peek()
                limit = ts.expect_int("cardinality limit")
                attrs = frozenset(_ident_list(ts))
                raw_constraints.append((attrs, limit, limit_tok))
            else:
                col_tok = ts.expect_ident("column name")
                columns.append(_parse_column(ts, col_tok.text))
            if ts.accept_punct(","):
                continue
            ts.expect_punct(")")
            break
        ts.accept_punct(";")
        if pk is None:
            raise ParseError(f"table {name_tok.text} has no PRIMARY KEY",
                             name_tok.line, name_tok.col)
        try:
            table = TableDef(name_tok.text, tuple(columns), pk)
            for attrs, limit, tok in raw_constraints:
                _check_constraint(table, attrs, limit)
                constraints.append(CardinalityConstraint(table.name, attrs, limit))
        except SchemaError as exc:
            raise ParseError(str(exc), name_tok.line, name_tok.col) from exc
        tables[table.name] = table
        indexes.append(IndexDef(table.name,
                                tuple(IndexField(c) for c in pk), covering=True))
    schema = Schema(tables, tuple(constraints), tuple(indexes))
    return _ensure_support_indexes(schema)


def _parse_column(ts: TokenStream, name: str) -> Column:
    type_tok = ts.expect_ident("column type")
    upper = type_tok.upper()
    if upper not in _TYPE_ALIASES:
        raise ParseError(f"unknown column type {type_tok.text}",
                         type_tok.line, type_tok.col)
    col_type = _TYPE_ALIASES[upper]
    max_len = DEFAULT_STRING_LEN if col_type == "string" else 0
    if ts.accept_punct("("):
        length = ts.expect_int("length")
        ts.expect_punct(")")
        if upper != "VARCHAR":
            raise ParseError(f"{type_tok.text} does not take a length",
                             type_tok.line, type_tok.col)
        max_len = length
    return Column(name, col_type, max_len)


def _ident_list(ts: TokenStream) -> list[str]:
    ts.expect_punct("(")
    names = [ts.expect_ident().text]
    while ts.accept_punct(","):
        names.append(ts.expect_ident().text)
    ts.expect_punct(")")
    return names


_TYPE_RENDER = {"int64": "INT", "boolean": "BOOLEAN", "timestamp": "TIMESTAMP"}


def render_ddl(schema: Schema) -> str:
    """Canonical DDL text; parse_ddl(render_ddl(s)) reproduces s."""
    parts = []
    for table in schema.tables.values():
        lines = []
        for col in table.columns:
            if col.col_type == "string":
                lines.append(f"  {col.name} VARCHAR({col.max_len})")
            else:
                lines.append(f"  {col.name} {_TYPE_RENDER[col.col_type]}")
        lines.append(f"  PRIMARY KEY({', '.join(table.primary_key)})")
        for c in schema.constraints_for(table.name):
            attrs = ", ".join(sorted(c.attributes))
            lines.append(f"  CARDINALITY LIMIT {c.limit} ({attrs})")
        parts.append(f"CREATE TABLE {table.name} (\n" + ",\n".join(lines) + "\n);")
    return "\n\n".join(parts) + "\n"


def schema_to_json(schema: Schema) -> str:
    doc = {
        "version": 1,
        "tables": [
            {
                "name": t.name,
                "columns": [{"name": c.name, "type": c.col_type,
                             **({"max_len": c.max_len} if c.col_type == "string" else {})}
                            for c in t.columns],
                "primary_key": list(t.primary_key),
            }
            for t in schema.tables.values()
        ],
        "constraints": [
            {"table": c.table, "attributes": sorted(c.attributes), "limit": c.limit}
            for c in schema.constraints
        ],
        "indexes": [
            {"table": i.table,
             "fields": [{"column": f.column, "token": f.token} for f in i.fields],
             "covering": i.covering}
            for i in schema.indexes
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=2)


def schema_from_json(text: str) -> Schema:
    doc = json.loads(text)
    tables = {}
    for t in doc["tables"]:
        cols = tuple(Column(c["name"], c["type"], c.get("max_len", 0))
                     for c in t["columns"])
        tables[t["name"]] = TableDef(t["name"], cols, tuple(t["primary_key"]))
    constraints = tuple(CardinalityConstraint(c["table"],
                                              frozenset(c["attributes"]), c["limit"])
                        for c in doc["constraints"])
    indexes = tuple(IndexDef(i["table"],
                             tuple(IndexField(f["column"], f["token"])
                                   for f in i["fields"]),
                             i["covering"])
                    for i in doc["indexes"])
    return Schema(tables, constraints, indexes)
