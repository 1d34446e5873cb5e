"""Query text parsing: a conjunctive SQL subset with PAGINATE, named
parameters written `[k: name]`, tokenized LIKE, and bounded IN lists.

Grammar (conjunctive WHERE only; OR, subqueries and recursion are rejected):

    SELECT proj (',' proj)*
    FROM table [alias] (',' table [alias])*
    [WHERE predicate (AND predicate)*]
    [GROUP BY column (',' column)*]
    [ORDER BY column [ASC|DESC] (',' ...)*]
    [LIMIT n | PAGINATE n]

    proj      := '*' | name '.' '*' | column | COUNT '(' '*' ')'
               | (SUM|MIN|MAX|COUNT) '(' column ')'
    predicate := column ('=' | '<' | '<=' | '>' | '>=') operand
               | column LIKE ('%word%' | parameter)
               | column IN '[' k ':' name ',' length ']'
    operand   := literal | parameter | column
    parameter := '[' k ':' name ']'
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .lexer import ParseError, TokenStream, tokenize
from .textsearch import tokenize_text

EQ = "="
INEQUALITY_OPS = ("<", "<=", ">", ">=")


@dataclass(frozen=True)
class ColumnRef:
    table: str | None  # alias or table name; None until resolved if unqualified
    column: str

    def render(self) -> str:
        return f"{self.table}.{self.column}" if self.table else self.column


@dataclass(frozen=True)
class Literal:
    value: object

    def render(self) -> str:
        if isinstance(self.value, bool):
            return "true" if self.value else "false"
        if isinstance(self.value, str):
            return "'" + self.value.replace("'", "''") + "'"
        return str(self.value)


@dataclass(frozen=True)
class Parameter:
    ordinal: int
    name: str

    def render(self) -> str:
        return f"[{self.ordinal}: {self.name}]"


@dataclass(frozen=True)
class Comparison:
    lhs: ColumnRef
    op: str  # = < <= > >=
    rhs: object  # Literal | Parameter | ColumnRef

    def render(self) -> str:
        return f"{self.lhs.render()} {self.op} {self.rhs.render()}"


@dataclass(frozen=True)
class TokenMatch:
    lhs: ColumnRef
    rhs: object  # Parameter | Literal (single token)

    def render(self) -> str:
        if isinstance(self.rhs, Literal):
            return f"{self.lhs.render()} LIKE '%{self.rhs.value}%'"
        return f"{self.lhs.render()} LIKE {self.rhs.render()}"


@dataclass(frozen=True)
class InList:
    lhs: ColumnRef
    param: Parameter
    length: int  # declared compile-time maximum list length

    def render(self) -> str:
        return (f"{self.lhs.render()} IN "
                f"[{self.param.ordinal}: {self.param.name}, {self.length}]")


@dataclass(frozen=True)
class Star:
    table: str | None = None

    def render(self) -> str:
        return f"{self.table}.*" if self.table else "*"


@dataclass(frozen=True)
class AggregateItem:
    fn: str  # COUNT | SUM | MIN | MAX
    arg: object  # ColumnRef | Star (COUNT(*) only)

    def render(self) -> str:
        return f"{self.fn}({self.arg.render()})"


@dataclass(frozen=True)
class RelationRef:
    table: str
    alias: str

    def render(self) -> str:
        return self.table if self.alias == self.table else f"{self.table} {self.alias}"


@dataclass(frozen=True)
class OrderItem:
    column: ColumnRef
    descending: bool = False

    def render(self) -> str:
        return self.column.render() + (" DESC" if self.descending else "")


@dataclass(frozen=True)
class Limit:
    kind: str  # "limit" | "paginate"
    count: int


@dataclass(frozen=True)
class QueryAst:
    projections: tuple
    relations: tuple[RelationRef, ...]
    predicates: tuple
    group_by: tuple[ColumnRef, ...] = ()
    order_by: tuple[OrderItem, ...] = ()
    limit: Limit | None = None

    @property
    def has_aggregates(self) -> bool:
        return any(isinstance(p, AggregateItem) for p in self.projections)

    def with_limit_count(self, count: int) -> "QueryAst":
        if self.limit is None:
            return replace(self, limit=Limit("limit", count))
        return replace(self, limit=Limit(self.limit.kind, count))

    def parameters(self) -> list:
        """All parameters (including IN-list ones) in predicate order."""
        out = []
        for pred in self.predicates:
            if isinstance(pred, Comparison) and isinstance(pred.rhs, Parameter):
                out.append(pred.rhs)
            elif isinstance(pred, TokenMatch) and isinstance(pred.rhs, Parameter):
                out.append(pred.rhs)
            elif isinstance(pred, InList):
                out.append(pred.param)
        return out


def parse_query(source: str) -> QueryAst:
    asts = parse_queries(source)
    if len(asts) != 1:
        raise ParseError(f"expected exactly one statement, found {len(asts)}")
    return asts[0]


def parse_queries(source: str) -> list[QueryAst]:
    """Parse one or more semicolon-separated SELECT statements."""
    ts = TokenStream(tokenize(source))
    asts = []
    while ts.peek().kind != "EOF":
        asts.append(_parse_select(ts))
        while ts.accept_punct(";"):
            pass
    return asts


def _parse_select(ts: TokenStream) -> QueryAst:
    ts.expect_keyword("SELECT")
    projections = [_parse_projection(ts)]
    while ts.accept_punct(","):
        projections.append(_parse_projection(ts))

    ts.expect_keyword("FROM")
    relations = [_parse_relation(ts)]
    while ts.accept_punct(","):
        relations.append(_parse_relation(ts))
    seen = set()
    for rel in relations:
        if rel.alias in seen:
            raise ParseError(f"duplicate relation alias {rel.alias}")
        seen.add(rel.alias)

    predicates: list = []
    if ts.accept_keyword("WHERE"):
        predicates.append(_parse_predicate(ts))
        while True:
            if ts.accept_keyword("AND"):
                predicates.append(_parse_predicate(ts))
                continue
            if ts.at_keyword("OR"):
                tok = ts.peek()
                raise ParseError("disjunction (OR) is not supported", tok.line, tok.col)
            break

    group_by: list[ColumnRef] = []
    if ts.accept_keyword("GROUP"):
        ts.expect_keyword("BY")
        group_by.append(_parse_column(ts))
        while ts.accept_punct(","):
            group_by.append(_parse_column(ts))

    order_by: list[OrderItem] = []
    if ts.accept_keyword("ORDER"):
        ts.expect_keyword("BY")
        order_by.append(_parse_order_item(ts))
        while ts.accept_punct(","):
            order_by.append(_parse_order_item(ts))

    limit: Limit | None = None
    while ts.at_keyword("LIMIT", "PAGINATE"):
        tok = ts.next()
        kind = "limit" if tok.upper() == "LIMIT" else "paginate"
        count_tok = ts.peek()
        count = ts.expect_int("row count")
        if count < 1:
            raise ParseError("count must be >= 1", count_tok.line, count_tok.col)
        if limit is not None:
            raise ParseError("LIMIT and PAGINATE are mutually exclusive",
                             tok.line, tok.col)
        limit = Limit(kind, count)

    tok = ts.peek()
    if tok.kind != "EOF" and not ts.at_punct(";"):
        raise ParseError(f"unexpected {tok.text!r} after query", tok.line, tok.col)

    ast = QueryAst(tuple(projections), tuple(relations), tuple(predicates),
                   tuple(group_by), tuple(order_by), limit)
    _validate(ast)
    return ast


def _parse_relation(ts: TokenStream) -> RelationRef:
    if ts.at_punct("("):
        tok = ts.peek()
        raise ParseError("subqueries are not supported", tok.line, tok.col)
    table = ts.expect_ident("table name").text
    alias = table
    if (ts.peek().kind == "IDENT"
            and ts.peek().upper() not in ("WHERE", "GROUP", "ORDER", "LIMIT",
                                          "PAGINATE", "ON", "AND")):
        alias = ts.next().text
    return RelationRef(table, alias)


_AGG_FNS = ("COUNT", "SUM", "MIN", "MAX")


def _parse_projection(ts: TokenStream):
    if ts.accept_punct("*"):
        return Star()
    if ts.at_keyword(*_AGG_FNS) and ts.peek(1).kind == "PUNCT" and ts.peek(1).text == "(":
        fn = ts.next().upper()
        ts.expect_punct("(")
        if ts.accept_punct("*"):
            if fn != "COUNT":
                raise ts.error(f"{fn}(*) is not supported")
            arg: object = Star()
        else:
            arg = _parse_column(ts)
        ts.expect_punct(")")
        return AggregateItem(fn, arg)
    name = ts.expect_ident("column").text
    if ts.accept_punct("."):
        if ts.accept_punct("*"):
            return Star(name)
        return ColumnRef(name, ts.expect_ident("column").text)
    return ColumnRef(None, name)


def _parse_column(ts: TokenStream) -> ColumnRef:
    name = ts.expect_ident("column").text
    if ts.accept_punct("."):
        return ColumnRef(name, ts.expect_ident("column").text)
    return ColumnRef(None, name)


def _parse_order_item(ts: TokenStream) -> OrderItem:
    column = _parse_column(ts)
    descending = False
    if ts.accept_keyword("DESC"):
        descending = True
    elif ts.accept_keyword("ASC"):
        pass
    return OrderItem(column, descending)


def _parse_parameter(ts: TokenStream) -> Parameter:
    ts.expect_punct("[")
    ordinal = ts.expect_int("parameter ordinal")
    ts.expect_punct(":")
    name = ts.expect_ident("parameter name").text
    ts.expect_punct("]")
    return Parameter(ordinal, name)


def _parse_operand(ts: TokenStream):
    tok = ts.peek()
    if tok.kind == "INT":
        ts.next()
        return Literal(int(tok.text))
    if tok.kind == "STRING":
        ts.next()
        return Literal(tok.text)
    if ts.at_punct("["):
        return _parse_parameter(ts)
    if tok.kind == "IDENT":
        if tok.upper() in ("TRUE", "FALSE"):
            ts.next()
            return Literal(tok.upper() == "TRUE")
        return _parse_column(ts)
    raise ParseError(f"expected a value, parameter or column, found {tok.text!r}",
                     tok.line, tok.col)


def _single_token(text: str) -> str | None:
    tokens = tokenize_text(text)
    return tokens[0] if len(tokens) == 1 else None


def _parse_predicate(ts: TokenStream):
    lhs = _parse_column(ts)
    if ts.accept_keyword("LIKE"):
        tok = ts.peek()
        if tok.kind == "STRING":
            ts.next()
            pattern = tok.text
            if not (pattern.startswith("%") and pattern.endswith("%") and len(pattern) > 2):
                raise ParseError("only tokenized LIKE patterns ('%word%') are "
                                 "supported", tok.line, tok.col)
            word = _single_token(pattern[1:-1])
            if word is None:
                raise ParseError("LIKE pattern must contain exactly one token",
                                 tok.line, tok.col)
            return TokenMatch(lhs, Literal(word))
        if ts.at_punct("["):
            return TokenMatch(lhs, _parse_parameter(ts))
        raise ParseError("LIKE requires a '%word%' literal or a parameter",
                         tok.line, tok.col)
    if ts.accept_keyword("IN"):
        open_tok = ts.expect_punct("[")
        ordinal = ts.expect_int("parameter ordinal")
        ts.expect_punct(":")
        name = ts.expect_ident("parameter name").text
        ts.expect_punct(",")
        length_tok = ts.peek()
        length = ts.expect_int("list length")
        ts.expect_punct("]")
        if length < 1:
            raise ParseError("IN list length must be >= 1",
                             length_tok.line, length_tok.col)
        return InList(lhs, Parameter(ordinal, name), length)
    op_tok = ts.peek()
    if op_tok.kind == "PUNCT" and op_tok.text in ("=", "<", "<=", ">", ">="):
        ts.next()
        return Comparison(lhs, op_tok.text, _parse_operand(ts))
    if op_tok.kind == "PUNCT" and op_tok.text in ("<>", "!="):
        raise ParseError("inequality (!=) is not supported; only = < <= > >=",
                         op_tok.line, op_tok.col)
    raise ParseError(f"expected a comparison operator, found {op_tok.text!r}",
                     op_tok.line, op_tok.col)


def _validate(ast: QueryAst) -> None:
    ordinals = [p.ordinal for p in ast.parameters()]
    if len(set(ordinals)) != len(ordinals):
        raise ParseError("duplicate parameter ordinal")
    names = [p.name for p in ast.parameters()]
    if len(set(names)) != len(names):
        raise ParseError("duplicate parameter name")
    if ast.has_aggregates:
        group = {(c.table, c.column) for c in ast.group_by}
        for item in ast.projections:
            if isinstance(item, ColumnRef) and (item.table, item.column) not in group:
                raise ParseError(f"column {item.render()} must appear in GROUP BY")
            if isinstance(item, Star):
                raise ParseError("* cannot be mixed with aggregates")
    elif ast.group_by:
        raise ParseError("GROUP BY without aggregates is not supported")


def render_query(ast: QueryAst) -> str:
    """Canonical text form; parse_query(render_query(a)) == a."""
    parts = ["SELECT " + ", ".join(p.render() for p in ast.projections)]
    parts.append("FROM " + ", ".join(r.render() for r in ast.relations))
    if ast.predicates:
        parts.append("WHERE " + " AND ".join(p.render() for p in ast.predicates))
    if ast.group_by:
        parts.append("GROUP BY " + ", ".join(c.render() for c in ast.group_by))
    if ast.order_by:
        parts.append("ORDER BY " + ", ".join(o.render() for o in ast.order_by))
    if ast.limit:
        keyword = "LIMIT" if ast.limit.kind == "limit" else "PAGINATE"
        parts.append(f"{keyword} {ast.limit.count}")
    return " ".join(parts)
