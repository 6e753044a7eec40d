"""Formal query language: AST, parser, canonical printer and type checker.

Grammar (keywords are uppercase, whitespace-insensitive)::

    query   := "FIND" ("IMAGES"|"PATIENTS") "WHERE" or
    or      := and ("OR" and)*
    and     := unary ("AND" unary)*
    unary   := "NOT" unary | atom
    atom    := "(" or ")" | "EXISTS" "EPISODE" ident "(" or ")" | path op operand
    operand := integer | string | "true" | "false" | path

The right-hand side of a comparison may be another path so that one episode
can be compared with an enclosing one (``e2.date > e1.therapy_end_date``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from .model import DATE_RE, GridError

IMAGES = "IMAGES"
PATIENTS = "PATIENTS"
OPS = ("=", "!=", "<", "<=", ">", ">=")
KEYWORDS = {"FIND", "IMAGES", "PATIENTS", "WHERE", "OR", "AND", "NOT", "EXISTS", "EPISODE"}

PATIENT_ATTRS = {"pseudoid": "str", "age": "int", "sex": "str", "hrt": "bool", "site": "str"}
IMAGE_ATTRS = {
    "gid": "str",
    "view": "str",
    "laterality": "str",
    "study_date": "date",
    "rows": "int",
    "cols": "int",
    "modality": "str",
}
EPISODE_ATTRS = {
    "laterality": "str",
    "diagnosis": "str",
    "therapy_outcome": "str",
    "date": "date",
    "therapy_end_date": "date",
}
ALG_NAME_RE = re.compile(r"[a-z0-9_]{1,32}")
RESERVED_ROOTS = ("patient", "image", "alg")


class QuerySyntaxError(GridError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


class QueryTypeError(GridError):
    pass


class UnknownAttributeError(GridError):
    pass


@dataclass(frozen=True)
class Ref:
    """A path used as a comparison operand."""

    path: str


Literal = Union[int, bool, str, Ref]


@dataclass(frozen=True)
class Cmp:
    path: str
    op: str
    value: Literal


@dataclass(frozen=True)
class And:
    items: tuple


@dataclass(frozen=True)
class Or:
    items: tuple


@dataclass(frozen=True)
class Not:
    item: object


@dataclass(frozen=True)
class Exists:
    alias: str
    body: object


Expr = Union[Cmp, And, Or, Not, Exists]


@dataclass(frozen=True)
class FormalQuery:
    target: str
    predicate: Expr

    def __str__(self) -> str:
        return format_formal(self)


# -- tokenizer ---------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<str>"(?:[^"\\\n]|\\["\\])*")
  | (?P<num>-?\d+)
  | (?P<op>!=|<=|>=|=|<|>)
  | (?P<lpar>\()
  | (?P<rpar>\))
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_0-9][A-Za-z0-9_]*)*)
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    line, line_start = 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        chunk = m.group()
        if kind == "ws":
            nl = chunk.count("\n")
            if nl:
                line += nl
                line_start = pos + chunk.rindex("\n") + 1
        else:
            toks.append(_Tok(kind, chunk, line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


def _unquote(s: str) -> str:
    return re.sub(r"\\([\"\\])", r"\1", s[1:-1])


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


# -- parser ------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, what: str):
        t = self.cur
        found = "end of input" if t.kind == "eof" else repr(t.text)
        raise QuerySyntaxError(f"expected {what}, found {found}", t.line, t.col)

    def keyword(self, *words: str) -> str:
        t = self.cur
        if t.kind == "word" and t.text in words:
            self.i += 1
            return t.text
        self.fail(" or ".join(words))

    def at_keyword(self, word: str) -> bool:
        return self.cur.kind == "word" and self.cur.text == word

    def expect(self, kind: str, what: str) -> _Tok:
        if self.cur.kind != kind:
            self.fail(what)
        t = self.cur
        self.i += 1
        return t

    def query(self) -> FormalQuery:
        self.keyword("FIND")
        target = self.keyword(IMAGES, PATIENTS)
        self.keyword("WHERE")
        pred = self.or_()
        self.expect("eof", "end of query")
        return FormalQuery(target, pred)

    def or_(self):
        items = [self.and_()]
        while self.at_keyword("OR"):
            self.i += 1
            items.append(self.and_())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def and_(self):
        items = [self.unary()]
        while self.at_keyword("AND"):
            self.i += 1
            items.append(self.unary())
        return items[0] if len(items) == 1 else And(tuple(items))

    def unary(self):
        if self.at_keyword("NOT"):
            self.i += 1
            return Not(self.unary())
        return self.atom()

    def atom(self):
        t = self.cur
        if t.kind == "lpar":
            self.i += 1
            inner = self.or_()
            self.expect("rpar", "')'")
            return inner
        if self.at_keyword("EXISTS"):
            self.i += 1
            self.keyword("EPISODE")
            a = self.cur
            if a.kind != "word" or "." in a.text or a.text in KEYWORDS:
                self.fail("episode alias")
            self.i += 1
            self.expect("lpar", "'('")
            body = self.or_()
            self.expect("rpar", "')'")
            return Exists(a.text, body)
        if t.kind == "word" and "." in t.text and t.text not in KEYWORDS:
            self.i += 1
            op = self.expect("op", "comparison operator").text
            return Cmp(t.text, op, self.operand())
        self.fail("comparison, '(' or EXISTS")

    def operand(self) -> Literal:
        t = self.cur
        if t.kind == "num":
            self.i += 1
            return int(t.text)
        if t.kind == "str":
            self.i += 1
            return _unquote(t.text)
        if t.kind == "word":
            if t.text in ("true", "false"):
                self.i += 1
                return t.text == "true"
            if "." in t.text:
                self.i += 1
                return Ref(t.text)
        self.fail("literal or path")


def parse_predicate(text: str) -> Expr:
    """Parse a bare predicate (no FIND/WHERE header); no type checking."""
    p = _Parser(text)
    pred = p.or_()
    p.expect("eof", "end of predicate")
    return pred


def parse_formal(text: str) -> FormalQuery:
    q = _Parser(text).query()
    check_types(q)
    return q


# -- printer -----------------------------------------------------------------


def _fmt_operand(v: Literal) -> str:
    if isinstance(v, Ref):
        return v.path
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    return _quote(v)


def _fmt(e, parent: str = "") -> str:
    if isinstance(e, Cmp):
        return f"{e.path} {e.op} {_fmt_operand(e.value)}"
    if isinstance(e, Exists):
        return f"EXISTS EPISODE {e.alias} ({_fmt(e.body)})"
    if isinstance(e, And):
        s = " AND ".join(_fmt(x, "and") for x in e.items)
        wrap = parent in ("and", "or", "not")
    elif isinstance(e, Or):
        s = " OR ".join(_fmt(x, "or") for x in e.items)
        wrap = parent in ("and", "or", "not")
    elif isinstance(e, Not):
        s = "NOT " + _fmt(e.item, "not")
        wrap = parent in ("or", "not")
    else:
        raise TypeError(f"not a predicate node: {e!r}")
    return f"({s})" if wrap else s


def format_predicate(e: Expr) -> str:
    return _fmt(e)


def format_formal(q: FormalQuery) -> str:
    return f"FIND {q.target} WHERE {_fmt(q.predicate)}"


# -- type checking -----------------------------------------------------------


def path_type(path: str, target: str, aliases: tuple = ()) -> str:
    """Return the value type of ``path`` or raise UnknownAttributeError."""
    parts = path.split(".")
    root = parts[0]
    if root == "patient" and len(parts) == 2 and parts[1] in PATIENT_ATTRS:
        return PATIENT_ATTRS[parts[1]]
    if root == "image" and len(parts) == 2 and parts[1] in IMAGE_ATTRS:
        if target != IMAGES:
            raise UnknownAttributeError(f"{path} is only available in FIND IMAGES queries")
        return IMAGE_ATTRS[parts[1]]
    if root == "alg" and len(parts) == 3 and parts[2] == "value" and ALG_NAME_RE.fullmatch(parts[1]):
        if target != IMAGES:
            raise UnknownAttributeError(f"{path} is only available in FIND IMAGES queries")
        return "num"
    if root in aliases and len(parts) == 2 and parts[1] in EPISODE_ATTRS:
        return EPISODE_ATTRS[parts[1]]
    raise UnknownAttributeError(f"unknown attribute path {path}")


def _literal_type(v: Literal) -> str:
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, int):
        return "int"
    return "str"


def _compatible(left: str, right: str, value: Literal) -> bool:
    numeric = ("int", "num")
    if left in numeric and right in numeric:
        return True
    if left == "date" and right == "str":
        return isinstance(value, str) and DATE_RE.fullmatch(value) is not None
    return left == right


def _check(e, target: str, aliases: tuple) -> None:
    if isinstance(e, Cmp):
        lt = path_type(e.path, target, aliases)
        if isinstance(e.value, Ref):
            rt = path_type(e.value.path, target, aliases)
        else:
            rt = _literal_type(e.value)
        if not (_compatible(lt, rt, e.value) or _compatible(rt, lt, e.value)):
            raise QueryTypeError(f"type mismatch in '{_fmt(e)}': {lt} vs {rt}")
        if "bool" in (lt, rt) and e.op not in ("=", "!="):
            raise QueryTypeError(f"operator {e.op} not defined on bool in '{_fmt(e)}'")
    elif isinstance(e, (And, Or)):
        if len(e.items) < 2:
            raise QueryTypeError("AND/OR need at least two operands")
        for x in e.items:
            _check(x, target, aliases)
    elif isinstance(e, Not):
        _check(e.item, target, aliases)
    elif isinstance(e, Exists):
        if e.alias in aliases or e.alias in RESERVED_ROOTS:
            raise QueryTypeError(f"episode alias {e.alias!r} shadows an enclosing name")
        _check(e.body, target, aliases + (e.alias,))
    else:
        raise QueryTypeError(f"not a predicate node: {e!r}")


def check_types(q: FormalQuery) -> None:
    if q.target not in (IMAGES, PATIENTS):
        raise QueryTypeError(f"unknown query target {q.target!r}")
    _check(q.predicate, q.target, ())


def referenced_algs(e) -> list[str]:
    """Names of ``alg.<name>.value`` attributes used in ``e``, sorted."""
    found = set()

    def walk(x):
        if isinstance(x, Cmp):
            for p in (x.path, x.value.path if isinstance(x.value, Ref) else ""):
                if p.startswith("alg."):
                    found.add(p.split(".")[1])
        elif isinstance(x, (And, Or)):
            for y in x.items:
                walk(y)
        elif isinstance(x, Not):
            walk(x.item)
        elif isinstance(x, Exists):
            walk(x.body)

    walk(e)
    return sorted(found)
