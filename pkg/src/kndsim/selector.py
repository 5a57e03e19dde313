"""CEL-subset selector expressions over a single device's attributes.

Grammar (whitespace between tokens is ignored)::

    expr       := or_expr
    or_expr    := and_expr { "||" and_expr }
    and_expr   := unary { "&&" unary }
    unary      := "!" unary | primary
    primary    := "(" expr ")" | comparison | kind_test
    comparison := operand cmp_op operand
    operand    := attr_ref | literal
    attr_ref   := "device" "." "attributes" "[" string_lit "]"
    kind_test  := "device" "." "kind" "==" string_lit
    literal    := string_lit | int_lit | "true" | "false"

A bare identifier ``foo`` is accepted as shorthand for
``device.attributes["foo"]``; :func:`format` always emits the long form.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Optional, Union

from kndsim.topology import INT64_MAX, INT64_MIN, AttributeValue, DeviceDescriptor, DeviceKind

__all__ = [
    "AttributeRef",
    "Compare",
    "EvalOutcome",
    "Fault",
    "KindIs",
    "Literal",
    "Logic",
    "Not",
    "SelectorAst",
    "SelectorSyntaxError",
    "evaluate",
    "format",
    "parse",
]


class SelectorSyntaxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Literal:
    value: AttributeValue

    def __eq__(self, other):
        # True == 1 in Python; variants must not alias
        if not isinstance(other, Literal):
            return NotImplemented
        return type(self.value) is type(other.value) and self.value == other.value

    def __hash__(self):
        return hash((type(self.value), self.value))


@dataclass(frozen=True)
class AttributeRef:
    key: str


CMP_OPS = ("==", "!=", "<", "<=", ">", ">=")
LOGIC_OPS = ("&&", "||")


@dataclass(frozen=True)
class Compare:
    op: str
    lhs: Union[Literal, AttributeRef]
    rhs: Union[Literal, AttributeRef]


@dataclass(frozen=True)
class Logic:
    op: str
    lhs: "SelectorAst"
    rhs: "SelectorAst"


@dataclass(frozen=True)
class Not:
    child: "SelectorAst"


@dataclass(frozen=True)
class KindIs:
    kind: DeviceKind


SelectorAst = Union[Compare, Logic, Not, KindIs]


# --- lexer -----------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<op>&&|\|\||==|!=|<=|>=|<|>|!)
  | (?P<punct>[().\[\]])
  | (?P<int>-?\d+)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # op, punct, int, string, ident, eof
    text: str
    offset: int


def _unescape(body: str) -> str:
    return re.sub(r"\\(.)", r"\1", body)


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            if text[pos] == '"':
                raise SelectorSyntaxError("unterminated string literal", pos)
            raise SelectorSyntaxError(f"unknown token {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("eof", "", len(text)))
    return tokens


# --- parser ----------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def peek(self, n: int = 1) -> _Token:
        return self.tokens[min(self.i + n, len(self.tokens) - 1)]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        if tok.kind != "eof":
            self.i += 1
        return tok

    def at(self, text: str) -> bool:
        return self.tok.kind in ("op", "punct", "ident") and self.tok.text == text

    def expect(self, text: str) -> _Token:
        if not self.at(text):
            raise SelectorSyntaxError(f"expected {text!r}, found {self._describe()}", self.tok.offset)
        return self.advance()

    def _describe(self) -> str:
        return "end of input" if self.tok.kind == "eof" else repr(self.tok.text)

    def parse(self) -> SelectorAst:
        node = self.or_expr()
        if self.tok.kind != "eof":
            if self.at(")"):
                raise SelectorSyntaxError("unbalanced ')'", self.tok.offset)
            raise SelectorSyntaxError(f"unexpected {self._describe()}", self.tok.offset)
        return node

    def or_expr(self) -> SelectorAst:
        node = self.and_expr()
        while self.at("||"):
            self.advance()
            node = Logic("||", node, self.and_expr())
        return node

    def and_expr(self) -> SelectorAst:
        node = self.unary()
        while self.at("&&"):
            self.advance()
            node = Logic("&&", node, self.unary())
        return node

    def unary(self) -> SelectorAst:
        if self.at("!"):
            self.advance()
            return Not(self.unary())
        return self.primary()

    def primary(self) -> SelectorAst:
        if self.at("("):
            open_tok = self.advance()
            node = self.or_expr()
            if not self.at(")"):
                raise SelectorSyntaxError("unbalanced '(': missing ')'", open_tok.offset)
            self.advance()
            return node
        if self.at("device") and self.peek().text == "." and self.peek(2).text == "kind":
            return self.kind_test()
        return self.comparison()

    def kind_test(self) -> KindIs:
        self.expect("device")
        self.expect(".")
        self.expect("kind")
        self.expect("==")
        tok = self.tok
        if tok.kind != "string":
            raise SelectorSyntaxError("device.kind must be compared with a string literal", tok.offset)
        self.advance()
        value = _unescape(tok.text[1:-1])
        try:
            return KindIs(DeviceKind(value))
        except ValueError:
            raise SelectorSyntaxError(f"unknown device kind {value!r}", tok.offset) from None

    def comparison(self) -> Compare:
        lhs = self.operand()
        tok = self.tok
        if tok.kind != "op" or tok.text not in CMP_OPS:
            raise SelectorSyntaxError(f"expected comparison operator, found {self._describe()}", tok.offset)
        self.advance()
        rhs = self.operand()
        return Compare(tok.text, lhs, rhs)

    def operand(self) -> Union[Literal, AttributeRef]:
        tok = self.tok
        if tok.kind == "string":
            self.advance()
            return Literal(_unescape(tok.text[1:-1]))
        if tok.kind == "int":
            value = int(tok.text)
            if not INT64_MIN <= value <= INT64_MAX:
                raise SelectorSyntaxError("integer literal out of 64-bit range", tok.offset)
            self.advance()
            return Literal(value)
        if tok.kind == "ident":
            if tok.text in ("true", "false"):
                self.advance()
                return Literal(tok.text == "true")
            if tok.text == "device":
                return self.attr_ref()
            self.advance()
            return AttributeRef(tok.text)
        raise SelectorSyntaxError(f"expected operand, found {self._describe()}", tok.offset)

    def attr_ref(self) -> AttributeRef:
        self.expect("device")
        self.expect(".")
        self.expect("attributes")
        open_tok = self.expect("[")
        tok = self.tok
        if tok.kind != "string":
            raise SelectorSyntaxError("attribute key must be a string literal", tok.offset)
        self.advance()
        if not self.at("]"):
            raise SelectorSyntaxError("unclosed '['", open_tok.offset)
        self.advance()
        key = _unescape(tok.text[1:-1])
        if not key:
            raise SelectorSyntaxError("attribute key must be non-empty", tok.offset)
        return AttributeRef(key)


def parse(text: str) -> SelectorAst:
    """Parse selector text, raising :class:`SelectorSyntaxError` on bad input."""
    return _Parser(text).parse()


# --- formatting --------------------------------------------------------------

def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _format_operand(node) -> str:
    if isinstance(node, AttributeRef):
        return f"device.attributes[{_quote(node.key)}]"
    value = node.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    return _quote(value)


def format(ast: SelectorAst) -> str:  # noqa: A001 - mirrors parse()
    """Canonical, fully parenthesized text for ``ast``."""
    if isinstance(ast, Compare):
        return f"{_format_operand(ast.lhs)} {ast.op} {_format_operand(ast.rhs)}"
    if isinstance(ast, Logic):
        return f"({format(ast.lhs)} {ast.op} {format(ast.rhs)})"
    if isinstance(ast, Not):
        return f"!({format(ast.child)})"
    if isinstance(ast, KindIs):
        return f"device.kind == {_quote(ast.kind.value)}"
    raise TypeError(f"not a selector node: {ast!r}")


# --- evaluation --------------------------------------------------------------

class Fault(str, enum.Enum):
    ATTRIBUTE_MISSING = "AttributeMissing"
    TYPE_MISMATCH = "TypeMismatch"


@dataclass(frozen=True)
class EvalOutcome:
    """Either a boolean ``value`` or a ``fault`` with the offending key/operator."""

    value: Optional[bool] = None
    fault: Optional[Fault] = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.fault is None

    def __str__(self) -> str:
        if self.ok:
            return str(self.value).lower()
        return f"{self.fault.value}({self.detail})"


class _Fault(Exception):
    def __init__(self, outcome: EvalOutcome):
        self.outcome = outcome


def _operand_value(node, device: DeviceDescriptor):
    if isinstance(node, Literal):
        return node.value
    try:
        return device.attributes[node.key]
    except KeyError:
        raise _Fault(EvalOutcome(fault=Fault.ATTRIBUTE_MISSING, detail=node.key)) from None


def _variant(value) -> str:
    return "flag" if isinstance(value, bool) else "integer" if isinstance(value, int) else "text"


def _eval(ast: SelectorAst, device: DeviceDescriptor) -> bool:
    if isinstance(ast, Compare):
        a = _operand_value(ast.lhs, device)
        b = _operand_value(ast.rhs, device)
        if _variant(a) != _variant(b):
            raise _Fault(EvalOutcome(fault=Fault.TYPE_MISMATCH, detail=ast.op))
        if ast.op == "==":
            return a == b
        if ast.op == "!=":
            return a != b
        if _variant(a) != "integer":
            raise _Fault(EvalOutcome(fault=Fault.TYPE_MISMATCH, detail=ast.op))
        if ast.op == "<":
            return a < b
        if ast.op == "<=":
            return a <= b
        if ast.op == ">":
            return a > b
        return a >= b
    if isinstance(ast, Logic):
        left = _eval(ast.lhs, device)
        if ast.op == "&&":
            return left and _eval(ast.rhs, device)
        return left or _eval(ast.rhs, device)
    if isinstance(ast, Not):
        return not _eval(ast.child, device)
    if isinstance(ast, KindIs):
        return device.kind is ast.kind
    raise TypeError(f"not a selector node: {ast!r}")


def evaluate(ast: SelectorAst, device: DeviceDescriptor) -> EvalOutcome:
    """Evaluate ``ast`` on ``device``. Faults are returned, never raised.

    ``&&`` and ``||`` short-circuit left to right; faults in a skipped
    right operand are not reported.
    """
    try:
        return EvalOutcome(value=_eval(ast, device))
    except _Fault as f:
        return f.outcome
