"""Coefficient expression language: recursive-descent parser, evaluator and printer.

Grammar (``^`` is right-associative and binds tighter than unary minus)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('-' | '+') unary | power
    power   := primary ('^' unary)?
    primary := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

UNARY_FUNCS = {
    "sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt, "tanh": np.tanh, "abs": np.abs,
}
NARY_FUNCS = {"min": np.minimum, "max": np.maximum}
CONSTANTS = {"pi": float(np.pi)}


class ExprError(ValueError):
    def __init__(self, message: str, line: int, col: int, token: str = ""):
        self.line, self.col, self.token = line, col, token
        where = f"{line}:{col}"
        super().__init__(f"{where}: {message}" + (f" (at {token!r})" if token else ""))


class ExprSyntaxError(ExprError):
    pass


class ExprEvalError(ExprError):
    pass


# -- tree ------------------------------------------------------------------------------

_pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Num:
    value: float
    pos: tuple = _pos


@dataclass(frozen=True)
class Var:
    name: str
    pos: tuple = _pos


@dataclass(frozen=True)
class Unary:
    op: str
    operand: object
    pos: tuple = _pos


@dataclass(frozen=True)
class Bin:
    op: str
    left: object
    right: object
    pos: tuple = _pos


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple
    pos: tuple = _pos


# -- lexer -------------------------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+) | (?P<nl>\n)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _lex(src: str) -> list[_Tok]:
    toks, i, line, lstart = [], 0, 1, 0
    while i < len(src):
        m = _TOKEN.match(src, i)
        if not m:
            raise ExprSyntaxError("unexpected character", line, i - lstart + 1, src[i])
        kind = m.lastgroup
        if kind == "nl":
            line, lstart = line + 1, m.end()
        elif kind != "ws":
            toks.append(_Tok(kind, m.group(), line, i - lstart + 1))
        i = m.end()
    toks.append(_Tok("end", "", line, i - lstart + 1))
    return toks


class _Parser:
    def __init__(self, src, names):
        self.toks = _lex(src)
        self.i = 0
        self.names = names

    @property
    def tok(self):
        return self.toks[self.i]

    def error(self, msg, tok=None):
        tok = tok or self.tok
        raise ExprSyntaxError(msg, tok.line, tok.col, tok.text or "end of input")

    def take(self, text=None):
        tok = self.tok
        if text is not None and tok.text != text:
            self.error(f"expected {text!r}")
        self.i += 1
        return tok

    def parse(self):
        node = self.expr()
        if self.tok.kind != "end":
            self.error("unexpected token")
        return node

    def expr(self):
        node = self.term()
        while self.tok.text in ("+", "-"):
            op = self.take()
            node = Bin(op.text, node, self.term(), (op.line, op.col))
        return node

    def term(self):
        node = self.unary()
        while self.tok.text in ("*", "/"):
            op = self.take()
            node = Bin(op.text, node, self.unary(), (op.line, op.col))
        return node

    def unary(self):
        if self.tok.text in ("-", "+"):
            op = self.take()
            return Unary(op.text, self.unary(), (op.line, op.col))
        return self.power()

    def power(self):
        base = self.primary()
        if self.tok.text == "^":
            op = self.take()
            return Bin("^", base, self.unary(), (op.line, op.col))
        return base

    def primary(self):
        tok = self.tok
        if tok.kind == "num":
            self.take()
            return Num(float(tok.text), (tok.line, tok.col))
        if tok.kind == "name":
            self.take()
            if self.tok.text == "(":
                self.take("(")
                args = [self.expr()]
                while self.tok.text == ",":
                    self.take(",")
                    args.append(self.expr())
                self.take(")")
                if tok.text in UNARY_FUNCS:
                    if len(args) != 1:
                        raise ExprSyntaxError(f"{tok.text} takes 1 argument, got {len(args)}", tok.line, tok.col, tok.text)
                elif tok.text in NARY_FUNCS:
                    if len(args) < 2:
                        raise ExprSyntaxError(f"{tok.text} takes at least 2 arguments", tok.line, tok.col, tok.text)
                else:
                    raise ExprSyntaxError("unknown function", tok.line, tok.col, tok.text)
                return Call(tok.text, tuple(args), (tok.line, tok.col))
            if tok.text in UNARY_FUNCS or tok.text in NARY_FUNCS:
                raise ExprSyntaxError("function used without arguments", tok.line, tok.col, tok.text)
            if self.names is not None and tok.text not in self.names and tok.text not in CONSTANTS:
                raise ExprSyntaxError("unknown identifier", tok.line, tok.col, tok.text)
            return Var(tok.text, (tok.line, tok.col))
        if tok.text == "(":
            self.take("(")
            node = self.expr()
            self.take(")")
            return node
        self.error("unexpected token")


def parse_expr(src: str, names=None):
    """Parse ``src``; with ``names`` given, other identifiers are rejected."""
    return _Parser(src, None if names is None else set(names)).parse()


def free_names(node) -> set:
    if isinstance(node, Var):
        return set() if node.name in CONSTANTS else {node.name}
    if isinstance(node, Unary):
        return free_names(node.operand)
    if isinstance(node, Bin):
        return free_names(node.left) | free_names(node.right)
    if isinstance(node, Call):
        return set().union(*(free_names(a) for a in node.args))
    return set()


# -- evaluation ------------------------------------------------------------------------------


def evaluate(node, env: dict):
    """Evaluate with numpy broadcasting; ``env`` maps names to numbers or arrays."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        if node.name in env:
            return env[node.name]
        if node.name in CONSTANTS:
            return CONSTANTS[node.name]
        raise ExprEvalError("unbound identifier", *node.pos, node.name)
    if isinstance(node, Unary):
        v = evaluate(node.operand, env)
        return -v if node.op == "-" else v
    if isinstance(node, Bin):
        a, b = evaluate(node.left, env), evaluate(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            if np.any(np.asarray(b) == 0):
                raise ExprEvalError("division by zero", *node.pos, "/")
            return np.divide(a, b)
        return np.power(np.asarray(a, dtype=float), b)
    if isinstance(node, Call):
        args = [evaluate(a, env) for a in node.args]
        if node.name == "sqrt" and np.any(np.asarray(args[0]) < 0):
            raise ExprEvalError("sqrt of a negative number", *node.pos, "sqrt")
        if node.name in UNARY_FUNCS:
            return UNARY_FUNCS[node.name](args[0])
        out = args[0]
        for a in args[1:]:
            out = NARY_FUNCS[node.name](out, a)
        return out
    raise TypeError(f"not an expression node: {node!r}")


# -- printing ---------------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def _prec(node) -> int:
    if isinstance(node, Bin):
        return _PREC[node.op]
    if isinstance(node, Unary):
        return 3
    if isinstance(node, Num) and (node.value < 0 or str(node.value).startswith("-")):
        return 3
    return 5


def _wrap(node, need):
    s = to_str(node)
    return s if _prec(node) >= need else f"({s})"


def to_str(node) -> str:
    """Text that parses back to an equal tree, with the fewest parentheses."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.name}(" + ", ".join(to_str(a) for a in node.args) + ")"
    if isinstance(node, Unary):
        return node.op + _wrap(node.operand, 3)
    p = _PREC[node.op]
    if node.op == "^":
        return f"{_wrap(node.left, 5)}^{_wrap(node.right, 3)}"
    return f"{_wrap(node.left, p)} {node.op} {_wrap(node.right, p + 1)}"


@dataclass(frozen=True)
class CoefficientExpr:
    """A parsed expression plus the source text it came from."""

    tree: object
    src: str

    def __call__(self, **env):
        return evaluate(self.tree, env)

    def __str__(self):
        return to_str(self.tree)


def compile_expr(src: str, names=None) -> CoefficientExpr:
    return CoefficientExpr(parse_expr(src, names), src)
