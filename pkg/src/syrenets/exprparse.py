"""Reader for the infix form produced by :func:`syrenets.expr.pretty_print`.

Grammar (see docs/grammar.md)::

    sum     := product ("+" product)*
    product := factor ("*" factor)*
    factor  := number | name | func "(" sum ")" | "(" sum ")"
    func    := "sin" | "cos"
    name    := ("q" | "qd" | "qdd") digits | "c" digits
    number  := ["-"] digits ["." digits] [("e" | "E") ["+" | "-"] digits]
"""
from __future__ import annotations

import re

from .expr import Expr, ExprStore

_TOKEN = re.compile(
    r"\s*(?:(?P<num>-?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|-?inf)|(?P<name>[a-z]+\d*)|(?P<op>[+*()]))"
)


class ParseError(ValueError):
    pass


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character at offset {pos}: {text[pos:pos + 10]!r}")
        kind = m.lastgroup
        tokens.append((kind, m.group(kind)))
        pos = m.end()
    return tokens


def parse_expr(text: str, store: ExprStore) -> Expr:
    tokens = _tokenize(text)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else (None, None)

    def take(expected=None):
        nonlocal pos
        tok = peek()
        if tok[0] is None or (expected is not None and tok[1] != expected):
            raise ParseError(f"expected {expected or 'token'} at token {pos}, got {tok[1]!r}")
        pos += 1
        return tok

    def parse_sum():
        acc = parse_product()
        while peek() == ("op", "+"):
            take("+")
            acc = store.add(acc, parse_product())
        return acc

    def parse_product():
        acc = parse_factor()
        while peek() == ("op", "*"):
            take("*")
            acc = store.mul(acc, parse_factor())
        return acc

    def parse_factor():
        kind, text_ = take()
        if kind == "num":
            return store.const(float(text_))
        if kind == "op" and text_ == "(":
            inner = parse_sum()
            take(")")
            return inner
        if kind == "name":
            if text_ in ("sin", "cos"):
                take("(")
                inner = parse_sum()
                take(")")
                return store.sin(inner) if text_ == "sin" else store.cos(inner)
            if text_[0] == "c" and text_[1:].isdigit():
                return store.coeff(int(text_[1:]))
            try:
                return store.var(store.layout.slot(text_))
            except IndexError as exc:
                raise ParseError(str(exc)) from None
        raise ParseError(f"unexpected token {text_!r}")

    result = parse_sum()
    if pos != len(tokens):
        raise ParseError(f"trailing input at token {pos}: {tokens[pos][1]!r}")
    return result
