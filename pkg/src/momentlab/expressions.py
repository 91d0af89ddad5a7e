"""Small expression grammar for log-density declarations.

Run configurations declare the convex exponent rho as a text expression.
The grammar is deliberately tiny: numeric literals, the coordinates ``x``
and ``y``, the shorthand ``r2`` for ``x^2 + y^2`` (or ``x^2`` in 1D), the
binary operators ``+ - * / ^`` (with ``^`` restricted to constant
exponents), unary minus, parentheses, and the functions ``exp`` and
``log``.  Expressions are parsed to a closed AST that supports numpy
evaluation and exact symbolic differentiation, so the same declaration
yields the value, gradient and Hessian evaluators that the measure
construction requires.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

__all__ = ["ExpressionError", "parse_expression", "Expression"]


class ExpressionError(ValueError):
    """Raised for syntax errors or unsupported constructs."""


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)

_FUNCTIONS = ("exp", "log")
_VARIABLES = ("x", "y")


def _tokenize(text):
    pos = 0
    tokens = []
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None or match.end() == pos:
            raise ExpressionError(f"unexpected character at position {pos}: {text[pos:]!r}")
        if match.group("num") is not None:
            tokens.append(("num", float(match.group("num"))))
        elif match.group("name") is not None:
            tokens.append(("name", match.group("name")))
        else:
            tokens.append(("op", match.group("op")))
        pos = match.end()
    tokens.append(("end", None))
    return tokens


# ---------------------------------------------------------------------------
# AST nodes


class _Node:
    def diff(self, var):
        raise NotImplementedError

    def evaluate(self, env):
        raise NotImplementedError

    def simplify(self):
        return self


@dataclass(frozen=True)
class _Const(_Node):
    value: float

    def diff(self, var):
        return _Const(0.0)

    def evaluate(self, env):
        return self.value

    def __str__(self):
        return repr(self.value)


@dataclass(frozen=True)
class _Var(_Node):
    name: str

    def diff(self, var):
        return _Const(1.0 if var == self.name else 0.0)

    def evaluate(self, env):
        return env[self.name]

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class _Add(_Node):
    left: _Node
    right: _Node

    def diff(self, var):
        return _Add(self.left.diff(var), self.right.diff(var))

    def evaluate(self, env):
        return self.left.evaluate(env) + self.right.evaluate(env)

    def simplify(self):
        left, right = self.left.simplify(), self.right.simplify()
        if isinstance(left, _Const) and isinstance(right, _Const):
            return _Const(left.value + right.value)
        if isinstance(left, _Const) and left.value == 0.0:
            return right
        if isinstance(right, _Const) and right.value == 0.0:
            return left
        return _Add(left, right)

    def __str__(self):
        return f"({self.left} + {self.right})"


@dataclass(frozen=True)
class _Mul(_Node):
    left: _Node
    right: _Node

    def diff(self, var):
        return _Add(
            _Mul(self.left.diff(var), self.right),
            _Mul(self.left, self.right.diff(var)),
        )

    def evaluate(self, env):
        return self.left.evaluate(env) * self.right.evaluate(env)

    def simplify(self):
        left, right = self.left.simplify(), self.right.simplify()
        if isinstance(left, _Const) and isinstance(right, _Const):
            return _Const(left.value * right.value)
        for a, b in ((left, right), (right, left)):
            if isinstance(a, _Const):
                if a.value == 0.0:
                    return _Const(0.0)
                if a.value == 1.0:
                    return b
        return _Mul(left, right)

    def __str__(self):
        return f"({self.left} * {self.right})"


@dataclass(frozen=True)
class _Pow(_Node):
    base: _Node
    exponent: float

    def diff(self, var):
        n = self.exponent
        if n == 0:
            return _Const(0.0)
        inner = self.base.diff(var)
        if n == 1:
            return inner
        return _Mul(_Mul(_Const(n), _Pow(self.base, n - 1)), inner)

    def evaluate(self, env):
        base = self.base.evaluate(env)
        if self.exponent == int(self.exponent):
            return base ** int(self.exponent)
        return np.power(base, self.exponent)

    def simplify(self):
        base = self.base.simplify()
        if self.exponent == 0:
            return _Const(1.0)
        if self.exponent == 1:
            return base
        if isinstance(base, _Const):
            return _Const(base.value ** self.exponent)
        return _Pow(base, self.exponent)

    def __str__(self):
        return f"({self.base} ^ {self.exponent})"


@dataclass(frozen=True)
class _Func(_Node):
    name: str
    arg: _Node

    def diff(self, var):
        inner = self.arg.diff(var)
        if self.name == "exp":
            return _Mul(self, inner)
        # d/dt log(u) = u'/u
        return _Mul(_Pow(self.arg, -1.0), inner)

    def evaluate(self, env):
        value = self.arg.evaluate(env)
        return np.exp(value) if self.name == "exp" else np.log(value)

    def simplify(self):
        return _Func(self.name, self.arg.simplify())

    def __str__(self):
        return f"{self.name}({self.arg})"


# ---------------------------------------------------------------------------
# Parser (recursive descent, ^ right-associative with constant exponent)


class _Parser:
    def __init__(self, tokens, dimension):
        self.tokens = tokens
        self.pos = 0
        self.dimension = dimension

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect_op(self, op):
        kind, value = self.advance()
        if kind != "op" or value != op:
            raise ExpressionError(f"expected {op!r}, found {value!r}")

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            raise ExpressionError(f"trailing input near {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek() == ("op", "+") or self.peek() == ("op", "-"):
            _, op = self.advance()
            right = self.term()
            if op == "-":
                right = _Mul(_Const(-1.0), right)
            node = _Add(node, right)
        return node

    def term(self):
        node = self.factor()
        while self.peek() == ("op", "*") or self.peek() == ("op", "/"):
            _, op = self.advance()
            right = self.factor()
            if op == "/":
                right = _Pow(right, -1.0)
            node = _Mul(node, right)
        return node

    def factor(self):
        node = self.unary()
        if self.peek() == ("op", "^"):
            self.advance()
            exponent = self.factor()
            exponent = exponent.simplify()
            if not isinstance(exponent, _Const):
                raise ExpressionError("exponents must be constants")
            return _Pow(node, exponent.value)
        return node

    def unary(self):
        if self.peek() == ("op", "-"):
            self.advance()
            return _Mul(_Const(-1.0), self.unary())
        return self.atom()

    def atom(self):
        kind, value = self.advance()
        if kind == "num":
            return _Const(value)
        if kind == "name":
            if value in _FUNCTIONS:
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                return _Func(value, arg)
            if value == "r2":
                node = _Pow(_Var("x"), 2.0)
                if self.dimension == 2:
                    node = _Add(node, _Pow(_Var("y"), 2.0))
                return node
            if value in _VARIABLES:
                index = _VARIABLES.index(value)
                if index >= self.dimension:
                    raise ExpressionError(
                        f"coordinate {value!r} not available in dimension {self.dimension}"
                    )
                return _Var(value)
            raise ExpressionError(f"unknown identifier {value!r}")
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ExpressionError(f"unexpected token {value!r}")


class Expression:
    """Parsed scalar field on R^d with exact derivative evaluators.

    ``value``, ``gradient`` and ``hessian`` accept arrays of shape
    ``(..., d)`` and return arrays of shape ``(...)``, ``(..., d)`` and
    ``(..., d, d)`` respectively.
    """

    def __init__(self, text, dimension):
        if dimension not in (1, 2):
            raise ExpressionError("dimension must be 1 or 2")
        self.text = text
        self.dimension = dimension
        self._root = _Parser(_tokenize(text), dimension).parse().simplify()
        names = _VARIABLES[:dimension]
        self._grad_nodes = [self._root.diff(n).simplify() for n in names]
        self._hess_nodes = [
            [g.diff(n).simplify() for n in names] for g in self._grad_nodes
        ]

    def _env(self, points):
        points = np.asarray(points, dtype=float)
        if points.shape[-1] != self.dimension:
            raise ExpressionError(
                f"points have last dimension {points.shape[-1]}, expected {self.dimension}"
            )
        env = {"x": points[..., 0]}
        if self.dimension == 2:
            env["y"] = points[..., 1]
        return env, points.shape[:-1]

    def value(self, points):
        env, shape = self._env(points)
        return np.broadcast_to(np.asarray(self._root.evaluate(env), dtype=float), shape).copy()

    def gradient(self, points):
        env, shape = self._env(points)
        out = np.empty(shape + (self.dimension,))
        for i, node in enumerate(self._grad_nodes):
            out[..., i] = np.broadcast_to(np.asarray(node.evaluate(env), dtype=float), shape)
        return out

    def hessian(self, points):
        env, shape = self._env(points)
        out = np.empty(shape + (self.dimension, self.dimension))
        for i in range(self.dimension):
            for j in range(self.dimension):
                value = np.asarray(self._hess_nodes[i][j].evaluate(env), dtype=float)
                out[..., i, j] = np.broadcast_to(value, shape)
        return out

    def __str__(self):
        return str(self._root)


def parse_expression(text, dimension):
    """Parse ``text`` into an :class:`Expression` over R^dimension."""
    return Expression(text, dimension)
