"""Coefficient expression language: parse, print, evaluate, differentiate.

Grammar (see ``docs/expr.md``)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Variables are ``t`` and ``x1 .. xd``.  Trees are immutable and hashable.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "Expression", "Num", "Var", "Neg", "BinOp", "Call",
    "ExprSyntaxError", "UnknownIdentifierError", "EvaluationError", "DomainError",
    "parse", "to_string", "evaluate", "evaluate_array", "differentiate",
    "has_kinks", "variables", "FUNCTIONS",
]


class ExprSyntaxError(ValueError):
    def __init__(self, message: str, offset: int, expected: Sequence[str] = ()):
        self.offset = offset
        self.expected = tuple(expected)
        exp = f"; expected one of {', '.join(self.expected)}" if self.expected else ""
        super().__init__(f"{message} at byte offset {offset}{exp}")


class UnknownIdentifierError(ExprSyntaxError):
    pass


class EvaluationError(ArithmeticError):
    """Non-finite or undefined value produced while evaluating."""

    def __init__(self, message: str, index=None):
        self.index = index
        where = f" (at element {index})" if index is not None else ""
        super().__init__(message + where)


class DomainError(EvaluationError):
    pass


# ---------------------------------------------------------------- AST


class Expression:
    __slots__ = ()

    def __str__(self) -> str:
        return to_string(self)


@dataclass(frozen=True)
class Num(Expression):
    value: float


@dataclass(frozen=True)
class Var(Expression):
    name: str


@dataclass(frozen=True)
class Neg(Expression):
    arg: Expression


@dataclass(frozen=True)
class BinOp(Expression):
    op: str
    left: Expression
    right: Expression


@dataclass(frozen=True)
class Call(Expression):
    name: str
    args: tuple


# name -> arity.  sgn/pos/zero are piecewise-constant helpers emitted by
# differentiate for abs/min/max; they parse so derivatives round-trip.
FUNCTIONS = {
    "exp": 1, "ln": 1, "sqrt": 1, "abs": 1, "sin": 1, "cos": 1, "tanh": 1,
    "min": 2, "max": 2, "sgn": 1, "pos": 1, "zero": 1,
}
KINK_FUNCTIONS = frozenset({"abs", "min", "max"})
_VAR_RE = re.compile(r"^(t|x[1-9][0-9]*)$")

# ---------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(source: str):
    tokens = []
    raw = source.encode("utf-8")
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            byte_off = len(source[:pos].encode("utf-8"))
            while byte_off < len(raw) and raw[byte_off:byte_off + 1].isspace():
                byte_off += 1
            raise ExprSyntaxError(f"unexpected character {source[pos:].lstrip()[:1]!r}", byte_off,
                                  ("number", "name", "operator"))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), len(source[:start].encode("utf-8"))))
        pos = m.end()
    tokens.append(("eof", "", len(raw)))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, off = self.next()
        if text != value or kind != "op":
            found = text if kind != "eof" else "end of input"
            raise ExprSyntaxError(f"found {found!r}", off, (repr(value),))

    def parse(self) -> Expression:
        node = self.expr()
        kind, text, off = self.peek()
        if kind != "eof":
            raise ExprSyntaxError(f"unexpected token {text!r}", off, ("operator", "end of input"))
        return node

    def expr(self) -> Expression:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.next()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expression:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.next()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expression:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.next()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.next()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expression:
        kind, text, off = self.next()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if text not in FUNCTIONS:
                    raise UnknownIdentifierError(f"unknown function {text!r}", off,
                                                 sorted(FUNCTIONS))
                self.next()
                args = [self.expr()]
                while self.peek()[0] == "op" and self.peek()[1] == ",":
                    self.next()
                    args.append(self.expr())
                if len(args) != FUNCTIONS[text]:
                    raise ExprSyntaxError(
                        f"{text} takes {FUNCTIONS[text]} argument(s), got {len(args)}", off)
                self.expect(")")
                return Call(text, tuple(args))
            if not _VAR_RE.match(text):
                raise UnknownIdentifierError(f"unknown identifier {text!r}", off,
                                             ("t", "x1", "x2", "function call"))
            return Var(text)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = text if kind != "eof" else "end of input"
        raise ExprSyntaxError(f"found {found!r}", off, ("number", "name", "'('", "'-'"))


def parse(source: str) -> Expression:
    """Parse ``source`` into an expression tree.

    Raises :class:`ExprSyntaxError` (with ``offset`` and ``expected``) or
    :class:`UnknownIdentifierError`.
    """
    if isinstance(source, Expression):
        return source
    return _Parser(str(source)).parse()


# ---------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


def _prec(e: Expression) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return _PREC["neg"]
    return _PREC["atom"]


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_string(e: Expression) -> str:
    """Print with the minimum parentheses needed to re-parse to the same tree."""
    if isinstance(e, Num):
        s = _fmt_num(e.value)
        return f"({s})" if e.value < 0 else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_string(a) for a in e.args)})"
    if isinstance(e, Neg):
        inner = to_string(e.arg)
        if _prec(e.arg) < _PREC["neg"]:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        left, right = to_string(e.left), to_string(e.right)
        if e.op == "^":
            # base binds tighter than '^'; exponent is parsed as a unary
            if _prec(e.left) <= p:
                left = f"({left})"
            if _prec(e.right) < _PREC["neg"]:
                right = f"({right})"
            return f"{left}^{right}"
        if _prec(e.left) < p:
            left = f"({left})"
        # left associativity: equal precedence on the right needs parentheses
        if _prec(e.right) <= p:
            right = f"({right})"
        return f"{left} {e.op} {right}"
    raise TypeError(f"not an expression: {e!r}")


def variables(e: Expression) -> frozenset:
    if isinstance(e, Var):
        return frozenset({e.name})
    if isinstance(e, Neg):
        return variables(e.arg)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    if isinstance(e, Call):
        out = frozenset()
        for a in e.args:
            out |= variables(a)
        return out
    return frozenset()


def has_kinks(e: Expression) -> bool:
    """True if ``e`` uses abs/min/max or the piecewise-constant helpers."""
    if isinstance(e, Call):
        return e.name in KINK_FUNCTIONS or e.name in ("sgn", "pos", "zero") or any(
            has_kinks(a) for a in e.args)
    if isinstance(e, Neg):
        return has_kinks(e.arg)
    if isinstance(e, BinOp):
        return has_kinks(e.left) or has_kinks(e.right)
    return False


# ---------------------------------------------------------------- evaluation


def _first_bad(mask) -> object:
    if np.ndim(mask) == 0:
        return None
    return int(np.flatnonzero(np.ravel(mask))[0])


def _check(result, what: str):
    bad = ~np.isfinite(result)
    if np.any(bad):
        raise EvaluationError(f"overflow in {what}", _first_bad(bad))
    return result


def _eval(e: Expression, env: Mapping[str, object]):
    if isinstance(e, Num):
        return np.float64(e.value)
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise EvaluationError(f"variable {e.name} not bound at this point") from None
    if isinstance(e, Neg):
        return -_eval(e.arg, env)
    if isinstance(e, BinOp):
        a = _eval(e.left, env)
        b = _eval(e.right, env)
        if e.op == "+":
            return _check(a + b, "'+'")
        if e.op == "-":
            return _check(a - b, "'-'")
        if e.op == "*":
            return _check(a * b, "'*'")
        if e.op == "/":
            zero = np.asarray(b) == 0
            if np.any(zero):
                raise DomainError("division by zero", _first_bad(zero))
            return _check(a / b, "'/'")
        # '^'
        a_arr, b_arr = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
        bad = (a_arr < 0) & (b_arr != np.round(b_arr))
        if np.any(bad):
            raise DomainError("negative base with non-integer exponent", _first_bad(bad))
        bad = (a_arr == 0) & (b_arr < 0)
        if np.any(bad):
            raise DomainError("zero raised to a negative power", _first_bad(bad))
        return _check(np.power(a, b), "'^'")
    if isinstance(e, Call):
        args = [_eval(a, env) for a in e.args]
        x = args[0]
        name = e.name
        if name == "exp":
            return _check(np.exp(x), "exp")
        if name == "ln":
            bad = np.asarray(x) <= 0
            if np.any(bad):
                raise DomainError("ln of a nonpositive value", _first_bad(bad))
            return np.log(x)
        if name == "sqrt":
            bad = np.asarray(x) < 0
            if np.any(bad):
                raise DomainError("sqrt of a negative value", _first_bad(bad))
            return np.sqrt(x)
        if name == "abs":
            return np.abs(x)
        if name == "sin":
            return np.sin(x)
        if name == "cos":
            return np.cos(x)
        if name == "tanh":
            return np.tanh(x)
        if name == "min":
            return np.minimum(x, args[1])
        if name == "max":
            return np.maximum(x, args[1])
        if name == "sgn":
            return np.sign(x) + 0.0
        if name == "pos":
            return np.where(np.asarray(x) > 0, 1.0, 0.0)
        if name == "zero":
            return np.where(np.asarray(x) == 0, 1.0, 0.0)
    raise TypeError(f"not an expression: {e!r}")


def _env(t, x) -> dict:
    env = {"t": t}
    for k, xk in enumerate(x, start=1):
        env[f"x{k}"] = xk
    return env


def evaluate(e: Expression, point) -> float:
    """Evaluate at a single point ``(t, x)`` with ``x`` a sequence of coordinates.

    A bare sequence is read as ``x`` at ``t = 0``.
    """
    if isinstance(point, tuple) and len(point) == 2 and np.ndim(point[1]) == 1:
        t, x = point
    else:
        t, x = 0.0, point
    x = np.atleast_1d(np.asarray(x, dtype=float))
    with np.errstate(all="ignore"):
        return float(_eval(e, _env(np.float64(t), list(x))))


def evaluate_array(e: Expression, t, coords: Sequence) -> np.ndarray:
    """Vectorised evaluation; ``coords[k]`` holds the values of ``x{k+1}``.

    The result is broadcast to the common shape of the coordinate arrays.
    """
    arrays = [np.asarray(c, dtype=float) for c in coords]
    shape = np.broadcast_shapes(*(a.shape for a in arrays)) if arrays else np.shape(t)
    with np.errstate(all="ignore"):
        out = _eval(e, _env(np.asarray(t, float), arrays))
    return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()


def compile_scalar(e: Expression) -> Callable[..., float]:
    """Return ``f(t, *x) -> float``; convenience for quadrature and ODE codes."""
    def f(t, *x):
        with np.errstate(all="ignore"):
            return float(_eval(e, _env(np.float64(t), [np.float64(v) for v in x])))
    return f


# ---------------------------------------------------------------- differentiation

_ZERO, _ONE = Num(0.0), Num(1.0)


def _const(v: float) -> Expression:
    return Neg(Num(-v)) if v < 0 else Num(v)


def _num_value(e: Expression):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Neg) and isinstance(e.arg, Num):
        return -e.arg.value
    return None


def _add(a, b):
    va, vb = _num_value(a), _num_value(b)
    if va == 0:
        return b
    if vb == 0:
        return a
    if va is not None and vb is not None:
        return _const(va + vb)
    return BinOp("+", a, b)


def _sub(a, b):
    va, vb = _num_value(a), _num_value(b)
    if vb == 0:
        return a
    if va == 0:
        return _neg(b)
    if va is not None and vb is not None:
        return _const(va - vb)
    return BinOp("-", a, b)


def _mul(a, b):
    va, vb = _num_value(a), _num_value(b)
    if va == 0 or vb == 0:
        return _ZERO
    if va == 1:
        return b
    if vb == 1:
        return a
    if va is not None and vb is not None:
        return _const(va * vb)
    return BinOp("*", a, b)


def _div(a, b):
    va, vb = _num_value(a), _num_value(b)
    if va == 0:
        return _ZERO
    if vb == 1:
        return a
    return BinOp("/", a, b)


def _neg(a):
    va = _num_value(a)
    if va is not None:
        return _const(-va)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _pow(a, b):
    vb = _num_value(b)
    if vb == 1:
        return a
    if vb == 0:
        return _ONE
    return BinOp("^", a, b)


def differentiate(e: Expression, var: str) -> Expression:
    """Symbolic derivative of ``e`` with respect to ``var``.

    At kinks of abs/min/max the right-hand derivative is returned: for
    ``abs(u)`` at ``u == 0`` it is ``abs(u')``, for ``min``/``max`` at a tie it
    is ``min(u', v')`` / ``max(u', v')``.  Use :func:`has_kinks` to flag such
    results.
    """
    d = lambda node: differentiate(node, var)  # noqa: E731
    if isinstance(e, Num):
        return _ZERO
    if isinstance(e, Var):
        return _ONE if e.name == var else _ZERO
    if isinstance(e, Neg):
        return _neg(d(e.arg))
    if isinstance(e, BinOp):
        u, v = e.left, e.right
        if e.op == "+":
            return _add(d(u), d(v))
        if e.op == "-":
            return _sub(d(u), d(v))
        if e.op == "*":
            return _add(_mul(d(u), v), _mul(u, d(v)))
        if e.op == "/":
            return _div(_sub(_mul(d(u), v), _mul(u, d(v))), _pow(v, Num(2.0)))
        # '^'
        if var not in variables(v):
            n = _num_value(v)
            lower = _const(n - 1) if n is not None else _sub(v, _ONE)
            return _mul(_mul(v, _pow(u, lower)), d(u))
        # u^v * (v' ln u + v u'/u)
        return _mul(e, _add(_mul(d(v), Call("ln", (u,))), _div(_mul(v, d(u)), u)))
    if isinstance(e, Call):
        name = e.name
        u = e.args[0]
        du = d(u)
        if name == "exp":
            return _mul(e, du)
        if name == "ln":
            return _div(du, u)
        if name == "sqrt":
            return _div(du, _mul(Num(2.0), e))
        if name == "sin":
            return _mul(Call("cos", (u,)), du)
        if name == "cos":
            return _neg(_mul(Call("sin", (u,)), du))
        if name == "tanh":
            return _mul(_sub(_ONE, _pow(e, Num(2.0))), du)
        if name == "abs":
            if _num_value(du) == 0:
                return _ZERO
            return _add(_mul(Call("sgn", (u,)), du),
                        _mul(Call("zero", (u,)), Call("abs", (du,))))
        if name in ("min", "max"):
            v = e.args[1]
            dv = d(v)
            if _num_value(du) == 0 and _num_value(dv) == 0:
                return _ZERO
            first, second = (_sub(v, u), _sub(u, v)) if name == "min" else (_sub(u, v), _sub(v, u))
            return _add(_add(_mul(Call("pos", (first,)), du), _mul(Call("pos", (second,)), dv)),
                        _mul(Call("zero", (_sub(u, v),)), Call(name, (du, dv))))
        if name in ("sgn", "pos", "zero"):
            return _ZERO
    raise TypeError(f"not an expression: {e!r}")


ExprLike = Union[str, Expression]


def as_expression(value: ExprLike) -> Expression:
    if isinstance(value, Expression):
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return _const(float(value))
    return parse(value)


def constant_value(e: Expression):
    """Numeric value if ``e`` has no variables, else ``None``."""
    if variables(e):
        return None
    try:
        return evaluate(e, [0.0])
    except EvaluationError:
        return None

