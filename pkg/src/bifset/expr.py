"""Expression trees over a fixed variable list: parsing, evaluation, differentiation.

The accepted language is small on purpose: constants, variables, ``+ - * /``
(division only by constant subexpressions, folded at parse time), integer
powers written ``x^k`` with k >= 0, and ``exp(...)``.  ``sin``/``cos`` are
admitted only when the caller explicitly opts into non-definable inputs.
Complex mode restricts the language to polynomials.

Grammar (EBNF):

    expr    = term , { ("+" | "-") , term } ;
    term    = factor , { ("*" | "/") , factor } ;
    factor  = { "+" | "-" } , power ;
    power   = atom , [ "^" , integer ] ;
    atom    = number | name | name , "(" , expr , ")" | "(" , expr , ")" ;

Evaluation never raises on overflow: results saturate to +/-inf so callers
can detect the condition with a finiteness check instead of meeting a NaN.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

Scalar = Union[float, complex]

_REAL_FUNCTIONS = ("exp",)
_NONDEFINABLE_FUNCTIONS = ("sin", "cos")


class ExpressionError(ValueError):
    """Malformed expression or invalid use of one."""


class ParseError(ExpressionError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


# ---- AST ----

class Node:
    __slots__ = ()


@dataclass(frozen=True)
class Const(Node):
    value: float


@dataclass(frozen=True)
class Var(Node):
    name: str


@dataclass(frozen=True)
class Add(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Sub(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Mul(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: int


@dataclass(frozen=True)
class Neg(Node):
    arg: Node


@dataclass(frozen=True)
class Call(Node):
    func: str  # "exp" | "sin" | "cos"
    arg: Node


def _is_const(n: Node, v: float | None = None) -> bool:
    return isinstance(n, Const) and (v is None or n.value == v)


# Smart constructors fold constants so derivative trees stay small.

def _add(a: Node, b: Node) -> Node:
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def _sub(a: Node, b: Node) -> Node:
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    return Sub(a, b)


def _mul(a: Node, b: Node) -> Node:
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Mul(a, b)


def _pow(base: Node, k: int) -> Node:
    if k == 0:
        return Const(1.0)
    if k == 1:
        return base
    if _is_const(base):
        return Const(base.value ** k)
    return Pow(base, k)


def _neg(a: Node) -> Node:
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


# ---- Differentiation ----

def _diff(n: Node, var: str) -> Node:
    if isinstance(n, Const):
        return Const(0.0)
    if isinstance(n, Var):
        return Const(1.0 if n.name == var else 0.0)
    if isinstance(n, Add):
        return _add(_diff(n.left, var), _diff(n.right, var))
    if isinstance(n, Sub):
        return _sub(_diff(n.left, var), _diff(n.right, var))
    if isinstance(n, Mul):
        return _add(_mul(_diff(n.left, var), n.right), _mul(n.left, _diff(n.right, var)))
    if isinstance(n, Pow):
        inner = _diff(n.base, var)
        return _mul(_mul(Const(float(n.exponent)), _pow(n.base, n.exponent - 1)), inner)
    if isinstance(n, Neg):
        return _neg(_diff(n.arg, var))
    if isinstance(n, Call):
        inner = _diff(n.arg, var)
        if n.func == "exp":
            return _mul(Call("exp", n.arg), inner)
        if n.func == "sin":
            return _mul(Call("cos", n.arg), inner)
        if n.func == "cos":
            return _neg(_mul(Call("sin", n.arg), inner))
    raise ExpressionError(f"cannot differentiate node {n!r}")


# ---- Compilation ----

def _ipow(x, k: int):
    # Repeated squaring with plain multiplications: overflow becomes inf
    # instead of raising, for floats and complex alike.
    result = x * 0 + 1
    base = x
    while k:
        if k & 1:
            result = result * base
        base = base * base if k > 1 else base
        k >>= 1
    return result


def _exp_scalar(x):
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def _compile(n: Node, index: dict[str, int], lib: str) -> Callable:
    """lib is "scalar" (python floats/complex) or "array" (numpy)."""
    if isinstance(n, Const):
        v = n.value
        return lambda vals: v
    if isinstance(n, Var):
        i = index[n.name]
        return lambda vals: vals[i]
    if isinstance(n, Add):
        fa, fb = _compile(n.left, index, lib), _compile(n.right, index, lib)
        return lambda vals: fa(vals) + fb(vals)
    if isinstance(n, Sub):
        fa, fb = _compile(n.left, index, lib), _compile(n.right, index, lib)
        return lambda vals: fa(vals) - fb(vals)
    if isinstance(n, Mul):
        fa, fb = _compile(n.left, index, lib), _compile(n.right, index, lib)
        return lambda vals: fa(vals) * fb(vals)
    if isinstance(n, Pow):
        fb, k = _compile(n.base, index, lib), n.exponent
        if lib == "array":
            return lambda vals: fb(vals) ** k
        return lambda vals: _ipow(fb(vals), k)
    if isinstance(n, Neg):
        fa = _compile(n.arg, index, lib)
        return lambda vals: -fa(vals)
    if isinstance(n, Call):
        fa = _compile(n.arg, index, lib)
        if lib == "array":
            fn = {"exp": np.exp, "sin": np.sin, "cos": np.cos}[n.func]
            return lambda vals: fn(fa(vals))
        fn = {"exp": _exp_scalar, "sin": math.sin, "cos": math.cos}[n.func]
        return lambda vals: fn(fa(vals))
    raise ExpressionError(f"cannot compile node {n!r}")


# ---- Printing ----

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 2, 3, 4


def _prec(n: Node) -> int:
    if isinstance(n, (Add, Sub)):
        return _PREC_ADD
    if isinstance(n, Mul):
        return _PREC_MUL
    if isinstance(n, Neg):
        return _PREC_NEG
    if isinstance(n, Pow):
        return _PREC_POW
    return _PREC_ATOM


def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return repr(v)
    return repr(v)


def _to_text(n: Node) -> str:
    def wrap(child: Node, minimum: int) -> str:
        s = _to_text(child)
        return f"({s})" if _prec(child) < minimum else s

    if isinstance(n, Const):
        return _fmt_const(n.value)
    if isinstance(n, Var):
        return n.name
    if isinstance(n, Add):
        return f"{wrap(n.left, _PREC_ADD)} + {wrap(n.right, _PREC_ADD + 1)}"
    if isinstance(n, Sub):
        return f"{wrap(n.left, _PREC_ADD)} - {wrap(n.right, _PREC_ADD + 1)}"
    if isinstance(n, Mul):
        return f"{wrap(n.left, _PREC_MUL)}*{wrap(n.right, _PREC_MUL + 1)}"
    if isinstance(n, Neg):
        return f"-{wrap(n.arg, _PREC_NEG + 1)}"
    if isinstance(n, Pow):
        return f"{wrap(n.base, _PREC_ATOM)}^{n.exponent}"
    if isinstance(n, Call):
        return f"{n.func}({_to_text(n.arg)})"
    raise ExpressionError(f"cannot print node {n!r}")


# ---- Tokenizer / parser ----

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                break
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup is None:
            break
        tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


def _contains_var(n: Node) -> bool:
    if isinstance(n, Var):
        return True
    if isinstance(n, (Add, Sub, Mul)):
        return _contains_var(n.left) or _contains_var(n.right)
    if isinstance(n, Pow):
        return _contains_var(n.base)
    if isinstance(n, (Neg, Call)):
        return _contains_var(n.arg if isinstance(n, Call) else n.arg)
    return False


def _eval_const(n: Node) -> float:
    fn = _compile(n, {}, "scalar")
    return fn(())


class _Parser:
    def __init__(self, tokens, variables: Sequence[str], functions: tuple[str, ...]):
        self.tokens = tokens
        self.i = 0
        self.variables = set(variables)
        self.functions = functions

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, val, pos = self.peek()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}", pos)
        return self.advance()

    def parse(self) -> Node:
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected trailing input {val!r}", pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.advance()
                rhs = self.term()
                node = _add(node, rhs) if val == "+" else _sub(node, rhs)
            else:
                return node

    def term(self) -> Node:
        node = self.factor()
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val == "*":
                self.advance()
                node = _mul(node, self.factor())
            elif kind == "op" and val == "/":
                self.advance()
                rhs = self.factor()
                if _contains_var(rhs):
                    raise ParseError("division requires a constant divisor", pos)
                denom = _eval_const(rhs)
                if denom == 0.0:
                    raise ParseError("division by zero", pos)
                node = _mul(node, Const(1.0 / denom))
            else:
                return node

    def factor(self) -> Node:
        kind, val, _ = self.peek()
        if kind == "op" and val in "+-":
            self.advance()
            inner = self.factor()
            return inner if val == "+" else _neg(inner)
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        kind, val, pos = self.peek()
        if kind == "op" and val == "^":
            self.advance()
            kkind, kval, kpos = self.peek()
            if kkind != "num" or not re.fullmatch(r"\d+", kval):
                raise ParseError("exponent must be a non-negative integer", kpos)
            self.advance()
            node = _pow(base, int(kval))
            nkind, nval, npos = self.peek()
            if nkind == "op" and nval == "^":
                raise ParseError("chained '^' needs explicit parentheses", npos)
            return node
        return base

    def atom(self) -> Node:
        kind, val, pos = self.advance()
        if kind == "num":
            return Const(float(val))
        if kind == "name":
            nkind, nval, _ = self.peek()
            if nkind == "op" and nval == "(":
                if val not in self.functions:
                    raise ParseError(f"unknown function {val!r}", pos)
                self.advance()
                arg = self.expr()
                self.expect_op(")")
                return Call(val, arg)
            if val not in self.variables:
                raise ParseError(f"undeclared variable {val!r}", pos)
            return Var(val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ParseError(f"unexpected token {val!r}" if val else "unexpected end of input", pos)


# ---- Public expression type ----

@dataclass(frozen=True, eq=False)
class Expression:
    """A function of ``variables`` with real or complex semantics."""

    root: Node
    variables: tuple[str, ...]
    mode: str  # "real" | "complex"

    def __post_init__(self):
        if self.mode not in ("real", "complex"):
            raise ExpressionError(f"unknown mode {self.mode!r}")
        _validate(self.root, self.mode)

    # -- evaluation --

    def _point_fn(self) -> Callable:
        fn = self.__dict__.get("_pf")
        if fn is None:
            index = {name: i for i, name in enumerate(self.variables)}
            fn = _compile(self.root, index, "scalar")
            object.__setattr__(self, "_pf", fn)
        return fn

    def _array_fn(self) -> Callable:
        fn = self.__dict__.get("_af")
        if fn is None:
            index = {name: i for i, name in enumerate(self.variables)}
            fn = _compile(self.root, index, "array")
            object.__setattr__(self, "_af", fn)
        return fn

    def evaluate(self, point: Sequence[Scalar]) -> Scalar:
        if len(point) != len(self.variables):
            raise ExpressionError(
                f"expected {len(self.variables)} coordinates, got {len(point)}")
        cast = complex if self.mode == "complex" else float
        return self._point_fn()(tuple(cast(p) for p in point))

    def evaluate_grid(self, arrays: Sequence[np.ndarray]) -> np.ndarray:
        if len(arrays) != len(self.variables):
            raise ExpressionError(
                f"expected {len(self.variables)} coordinate arrays, got {len(arrays)}")
        with np.errstate(all="ignore"):
            out = self._array_fn()(tuple(arrays))
        if np.isscalar(out) or getattr(out, "shape", None) == ():
            out = np.full_like(arrays[0], out, dtype=np.result_type(out, arrays[0]))
        return out

    __call__ = evaluate

    # -- calculus --

    def partial(self, var: str | int) -> "Expression":
        name = self.variables[var] if isinstance(var, int) else var
        if name not in self.variables:
            raise ExpressionError(f"unknown variable {name!r}")
        return Expression(_diff(self.root, name), self.variables, self.mode)

    def gradient(self) -> "Gradient":
        g = self.__dict__.get("_grad")
        if g is None:
            g = Gradient(tuple(self.partial(v) for v in self.variables), self.mode)
            object.__setattr__(self, "_grad", g)
        return g

    def hessian(self) -> list[list["Expression"]]:
        parts = [self.partial(v) for v in self.variables]
        return [[p.partial(v) for v in self.variables] for p in parts]

    # -- text --

    def text(self) -> str:
        return _to_text(self.root)

    def __str__(self) -> str:
        return self.text()

    def __repr__(self) -> str:
        return f"Expression({self.text()!r}, variables={self.variables}, mode={self.mode!r})"


@dataclass(frozen=True, eq=False)
class Gradient:
    """Gradient vector.  In complex mode the components are the conjugated
    holomorphic partials, so that the tangency condition reads grad = lambda*x
    with the Hermitian inner product."""

    components: tuple[Expression, ...]
    mode: str

    def evaluate(self, point: Sequence[Scalar]) -> np.ndarray:
        vals = [c.evaluate(point) for c in self.components]
        if self.mode == "complex":
            return np.conj(np.array(vals, dtype=complex))
        return np.array(vals, dtype=float)

    def evaluate_grid(self, arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
        grids = [c.evaluate_grid(arrays) for c in self.components]
        if self.mode == "complex":
            return [np.conj(g) for g in grids]
        return grids

    def __len__(self) -> int:
        return len(self.components)


def _validate(n: Node, mode: str) -> None:
    if isinstance(n, Pow):
        if n.exponent < 0:
            raise ExpressionError("integer powers must have non-negative exponents")
        _validate(n.base, mode)
    elif isinstance(n, (Add, Sub, Mul)):
        _validate(n.left, mode)
        _validate(n.right, mode)
    elif isinstance(n, Neg):
        _validate(n.arg, mode)
    elif isinstance(n, Call):
        if mode == "complex":
            raise ExpressionError(f"{n.func}() is not available in complex mode")
        _validate(n.arg, mode)


def parse(text: str, variables: Sequence[str], mode: str = "real",
          allow_nondefinable: bool = False) -> Expression:
    """Parse ``text`` over the ordered variable list.

    sin/cos are rejected unless ``allow_nondefinable`` is set; complex mode
    additionally rejects exp (polynomials only).
    """
    if mode not in ("real", "complex"):
        raise ExpressionError(f"unknown mode {mode!r}")
    names = tuple(variables)
    if len(set(names)) != len(names):
        raise ExpressionError("duplicate variable names")
    functions: tuple[str, ...] = ()
    if mode == "real":
        functions = _REAL_FUNCTIONS + (_NONDEFINABLE_FUNCTIONS if allow_nondefinable else ())
    tokens = _tokenize(text)
    root = _Parser(tokens, names, functions).parse()
    return Expression(root, names, mode)


def infer_variables(text: str) -> tuple[str, ...]:
    """Variable names in order of first appearance (function names excluded)."""
    seen: list[str] = []
    known = set(_REAL_FUNCTIONS) | set(_NONDEFINABLE_FUNCTIONS)
    for kind, val, pos in _tokenize(text):
        if kind == "name" and val not in known and val not in seen:
            seen.append(val)
    return tuple(seen)
