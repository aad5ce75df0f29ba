"""Scalar expression language for coefficients, nonlinearities and Lyapunov functions.

Grammar (see ``docs/expr.md``)::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := ('-' | '+') unary | power
    power := atom ('^' unary)?
    atom  := NUMBER | NAME | NAME '(' [expr (',' expr)*] ')' | '(' expr ')'

Variables are ``t``, ``x1`` .. ``xd`` and ``v``.  ``norm2`` is the *squared*
Euclidean norm of ``(x1, .., xd)``.

Evaluation is vectorized: ``x`` may carry any leading batch shape, and domain
violations (log or sqrt of a negative number, division by zero) raise
:class:`EvalDomainError` instead of producing NaN.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

ROLES = ("drift", "diffusion", "nonlinearity", "terminal", "lyapunov", "lyapunov-elliptic")

_ROLE_ALIASES = {
    "drift-component": "drift",
    "diffusion-entry": "diffusion",
    "f": "nonlinearity",
    "g": "terminal",
    "V": "lyapunov",
}

FUNCTIONS = {
    "exp": 1, "log": 1, "sqrt": 1, "abs": 1, "sin": 1, "cos": 1,
    "min": 2, "max": 2, "pow": 2, "norm2": 0,
}

BINARY = ("+", "-", "*", "/", "^")

# opcodes shared with the compiled VM in _kernels.pyx
OP_CONST, OP_T, OP_X, OP_V, OP_NORM2 = 0, 1, 2, 3, 4
OP_NEG, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW = 5, 6, 7, 8, 9, 10
OP_EXP, OP_LOG, OP_SQRT, OP_ABS, OP_SIN, OP_COS, OP_MIN, OP_MAX = 11, 12, 13, 14, 15, 16, 17, 18

_BIN_OPS = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}
_CALL_OPS = {
    "exp": OP_EXP, "log": OP_LOG, "sqrt": OP_SQRT, "abs": OP_ABS, "sin": OP_SIN,
    "cos": OP_COS, "min": OP_MIN, "max": OP_MAX, "pow": OP_POW, "norm2": OP_NORM2,
}

# error codes reported by both evaluators
ERR_LOG, ERR_SQRT, ERR_DIV, ERR_POW = 1, 2, 3, 4
ERR_MESSAGES = {
    ERR_LOG: "log of a non-positive number",
    ERR_SQRT: "sqrt of a negative number",
    ERR_DIV: "division by zero",
    ERR_POW: "pow with undefined result",
}

EPS_CBRT = 6.06e-6
EPS_QRT = 1.22e-4


class ExprError(ValueError):
    """Base class for expression parse errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifier(ExprError):
    pass


class IllegalVariable(ExprError):
    pass


class ArityError(ExprError):
    pass


class EvalDomainError(ArithmeticError):
    """Evaluation left the domain of a primitive (log, sqrt, division, pow)."""

    def __init__(self, message, subexpr=None, where=None):
        text = message
        if subexpr is not None:
            text += f" in '{subexpr}'"
        if where is not None:
            text += f" ({where})"
        super().__init__(text)
        self.subexpr = subexpr
        self.where = where


@dataclass(frozen=True)
class Node:
    """Immutable expression tree node.

    ``kind`` is one of ``const``, ``var``, ``neg``, ``binop``, ``call``.
    ``name`` holds the variable name, operator symbol or function name.
    """

    kind: str
    name: str = ""
    value: float = 0.0
    children: tuple = ()

    def __str__(self):
        return pretty(self)


def allowed_variables(role, d):
    role = _ROLE_ALIASES.get(role, role)
    xs = {f"x{i}" for i in range(1, d + 1)}
    if role == "nonlinearity":
        return xs | {"t", "v"}
    if role in ("terminal", "lyapunov-elliptic"):
        return xs
    if role in ("drift", "diffusion", "lyapunov"):
        return xs | {"t"}
    raise ValueError(f"unknown expression role {role!r}")


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(text):
    pos = 0
    tokens = []
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text, role, d):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0
        self.role = role
        self.d = d
        self.allowed = allowed_variables(role, d)

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, off = self.take()
        if text != value or kind != "op":
            got = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, got {got}", off)

    def parse(self):
        node = self.expr()
        kind, text, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", off)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Node("binop", op, children=(node, self.term()))
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Node("binop", op, children=(node, self.unary()))
        return node

    def unary(self):
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Node("neg", children=(self.unary(),))
        if kind == "op" and text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return Node("binop", "^", children=(base, self.unary()))
        return base

    def atom(self):
        kind, text, off = self.take()
        if kind == "num":
            return Node("const", value=float(text))
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            return self.name(text, off)
        got = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {got}", off)

    def name(self, text, off):
        has_args = self.peek()[0] == "op" and self.peek()[1] == "("
        if text in FUNCTIONS:
            args = []
            if has_args:
                self.take()
                if not (self.peek()[0] == "op" and self.peek()[1] == ")"):
                    args.append(self.expr())
                    while self.peek()[0] == "op" and self.peek()[1] == ",":
                        self.take()
                        args.append(self.expr())
                self.expect(")")
            elif FUNCTIONS[text] != 0:
                raise ArityError(f"function '{text}' needs {FUNCTIONS[text]} argument(s) (offset {off})")
            if len(args) != FUNCTIONS[text]:
                raise ArityError(
                    f"function '{text}' takes {FUNCTIONS[text]} argument(s), got {len(args)} (offset {off})"
                )
            return Node("call", text, children=tuple(args))
        if has_args:
            raise UnknownIdentifier(f"unknown function '{text}' (offset {off})")
        if not _is_variable(text):
            raise UnknownIdentifier(f"unknown identifier '{text}' (offset {off})")
        if text.startswith("x") and int(text[1:]) > self.d:
            raise UnknownIdentifier(f"unknown identifier '{text}': dimension is {self.d} (offset {off})")
        if text not in self.allowed:
            raise IllegalVariable(f"variable '{text}' is not allowed in a {self.role} expression (offset {off})")
        return Node("var", text)


def _is_variable(name):
    return name in ("t", "v") or re.fullmatch(r"x[1-9]\d*", name) is not None


def parse(text: str, role: str, d: int) -> Node:
    """Parse ``text`` for the given role and state dimension."""
    if not isinstance(text, str) or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    role = _ROLE_ALIASES.get(role, role)
    if role not in ROLES:
        raise ValueError(f"unknown expression role {role!r}")
    return _Parser(text, role, d).parse()


def pretty(node: Node) -> str:
    """Fully parenthesized rendering that re-parses to the same tree."""
    if node.kind == "const":
        if node.value < 0 or math.copysign(1.0, node.value) < 0:
            return f"(-{repr(-node.value)})"
        return repr(node.value)
    if node.kind == "var":
        return node.name
    if node.kind == "neg":
        return f"(-{pretty(node.children[0])})"
    if node.kind == "binop":
        a, b = node.children
        return f"({pretty(a)} {node.name} {pretty(b)})"
    if node.name == "norm2":
        return "norm2"
    return f"{node.name}(" + ", ".join(pretty(c) for c in node.children) + ")"


def variables(node: Node) -> set:
    """Names of all variables referenced by ``node`` (``norm2`` counts as x)."""
    out = set()
    stack = [node]
    while stack:
        n = stack.pop()
        if n.kind == "var":
            out.add(n.name)
        elif n.kind == "call" and n.name == "norm2":
            out.add("norm2")
        stack.extend(n.children)
    return out


def depends_on(node, name):
    vs = variables(node)
    if name == "x":
        return "norm2" in vs or any(v.startswith("x") for v in vs)
    return name in vs


def is_constant(node):
    return not variables(node)


# ---------------------------------------------------------------- evaluation

class _Ctx:
    __slots__ = ("t", "x", "v", "shape")

    def __init__(self, t, x, v):
        self.x = x
        self.t = t
        self.v = v
        self.shape = x.shape[:-1]


def _fail(code, node, mask=None, ctx=None):
    where = None
    if mask is not None and ctx is not None and np.ndim(mask):
        idx = tuple(int(i[0]) for i in np.nonzero(mask))
        where = f"first at batch index {idx}"
    raise EvalDomainError(ERR_MESSAGES[code], pretty(node), where)


def _ev(node, ctx):
    kind = node.kind
    if kind == "const":
        return node.value
    if kind == "var":
        name = node.name
        if name == "t":
            if ctx.t is None:
                raise KeyError("variable 't' is not bound")
            return ctx.t
        if name == "v":
            if ctx.v is None:
                raise KeyError("variable 'v' is not bound")
            return ctx.v
        return ctx.x[..., int(name[1:]) - 1]
    if kind == "neg":
        return -_ev(node.children[0], ctx)
    if kind == "binop":
        a = _ev(node.children[0], ctx)
        b = _ev(node.children[1], ctx)
        op = node.name
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            bad = np.asarray(b) == 0.0
            if bad.any():
                _fail(ERR_DIV, node, bad, ctx)
            return np.true_divide(a, b)
        return _pow(a, b, node, ctx)
    name = node.name
    if name == "norm2":
        x = ctx.x
        acc = x[..., 0] * x[..., 0]
        for i in range(1, x.shape[-1]):
            acc = acc + x[..., i] * x[..., i]
        return acc
    args = [_ev(c, ctx) for c in node.children]
    if name == "exp":
        with np.errstate(over="ignore"):
            return np.exp(args[0])
    if name == "log":
        bad = np.asarray(args[0]) <= 0.0
        if bad.any():
            _fail(ERR_LOG, node, bad, ctx)
        return np.log(args[0])
    if name == "sqrt":
        bad = np.asarray(args[0]) < 0.0
        if bad.any():
            _fail(ERR_SQRT, node, bad, ctx)
        return np.sqrt(args[0])
    if name == "abs":
        return np.abs(args[0])
    if name == "sin":
        return np.sin(args[0])
    if name == "cos":
        return np.cos(args[0])
    if name == "min":
        return np.minimum(args[0], args[1])
    if name == "max":
        return np.maximum(args[0], args[1])
    return _pow(args[0], args[1], node, ctx)


def _pow(a, b, node, ctx):
    with np.errstate(all="ignore"):
        r = np.power(np.asarray(a, dtype=float), b)
    bad = np.isnan(r) & ~(np.isnan(a) | np.isnan(b))
    if np.any(bad):
        _fail(ERR_POW, node, bad, ctx)
    zero_div = (np.asarray(a) == 0.0) & (np.asarray(b) < 0.0)
    if np.any(zero_div):
        _fail(ERR_DIV, node, zero_div, ctx)
    return r


def evaluate(node: Node, t=None, x=None, v=None):
    """Evaluate ``node`` at (batches of) points.

    Parameters
    ----------
    node : Node
    t : float or ndarray, optional
        Broadcasts against the batch shape of ``x``.
    x : array_like, shape (..., d)
    v : float or ndarray, optional

    Returns
    -------
    float or ndarray of the batch shape of ``x``.
    """
    xa = np.asarray(x if x is not None else np.zeros(1), dtype=float)
    if xa.ndim == 0:
        xa = xa.reshape(1)
    ctx = _Ctx(t, xa, v)
    out = _ev(node, ctx)
    out = np.broadcast_to(np.asarray(out, dtype=float), ctx.shape)
    if out.ndim == 0:
        return float(out)
    return np.array(out)


def eval_expr(node: Node, env) -> float:
    """Evaluate at a single environment (mapping with keys ``t``, ``x``, ``v``)."""
    return float(evaluate(node, env.get("t"), np.asarray(env.get("x", (0.0,)), float), env.get("v")))


def grad_fd(node: Node, t=None, x=None, v=None, h=None):
    """Central-difference gradient in ``x``.

    ``h`` defaults to ``max(1, |x_i|) * 6.06e-6`` per coordinate.  Works on a
    single point of shape ``(d,)`` or a batch ``(n, d)``.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    out = np.empty(x.shape)
    for i in range(d):
        hi = np.maximum(1.0, np.abs(x[..., i])) * EPS_CBRT if h is None else np.broadcast_to(h, x.shape[:-1])
        xp = x.copy()
        xm = x.copy()
        xp[..., i] += hi
        xm[..., i] -= hi
        out[..., i] = (evaluate(node, t, xp, v) - evaluate(node, t, xm, v)) / (2.0 * hi)
    return out


def hess_fd(node: Node, t=None, x=None, v=None, h=None):
    """Symmetric central-difference Hessian in ``x``, shape ``(..., d, d)``.

    Default steps are ``max(1, |x_i|) * 1.22e-4``.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    if h is None:
        hs = np.maximum(1.0, np.abs(x)) * EPS_QRT
    else:
        hs = np.broadcast_to(np.asarray(h, float), x.shape)
    f0 = evaluate(node, t, x, v)
    out = np.empty(x.shape + (d,))

    def shifted(pairs):
        y = x.copy()
        for i, s in pairs:
            y[..., i] += s * hs[..., i]
        return evaluate(node, t, y, v)

    for i in range(d):
        hi = hs[..., i]
        out[..., i, i] = (shifted([(i, 1)]) - 2.0 * f0 + shifted([(i, -1)])) / (hi * hi)
        for j in range(i + 1, d):
            hj = hs[..., j]
            a = (shifted([(i, 1), (j, 1)]) - shifted([(i, 1), (j, -1)])
                 - shifted([(i, -1), (j, 1)]) + shifted([(i, -1), (j, -1)])) / (4.0 * hi * hj)
            b = (shifted([(j, 1), (i, 1)]) - shifted([(j, 1), (i, -1)])
                 - shifted([(j, -1), (i, 1)]) + shifted([(j, -1), (i, -1)])) / (4.0 * hj * hi)
            out[..., i, j] = out[..., j, i] = 0.5 * (a + b)
    return out


# ------------------------------------------------------------ constant folding

def fold(node: Node) -> Node:
    """Replace variable-free subtrees by their value.

    Both evaluation backends run folded trees so they see identical constants.
    Subtrees whose value would be a domain error are left alone so the error
    surfaces at evaluation time.
    """
    if node.kind in ("const", "var"):
        return node
    if node.kind == "call" and node.name == "norm2":
        return node
    kids = tuple(fold(c) for c in node.children)
    new = Node(node.kind, node.name, node.value, kids)
    if all(c.kind == "const" for c in kids):
        try:
            val = evaluate(new, 0.0, np.zeros(1), 0.0)
        except EvalDomainError:
            return new
        if math.isfinite(val):
            return Node("const", value=val)
    return new


# -------------------------------------------------------------- compilation

def compile_program(node: Node):
    """Postfix bytecode for the compiled evaluator.

    Returns ``(code, consts, max_stack)`` where ``code`` is a flat list of
    ``(opcode, argument)`` pairs.
    """
    code: list = []
    consts: list = []
    depth = 0
    max_depth = 0

    def push(op, arg=0, delta=0):
        nonlocal depth, max_depth
        code.extend((op, arg))
        depth += delta
        max_depth = max(max_depth, depth)

    def emit(n):
        if n.kind == "const":
            consts.append(n.value)
            push(OP_CONST, len(consts) - 1, 1)
        elif n.kind == "var":
            if n.name == "t":
                push(OP_T, 0, 1)
            elif n.name == "v":
                push(OP_V, 0, 1)
            else:
                push(OP_X, int(n.name[1:]) - 1, 1)
        elif n.kind == "neg":
            emit(n.children[0])
            push(OP_NEG)
        elif n.kind == "binop":
            emit(n.children[0])
            emit(n.children[1])
            push(_BIN_OPS[n.name], 0, -1)
        elif n.name == "norm2":
            push(OP_NORM2, 0, 1)
        else:
            for c in n.children:
                emit(c)
            push(_CALL_OPS[n.name], 0, 1 - len(n.children))

    emit(node)
    return code, consts, max_depth


class ProgramSet:
    """A list of folded expressions packed into flat arrays for the kernels."""

    def __init__(self, nodes: Sequence[Node]):
        self.nodes = [fold(n) for n in nodes]
        codes, consts, offs, coffs = [], [], [0], [0]
        cval = []
        stack = 1
        for n in self.nodes:
            c, k, s = compile_program(n)
            codes.extend(c)
            consts.extend(k)
            offs.append(len(codes) // 2)
            coffs.append(len(consts))
            stack = max(stack, s)
            cval.append(n.value if n.kind == "const" else math.nan)
        self.code = np.asarray(codes, dtype=np.int32)
        self.consts = np.asarray(consts, dtype=np.float64)
        self.offsets = np.asarray(offs, dtype=np.int64)
        self.const_offsets = np.asarray(coffs, dtype=np.int64)
        self.const_value = np.asarray(cval, dtype=np.float64)
        self.is_const = np.array([n.kind == "const" for n in self.nodes], dtype=np.int32)
        self.max_stack = stack

    def __len__(self):
        return len(self.nodes)


def parse_many(texts: Iterable[str], role, d):
    return tuple(parse(s, role, d) for s in texts)
