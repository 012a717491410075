"""A small text format for parametrized convex programs (``.dpp`` files).

Example::

    var z[2]
    param Q_sqrt[2, 2]
    param q[2] = [1.0, -1.0]
    minimize 0.5*sum_squares(Q_sqrt*z) + q'*z
    subject to
      z[0] + z[1] == 1
      z <= 2, -z <= 0

``*`` means scalar scaling when either side is a scalar, matrix-vector
product when the left side is a matrix, and an inner product when the left
side carries a transpose mark ``'``. Constraints are separated by commas or
line breaks; a line may not start with a binary operator inside a constraint.
Comments start with ``#``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ArityError, ExprError, LexError, ParseError, UndeclaredIdentifier,
)
from .expr import (
    SCALAR, Atom, Constant, DppProblem, Parameter, Variable,
)

KEYWORDS = {"var", "param", "minimize", "subject", "to"}
FUNCTIONS = {
    "sum": (1, 1), "sum_squares": (1, 1), "quad_over_identity": (1, 1), "norm1": (1, 1),
    "max_elementwise": (1, None), "inner_product": (2, 2),
}
MAX_DEPTH = 100

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\f\v]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z][A-Za-z0-9_]*)
  | (?P<op>==|<=|[-+*'()\[\],;:=])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int
    nl_before: bool = False


def tokenize(text):
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            prefix = bytes(text[:exc.start]).decode("utf-8", errors="replace")
            line = prefix.count("\n") + 1
            col = len(prefix) - (prefix.rfind("\n") + 1) + 1
            raise LexError("input is not valid UTF-8", line, col) from None
    tokens = []
    pos, line, line_start, nl = 0, 1, 0, False
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise LexError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
            nl = True
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), line, pos - line_start + 1, nl))
            nl = False
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1, nl))
    return tokens


@dataclass
class SourceProblem:
    """A parsed program: the problem plus any parameter values bound in the source."""

    problem: DppProblem
    values: dict = field(default_factory=dict)


@dataclass(frozen=True)
class _Transposed:
    node: object
    tok: Token


class _Parser:
    def __init__(self, text):
        self.toks = tokenize(text)
        self.i = 0
        self.depth = 0
        self.decls = {}
        self.variables = []
        self.parameters = []
        self.values = {}
        self.in_constraint = False
        self.paren = 0

    # token helpers
    @property
    def tok(self):
        return self.toks[self.i]

    def peek(self, k=1):
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def error(self, message, tok=None, cls=ParseError):
        tok = tok or self.tok
        return cls(message, tok.line, tok.col)

    def at(self, *texts):
        t = self.tok
        return t.kind in ("op", "ident") and t.text in texts

    def take(self, text=None, kind=None):
        t = self.tok
        if (text is not None and (t.text != text or t.kind not in ("op", "ident"))) or \
                (kind is not None and t.kind != kind):
            want = repr(text) if text is not None else kind
            got = "end of input" if t.kind == "eof" else repr(t.text)
            raise self.error(f"expected {want}, got {got}")
        self.i += 1
        return t

    def enter(self):
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise self.error("expression nested too deeply")

    def leave(self):
        self.depth -= 1

    def line_break(self):
        return self.in_constraint and self.paren == 0 and self.tok.nl_before

    # program structure
    def program(self):
        while self.at("var", "param"):
            self.decl()
        if not self.at("minimize"):
            raise self.error("expected a declaration or 'minimize'")
        self.take("minimize")
        objective = self.value(self.expr())
        eq, ineq = [], []
        if self.at("subject"):
            self.take("subject")
            self.take("to")
            self.in_constraint = True
            while True:
                lhs_tok = self.tok
                lhs = self.value(self.expr())
                if not self.at("==", "<="):
                    raise self.error("expected '==' or '<='")
                op = self.take().text
                rhs = self.value(self.expr())
                try:
                    (eq if op == "==" else ineq).append(self.check_pair(lhs, rhs))
                except ExprError as exc:
                    raise self.error(str(exc), lhs_tok) from None
                if self.tok.kind == "eof":
                    break
                if self.at(","):
                    self.take(",")
                elif not self.tok.nl_before:
                    raise self.error("expected ',' or a line break between constraints")
        if self.tok.kind != "eof":
            raise self.error(f"unexpected {self.tok.text!r} after the problem")
        try:
            problem = DppProblem(objective, tuple(eq), tuple(ineq), tuple(self.variables),
                                 tuple(self.parameters))
        except ExprError as exc:
            raise ParseError(str(exc), 1, 1) from None
        return SourceProblem(problem, self.values)

    @staticmethod
    def check_pair(lhs, rhs):
        a, b = lhs.shape[0], rhs.shape[0]
        if a != b and 1 not in (a, b):
            raise ExprError(f"constraint sides have lengths {a} and {b}")
        return (lhs, rhs)

    def decl(self):
        kind = self.take().text
        name_tok = self.take(kind="ident")
        name = name_tok.text
        if name in KEYWORDS or name in FUNCTIONS:
            raise self.error(f"{name!r} is reserved", name_tok)
        if name in self.decls:
            raise self.error(f"{name!r} is already declared", name_tok)
        self.take("[")
        dims = [self.integer()]
        if self.at(","):
            self.take(",")
            dims.append(self.integer())
        self.take("]")
        if any(d < 1 for d in dims):
            raise self.error("dimensions must be positive", name_tok)
        if kind == "var":
            if len(dims) != 1:
                raise self.error("variables must be vectors", name_tok)
            node = Variable(name, dims[0])
            self.variables.append((name, dims[0]))
        else:
            node = Parameter(name, tuple(dims))
            self.parameters.append((name, tuple(dims)))
        self.decls[name] = node
        if self.at("="):
            eq_tok = self.take("=")
            if kind == "var":
                raise self.error("variables cannot be assigned values", eq_tok)
            lit = self.literal_value()
            if lit.size != math.prod(dims):
                raise self.error(f"{name!r} needs {math.prod(dims)} values, got {lit.size}", eq_tok)
            self.values[name] = lit.reshape(dims if len(dims) == 2 else (dims[0],))

    def integer(self):
        t = self.take(kind="number")
        if not t.text.isdigit():
            raise self.error("expected an integer", t)
        if len(t.text) > 9:
            raise self.error("integer too large", t)
        return int(t.text)

    def number(self, negative=False):
        t = self.take(kind="number")
        v = float(t.text)
        if not math.isfinite(v):
            raise self.error("numeric literal overflows", t)
        return -v if negative else v

    def literal_value(self):
        """``NUMBER``, ``-NUMBER`` or a bracketed vector/matrix literal."""
        if self.at("["):
            return self.bracket_literal()[0]
        neg = False
        if self.at("-"):
            self.take("-")
            neg = True
        return np.array([self.number(neg)])

    def bracket_literal(self):
        self.take("[")
        rows, row, matrix = [], [], False
        while True:
            neg = False
            if self.at("-"):
                self.take("-")
                neg = True
            row.append(self.number(neg))
            if self.at(","):
                self.take(",")
                continue
            if self.at(";"):
                self.take(";")
                matrix = True
                rows.append(row)
                row = []
                if self.at("]"):
                    break
                continue
            break
        if row:
            rows.append(row)
        end = self.take("]")
        if matrix:
            if len({len(r) for r in rows}) != 1:
                raise self.error("matrix rows have different lengths", end)
            return np.array(rows), (len(rows), len(rows[0]))
        return np.array(rows[0]), (len(rows[0]),)

    # expressions
    def value(self, node):
        if isinstance(node, _Transposed):
            raise self.error("a transposed expression must be followed by '*'", node.tok)
        return node

    def build(self, tok, name, args, index=()):
        try:
            return Atom(name, tuple(args), index)
        except ExprError as exc:
            raise self.error(str(exc), tok) from None

    def expr(self):
        self.enter()
        terms = [self.value(self.term())]
        while self.at("+", "-") and not self.line_break():
            op = self.take()
            t = self.value(self.term())
            terms.append(t if op.text == "+" else self.build(op, "negate", [t]))
            last = op
        self.leave()
        if len(terms) == 1:
            return terms[0]
        return self.build(last, "add", terms)

    def term(self):
        left = self.unary()
        while self.at("*") and not self.line_break():
            op = self.take("*")
            right = self.value(self.unary())
            left = self.product(op, left, right)
        return left

    def product(self, op, left, right):
        if isinstance(left, _Transposed):
            return self.build(op, "inner_product", [left.node, right])
        if len(left.shape) == 2:
            return self.build(op, "mat_vec_mul", [left, right])
        if left.shape == SCALAR:
            return self.build(op, "scalar_mul", [left, right])
        if right.shape == SCALAR:
            return self.build(op, "scalar_mul", [right, left])
        raise self.error(f"cannot multiply shapes {left.shape} and {right.shape}; "
                         "use ' for an inner product", op)

    def unary(self):
        if self.at("-"):
            op = self.take("-")
            if self.tok.kind == "number":
                return self.postfix(self.constant(np.array([self.number(True)]), SCALAR, op))
            self.enter()
            inner = self.value(self.unary())
            self.leave()
            return self.build(op, "negate", [inner])
        return self.postfix(self.primary())

    def constant(self, values, shape, tok):
        try:
            return Constant(tuple(values.reshape(-1).tolist()), shape)
        except ExprError as exc:
            raise self.error(str(exc), tok) from None

    def postfix(self, node):
        while True:
            if self.at("'"):
                tok = self.take("'")
                if isinstance(node, _Transposed):
                    raise self.error("double transpose", tok)
                node = _Transposed(node, tok)
            elif self.at("[") and not self.line_break():
                tok = self.take("[")
                node = self.value(node)
                start = self.integer()
                stop = start + 1
                if self.at(":"):
                    self.take(":")
                    stop = self.integer()
                self.take("]")
                node = self.build(tok, "affine_index", [node], (start, stop))
            else:
                return node

    def primary(self):
        t = self.tok
        if t.kind == "number":
            return self.constant(np.array([self.number()]), SCALAR, t)
        if self.at("("):
            self.take("(")
            self.paren += 1
            node = self.value(self.expr())
            self.paren -= 1
            self.take(")")
            return node
        if self.at("["):
            values, shape = self.bracket_literal()
            return self.constant(values, shape, t)
        if t.kind == "ident":
            if t.text in KEYWORDS:
                raise self.error(f"unexpected keyword {t.text!r}")
            nxt = self.peek()
            if nxt.kind == "op" and nxt.text == "(" and not (
                    self.in_constraint and self.paren == 0 and nxt.nl_before):
                return self.call()
            if t.text not in self.decls:
                raise self.error(f"undeclared identifier {t.text!r}", cls=UndeclaredIdentifier)
            self.i += 1
            return self.decls[t.text]
        got = "end of input" if t.kind == "eof" else repr(t.text)
        raise self.error(f"expected an expression, got {got}")

    def call(self):
        name_tok = self.take(kind="ident")
        name = name_tok.text
        if name not in FUNCTIONS:
            raise self.error(f"unknown function {name!r}", name_tok)
        self.take("(")
        self.paren += 1
        args = []
        if not self.at(")"):
            args.append(self.value(self.expr()))
            while self.at(","):
                self.take(",")
                args.append(self.value(self.expr()))
        self.paren -= 1
        self.take(")")
        lo, hi = FUNCTIONS[name]
        if len(args) < lo or (hi is not None and len(args) > hi):
            want = str(lo) if lo == hi else f"at least {lo}"
            raise self.error(f"{name} takes {want} argument(s), got {len(args)}", name_tok,
                             ArityError)
        return self.build(name_tok, name, args)


def parse_problem(text) -> SourceProblem:
    """Parse program text (``str`` or UTF-8 ``bytes``)."""
    return _Parser(text).program()


def load_problem(path) -> SourceProblem:
    with open(path, "rb") as fh:
        return parse_problem(fh.read())


# -- formatting --------------------------------------------------------------

_PRODUCTS = ("scalar_mul", "mat_vec_mul", "inner_product")


def _num(v):
    return repr(float(v))


def _format_constant(c):
    if c.shape == SCALAR:
        return _num(c.values[0])
    if len(c.shape) == 1:
        return "[" + ", ".join(_num(v) for v in c.values) + "]"
    r, k = c.shape
    rows = [", ".join(_num(v) for v in c.values[i * k:(i + 1) * k]) for i in range(r)]
    return "[" + "; ".join(rows) + (";]" if r == 1 else "]")


def _is_postfix_safe(e):
    """Can ``e`` be followed by ``'`` or ``[i]`` without parentheses?"""
    if isinstance(e, (Variable, Parameter)):
        return True
    if isinstance(e, Constant):
        return e.shape != SCALAR or e.values[0] >= 0 and not _num(e.values[0]).startswith("-")
    return e.name in FUNCTIONS and e.name != "inner_product" or e.name == "affine_index"


def _paren(s):
    return f"({s})"


def _fmt_postfix_operand(e):
    s = format_expr(e)
    return s if _is_postfix_safe(e) else _paren(s)


def _fmt_factor(e):
    """Operand of ``*`` or of unary minus."""
    if isinstance(e, Atom) and (e.name == "add" or e.name in _PRODUCTS):
        return _paren(format_expr(e))
    return format_expr(e)


def format_expr(e) -> str:
    if isinstance(e, (Variable, Parameter)):
        return e.id
    if isinstance(e, Constant):
        return _format_constant(e)
    name, args = e.name, e.args
    if name == "add":
        parts = []
        for i, a in enumerate(args):
            if isinstance(a, Atom) and a.name == "add":
                s = _paren(format_expr(a))
                parts.append(s if i == 0 else f"+ {s}")
            elif i > 0 and isinstance(a, Atom) and a.name == "negate":
                parts.append(f"- {_fmt_term(a.args[0])}")
            elif i == 0:
                parts.append(_fmt_term(a))
            else:
                parts.append(f"+ {_fmt_term(a)}")
        return " ".join(parts)
    if name == "negate":
        a = args[0]
        if isinstance(a, Constant) and a.shape == SCALAR:
            return f"-({format_expr(a)})"
        return "-" + _fmt_factor(a)
    if name == "scalar_mul" or name == "mat_vec_mul":
        return f"{_fmt_factor(args[0])}*{_fmt_factor(args[1])}"
    if name == "inner_product":
        return f"{_fmt_postfix_operand(args[0])}'*{_fmt_factor(args[1])}"
    if name == "affine_index":
        start, stop = e.index
        idx = f"{start}" if stop == start + 1 else f"{start}:{stop}"
        return f"{_fmt_postfix_operand(args[0])}[{idx}]"
    return f"{name}(" + ", ".join(format_expr(a) for a in args) + ")"


def _fmt_term(e):
    """A summand: anything but a bare ``add`` (which would be flattened)."""
    if isinstance(e, Atom) and e.name == "add":
        return _paren(format_expr(e))
    if isinstance(e, Atom) and e.name == "negate":
        # a leading unary minus inside a sum binds to the first factor only
        return format_expr(e)
    return format_expr(e)


def format_problem(p: DppProblem, values=None) -> str:
    """Deterministic text for ``p``; ``parse_problem`` recovers an equal problem."""
    values = values or {}
    lines = []
    for name, dim in p.variables:
        lines.append(f"var {name}[{dim}]")
    for name, shape in p.parameter_order:
        decl = f"param {name}[{', '.join(str(s) for s in shape)}]"
        if name in values:
            v = np.asarray(values[name], dtype=float)
            c = Constant(tuple(v.reshape(-1).tolist()), shape if len(shape) == 2 else (v.size,))
            text = _format_constant(c)
            if c.shape == SCALAR:
                text = f"[{text}]"
            decl += f" = {text}"
        lines.append(decl)
    lines.append(f"minimize {format_expr(p.objective)}")
    cons = [f"{format_expr(l)} == {format_expr(r)}" for l, r in p.eq_constraints]
    cons += [f"{format_expr(l)} <= {format_expr(r)}" for l, r in p.ineq_constraints]
    if cons:
        lines.append("subject to")
        lines.extend(f"  {c}" for c in cons)
    return "\n".join(lines) + "\n"
