# state_formula.py
# First-order state formulas for belief-state queries, and the lexer/parser
# shared by the preference DSL.
#
# A formula is a small frozen AST over ground atoms such as ``broken(robot)``,
# ``loc(agent, 3, 2)`` or ``distance(r1)``. Evaluation is vectorised: every
# atom is looked up as a per-state numpy column in the model's feature table,
# so a parameter-free formula compiles to one boolean mask over the
# enumerated states and a belief query is a masked sum.
#
# Quantifiers ``exists``/``forall`` range over the model's ordered constant
# sets and are unrolled at evaluation time in declared order. Parameters may
# only appear as a comparison operand, never as a function argument.
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Mapping, NamedTuple, Optional, Sequence, Tuple
import itertools
import operator
import re

import numpy as np


class PreferenceSyntaxError(ValueError):
    """DSL text could not be tokenised or parsed; carries line and column."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        super().__init__(f"{line}:{column}: {message}" if line else message)


class FormulaError(ValueError):
    """A formula is ill-typed or cannot be evaluated against the model."""


class UnknownSymbolError(FormulaError):
    """A formula references a constant, set, function or atom the model lacks."""


@dataclass(frozen=True)
class Vocabulary:
    """Names a model exposes to formulas and preferences."""

    constant_sets: Mapping[str, Tuple[Any, ...]] = field(default_factory=dict)
    symbols: FrozenSet[str] = frozenset()
    functions: FrozenSet[str] = frozenset()
    observable_functions: FrozenSet[str] = frozenset()
    actions: Tuple[str, ...] = ()


# --------------------------------------------------------------------------- #
# AST
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Sym:
    name: str


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Call:
    name: str
    args: Tuple[Any, ...] = ()


@dataclass(frozen=True)
class Arith:
    op: str
    left: Any
    right: Any


@dataclass(frozen=True)
class Neg:
    operand: Any


@dataclass(frozen=True)
class Abs:
    operand: Any


@dataclass(frozen=True)
class Truth:
    value: bool


@dataclass(frozen=True)
class Holds:
    call: Call


@dataclass(frozen=True)
class Compare:
    op: str
    left: Any
    right: Any


@dataclass(frozen=True)
class Not:
    operand: Any


@dataclass(frozen=True)
class And:
    items: Tuple[Any, ...]


@dataclass(frozen=True)
class Or:
    items: Tuple[Any, ...]


@dataclass(frozen=True)
class Quant:
    kind: str  # "exists" | "forall"
    binders: Tuple[Tuple[str, str], ...]  # (variable, constant set)
    body: Any
    # Binder values in product order, filled in by the parser.
    assignments: Optional[Tuple[Tuple[Any, ...], ...]] = field(default=None, compare=False, repr=False)


TERMS = (Num, Sym, Var, Param, Call, Arith, Neg, Abs)
COMPARISONS = ("<", "<=", ">", ">=", "==", "!=")
_UNICODE_OPS = {"≤": "<=", "≥": ">=", "≠": "!="}
_CMP = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "==": operator.eq,
    "!=": operator.ne,
}

KEYWORDS = frozenset({
    "and", "or", "not", "exists", "forall", "in", "true", "false", "abs",
    "pref", "params", "if", "elif", "else", "for", "P",
})


def params_in(node: Any) -> FrozenSet[str]:
    """Names of parameters referenced anywhere under ``node``."""
    if isinstance(node, Param):
        return frozenset((node.name,))
    if isinstance(node, (Num, Sym, Var, Truth)):
        return frozenset()
    if isinstance(node, Call):
        return frozenset().union(*(params_in(a) for a in node.args))
    if isinstance(node, (Arith, Compare)):
        return params_in(node.left) | params_in(node.right)
    if isinstance(node, (Neg, Abs, Not)):
        return params_in(node.operand)
    if isinstance(node, Holds):
        return params_in(node.call)
    if isinstance(node, (And, Or)):
        return frozenset().union(*(params_in(i) for i in node.items))
    if isinstance(node, Quant):
        return params_in(node.body)
    raise FormulaError(f"not a formula node: {node!r}")


def functions_in(node: Any) -> FrozenSet[str]:
    if isinstance(node, Call):
        return frozenset((node.name,)).union(*(functions_in(a) for a in node.args))
    if isinstance(node, (Arith, Compare)):
        return functions_in(node.left) | functions_in(node.right)
    if isinstance(node, (Neg, Abs, Not)):
        return functions_in(node.operand)
    if isinstance(node, Holds):
        return functions_in(node.call)
    if isinstance(node, (And, Or)):
        return frozenset().union(*(functions_in(i) for i in node.items))
    if isinstance(node, Quant):
        return functions_in(node.body)
    return frozenset()


# --------------------------------------------------------------------------- #
# Printing
# --------------------------------------------------------------------------- #
def format_number(value: float) -> str:
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def ground_key(name: str, args: Sequence[Any]) -> str:
    """Canonical text of a ground atom, the key into the feature table."""
    parts = []
    for a in args:
        if isinstance(a, (bool, np.bool_)):
            parts.append("true" if a else "false")
        elif isinstance(a, (int, float, np.integer, np.floating)):
            parts.append(format_number(a))
        else:
            parts.append(str(a))
    return f"{name}({','.join(parts)})"


_PREC = {"+": 1, "-": 1, "*": 2}


def format_term(node: Any) -> str:
    if isinstance(node, Num):
        return format_number(node.value)
    if isinstance(node, (Sym, Var, Param)):
        return node.name
    if isinstance(node, Call):
        return f"{node.name}({', '.join(format_term(a) for a in node.args)})"
    if isinstance(node, Abs):
        return f"abs({format_term(node.operand)})"
    if isinstance(node, Neg):
        inner = format_term(node.operand)
        return f"-({inner})" if isinstance(node.operand, (Arith, Neg)) else f"-{inner}"
    if isinstance(node, Arith):
        left, right = format_term(node.left), format_term(node.right)
        if isinstance(node.left, Arith) and _PREC[node.left.op] < _PREC[node.op]:
            left = f"({left})"
        if isinstance(node.right, Arith) and _PREC[node.right.op] <= _PREC[node.op]:
            right = f"({right})"
        return f"{left} {node.op} {right}"
    raise FormulaError(f"not a term: {node!r}")


def format_formula(node: Any) -> str:
    if isinstance(node, Truth):
        return "true" if node.value else "false"
    if isinstance(node, Holds):
        return format_term(node.call)
    if isinstance(node, Compare):
        return f"{format_term(node.left)} {node.op} {format_term(node.right)}"
    if isinstance(node, Not):
        return f"not {_wrapped(node.operand)}"
    if isinstance(node, (And, Or)):
        joiner = " and " if isinstance(node, And) else " or "
        return joiner.join(_wrapped(i) for i in node.items)
    if isinstance(node, Quant):
        binders = ", ".join(f"{v} in {s}" for v, s in node.binders)
        return f"({node.kind} {binders}: {_wrapped(node.body)})"
    raise FormulaError(f"not a formula: {node!r}")


def _wrapped(node: Any) -> str:
    text = format_formula(node)
    if isinstance(node, (And, Or, Compare)):
        return f"({text})"
    return text


# --------------------------------------------------------------------------- #
# Lexer
# --------------------------------------------------------------------------- #
class Token(NamedTuple):
    kind: str  # NUM | ID | OP | EOF
    value: Any
    line: int
    column: int


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<id>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>->|<=|>=|==|!=|[<>≤≥≠()\[\]{},;:+\-*])
""", re.VERBOSE)


def tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise PreferenceSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        value = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "num":
            tokens.append(Token("NUM", float(value), line, col))
        elif kind == "id":
            tokens.append(Token("ID", value, line, col))
        elif kind == "op":
            tokens.append(Token("OP", _UNICODE_OPS.get(value, value), line, col))
        pos = m.end()
    tokens.append(Token("EOF", None, line, pos - line_start + 1))
    return tokens


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #
class FormulaParser:
    """Recursive-descent parser over a token list.

    Identifiers resolve, in order, to: an unrolled loop variable (substituted
    by its constant), a quantifier variable, a declared parameter, a model
    constant. Anything else is an unknown symbol.
    """

    def __init__(self, text: str, vocabulary: Vocabulary, params: Sequence[str] = ()):
        self.tokens = tokenize(text)
        self.pos = 0
        self.vocab = vocabulary
        self.params = set(params)
        self.env: Dict[str, Any] = {}
        self.scope: List[str] = []

    # -- token helpers ------------------------------------------------------ #
    @property
    def nt(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def peek_op(self, value: str, ahead: int = 0) -> bool:
        tok = self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]
        return tok.kind == "OP" and tok.value == value

    def peek_kw(self, value: str) -> bool:
        return self.nt.kind == "ID" and self.nt.value == value

    def match_op(self, value: str) -> Token:
        if not self.peek_op(value):
            self.error(f"expected {value!r}, found {self._describe(self.nt)}")
        return self.advance()

    def match_kw(self, value: str) -> Token:
        if not self.peek_kw(value):
            self.error(f"expected {value!r}, found {self._describe(self.nt)}")
        return self.advance()

    def match_name(self, what: str = "name") -> str:
        tok = self.nt
        if tok.kind != "ID" or tok.value in KEYWORDS:
            self.error(f"expected {what}, found {self._describe(tok)}")
        self.advance()
        return tok.value

    def match_number(self) -> float:
        negative = False
        if self.peek_op("-"):
            self.advance()
            negative = True
        if self.nt.kind != "NUM":
            self.error(f"expected a number, found {self._describe(self.nt)}")
        value = self.advance().value
        return -value if negative else value

    def match_eof(self) -> None:
        if self.nt.kind != "EOF":
            self.error(f"unexpected {self._describe(self.nt)}")

    def error(self, message: str, tok: Optional[Token] = None) -> None:
        tok = tok or self.nt
        raise PreferenceSyntaxError(message, tok.line, tok.column)

    @staticmethod
    def _describe(tok: Token) -> str:
        if tok.kind == "EOF":
            return "end of input"
        return repr(format_number(tok.value) if tok.kind == "NUM" else tok.value)

    def constant_set(self, name: str, tok: Token) -> Tuple[Any, ...]:
        try:
            return tuple(self.vocab.constant_sets[name])
        except KeyError:
            raise UnknownSymbolError(
                f"{tok.line}:{tok.column}: unknown constant set {name!r}"
            ) from None

    # -- formulas ----------------------------------------------------------- #
    def formula(self) -> Any:
        items = [self._conjunction()]
        while self.peek_kw("or"):
            self.advance()
            items.append(self._conjunction())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def _conjunction(self) -> Any:
        items = [self._unary()]
        while self.peek_kw("and"):
            self.advance()
            items.append(self._unary())
        return items[0] if len(items) == 1 else And(tuple(items))

    def _unary(self) -> Any:
        if self.peek_kw("not"):
            self.advance()
            return Not(self._unary())
        if self.peek_kw("true") or self.peek_kw("false"):
            return Truth(self.advance().value == "true")
        if self.peek_kw("exists") or self.peek_kw("forall"):
            return self._quantifier()
        if self.peek_op("("):
            save = self.pos
            try:
                return self._comparison()
            except (PreferenceSyntaxError, FormulaError):
                self.pos = save
            self.match_op("(")
            inner = self.formula()
            self.match_op(")")
            return inner
        return self._comparison()

    def binders(self) -> Tuple[Tuple[str, str], ...]:
        out = []
        while True:
            var = self.match_name("variable")
            self.match_kw("in")
            tok = self.nt
            set_name = self.match_name("constant set")
            self.constant_set(set_name, tok)
            out.append((var, set_name))
            if not self.peek_op(","):
                return tuple(out)
            self.advance()

    def _quantifier(self) -> Quant:
        kind = self.advance().value
        binders = self.binders()
        self.match_op(":")
        self.scope.extend(v for v, _ in binders)
        try:
            body = self._unary()
        finally:
            del self.scope[len(self.scope) - len(binders):]
        assignments = tuple(itertools.product(*(self.vocab.constant_sets[s] for _, s in binders)))
        return Quant(kind, binders, body, assignments)

    def _comparison(self) -> Any:
        start = self.nt
        left = self.term()
        if self.nt.kind == "OP" and self.nt.value in COMPARISONS:
            op_tok = self.advance()
            right = self.term()
            if op_tok.value in ("==", "!=") and (params_in(left) or params_in(right)):
                self.error("equality against a parameter is not allowed", op_tok)
            if params_in(left) and params_in(right):
                self.error("a comparison may mention parameters on one side only", op_tok)
            for side in (left, right):
                if params_in(side) and not isinstance(side, Param):
                    self.error("a parameter must be a bare comparison operand", op_tok)
            return Compare(op_tok.value, left, right)
        if isinstance(left, Call):
            return Holds(left)
        self.error("expected a comparison or a predicate", start)

    # -- terms -------------------------------------------------------------- #
    def term(self) -> Any:
        node = self._product()
        while self.peek_op("+") or self.peek_op("-"):
            op = self.advance().value
            node = Arith(op, node, self._product())
        return node

    def _product(self) -> Any:
        node = self._factor()
        while self.peek_op("*"):
            self.advance()
            node = Arith("*", node, self._factor())
        return node

    def _factor(self) -> Any:
        tok = self.nt
        if tok.kind == "NUM":
            self.advance()
            return Num(tok.value)
        if self.peek_op("-"):
            self.advance()
            inner = self._factor()
            if isinstance(inner, Num):
                return Num(-inner.value)
            return Neg(inner)
        if self.peek_op("("):
            self.advance()
            inner = self.term()
            self.match_op(")")
            return inner
        if self.peek_kw("abs"):
            self.advance()
            self.match_op("(")
            inner = self.term()
            self.match_op(")")
            return Abs(inner)
        name = self.match_name("term")
        if self.peek_op("("):
            return self._call(name, tok)
        return self.resolve(name, tok)

    def _call(self, name: str, tok: Token) -> Call:
        if name not in self.vocab.functions:
            raise UnknownSymbolError(f"{tok.line}:{tok.column}: unknown function {name!r}")
        self.match_op("(")
        args = []
        if not self.peek_op(")"):
            while True:
                arg_tok = self.nt
                arg = self.term()
                if params_in(arg):
                    self.error("parameters cannot be function arguments", arg_tok)
                args.append(arg)
                if not self.peek_op(","):
                    break
                self.advance()
        self.match_op(")")
        return Call(name, tuple(args))

    def resolve(self, name: str, tok: Token) -> Any:
        if name in self.env:
            value = self.env[name]
            if isinstance(value, str):
                return Sym(value)
            return Num(float(value))
        if name in self.scope:
            return Var(name)
        if name in self.params:
            return Param(name)
        if name in self.vocab.symbols:
            return Sym(name)
        raise UnknownSymbolError(f"{tok.line}:{tok.column}: unknown symbol {name!r}")


def parse_formula(text: str, vocabulary: Vocabulary, params: Sequence[str] = ()) -> Any:
    parser = FormulaParser(text, vocabulary, params)
    node = parser.formula()
    parser.match_eof()
    return node


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #
def param_constraint(op: str, param_on_right: bool = True) -> str:
    """Reduce a value/parameter comparison to ``"<"`` or ``">="`` on θ.

    ``value > θ`` and ``value >= θ`` both hold iff ``θ < value``;
    ``value < θ`` and ``value <= θ`` both hold iff ``θ >= value``.
    With the parameter on the left the roles swap.
    """
    below = op in (">", ">=") if param_on_right else op in ("<", "<=")
    return "<" if below else ">="


def param_holds(value: Any, op: str, theta: float, param_on_right: bool = True) -> Any:
    if param_constraint(op, param_on_right) == "<":
        return np.less(theta, value)
    return np.greater_equal(theta, value)


def evaluate_term(node: Any, model: Any, env: Optional[Mapping[str, Any]] = None,
                  params: Optional[Mapping[str, float]] = None) -> Any:
    env = env or {}
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Sym):
        return node.name
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise FormulaError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Param):
        if params is None or node.name not in params:
            raise FormulaError(f"parameter {node.name!r} has no value here")
        return params[node.name]
    if isinstance(node, Call):
        args = [evaluate_term(a, model, env, params) for a in node.args]
        for a in args:
            if isinstance(a, np.ndarray):
                raise FormulaError(f"arguments of {node.name} must be constant")
        return lookup_atom(model, node.name, args)
    if isinstance(node, Arith):
        left = evaluate_term(node.left, model, env, params)
        right = evaluate_term(node.right, model, env, params)
        if node.op == "+":
            return np.add(left, right)
        if node.op == "-":
            return np.subtract(left, right)
        return np.multiply(left, right)
    if isinstance(node, Neg):
        return np.negative(evaluate_term(node.operand, model, env, params))
    if isinstance(node, Abs):
        return np.abs(evaluate_term(node.operand, model, env, params))
    raise FormulaError(f"not a term: {node!r}")


def lookup_atom(model: Any, name: str, args: Sequence[Any]) -> Any:
    key = ground_key(name, args)
    column = model.features.get(key)
    if column is not None:
        return column
    if key in model.statics:
        return model.statics[key]
    if name in model.static_functions:
        return False
    raise UnknownSymbolError(f"no ground atom {key} in model {model.name!r}")


def quantifier_assignments(node: Quant, vocabulary: Vocabulary) -> Tuple[Tuple[Any, ...], ...]:
    """Binder values of ``node`` in product order; parsed nodes carry them already."""
    if node.assignments is not None:
        return node.assignments
    return tuple(itertools.product(*(vocabulary.constant_sets[s] for _, s in node.binders)))


def evaluate_formula(node: Any, model: Any, env: Optional[Mapping[str, Any]] = None,
                     params: Optional[Mapping[str, float]] = None) -> np.ndarray:
    """Truth value of ``node`` in every state, as a bool array."""
    n = model.n_states
    return np.broadcast_to(np.asarray(_formula(node, model, env or {}, params), dtype=bool), (n,))


def _formula(node: Any, model: Any, env: Mapping[str, Any],
             params: Optional[Mapping[str, float]]) -> Any:
    if isinstance(node, Truth):
        return node.value
    if isinstance(node, Holds):
        value = np.asarray(evaluate_term(node.call, model, env, params))
        if value.dtype != bool:
            raise FormulaError(f"{format_term(node.call)} is not a predicate")
        return value
    if isinstance(node, Compare):
        if isinstance(node.right, Param) or isinstance(node.left, Param):
            on_right = isinstance(node.right, Param)
            value = evaluate_term(node.left if on_right else node.right, model, env, params)
            theta = evaluate_term(node.right if on_right else node.left, model, env, params)
            return param_holds(value, node.op, theta, param_on_right=on_right)
        left = evaluate_term(node.left, model, env, params)
        right = evaluate_term(node.right, model, env, params)
        return _CMP[node.op](np.asarray(left), np.asarray(right))
    if isinstance(node, Not):
        return np.logical_not(_formula(node.operand, model, env, params))
    if isinstance(node, And):
        acc: Any = True
        for item in node.items:
            acc = np.logical_and(acc, _formula(item, model, env, params))
            if not np.any(acc):
                return False
        return acc
    if isinstance(node, Or):
        acc = False
        for item in node.items:
            acc = np.logical_or(acc, _formula(item, model, env, params))
            if np.all(acc):
                return True
        return acc
    if isinstance(node, Quant):
        names = [v for v, _ in node.binders]
        exists = node.kind == "exists"
        acc = not exists
        for combo in quantifier_assignments(node, model.vocabulary):
            scoped = dict(env)
            scoped.update(zip(names, combo))
            value = _formula(node.body, model, scoped, params)
            if exists:
                acc = np.logical_or(acc, value)
                if np.all(acc):
                    return True
            else:
                acc = np.logical_and(acc, value)
                if not np.any(acc):
                    return False
        return acc
    raise FormulaError(f"not a formula: {node!r}")
