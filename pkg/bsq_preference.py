# bsq_preference.py
# The BSQ preference language: parse if/elif/else rule chains over
# belief-state queries, evaluate them on beliefs, and extract the exact
# parameter-space region on which each rule fires.
#
# Grammar (EBNF; '#' starts a comment):
#
#   preference := "pref" NAME "(" [ ["params" ":"] decl { "," decl } ] ")"
#                 "{" { statement } "}"
#   decl       := NAME "in" "[" NUMBER "," NUMBER "]"
#   statement  := ("if" | "elif") condition "->" action ";"
#               | "else" "->" action ";"
#               | "for" NAME "in" SET "{" { statement } "}"
#   condition  := atom { ("and" | "or") atom }          (one connective only)
#   atom       := "P" "[" formula "]" CMP (NAME | NUMBER)
#               | "P" "[" formula "]" "==" "1"
#               | ("forall" | "exists") binders ":" atom
#   action     := NAME [ "(" [ arg { "," arg } ] ")" ]
#
# ``for`` loops and condition-level ``forall``/``exists`` are unrolled at
# parse time in the model's declared constant order (forall joins with
# "and", exists with "or"). Formula syntax lives in state_formula.
#
# Parameter comparisons use half-open semantics: "P[φ] > t" and "P[φ] >= t"
# both hold iff t < Pr⟦φ⟧_b, so every condition maps onto an IntervalSet
# and the rules' effective intervals tile the parameter domain exactly.
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple
import itertools
import operator

import numpy as np

import interval_algebra as ia
import state_formula as sf
from gpomdp_core import Belief, GPomdp, formula_mask
from state_formula import PreferenceSyntaxError, UnknownSymbolError  # noqa: F401 (re-export)

# Belief query values are snapped before any comparison so that one posterior
# reached along different observation orders yields one breakpoint.
QUERY_DECIMALS = 12
PARAM_OPS = (">", ">=", "<", "<=")
_LITERAL_CMP = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
}


def snap(value: float) -> float:
    return round(float(value), QUERY_DECIMALS)


@dataclass(frozen=True)
class Bsq:
    """One belief-state query.

    ``probability``: Pr⟦formula⟧_b  op  (param | literal), formula parameter-free.
    ``observable``:  Pr⟦formula⟧_b == 1, formula over fully observable functions,
    parameters only as bare comparison operands.
    """

    kind: str
    formula: Any
    op: str
    param: Optional[str] = None
    literal: Optional[float] = None
    param_index: Optional[int] = None
    mask: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    program: Any = field(default=None, compare=False, repr=False)
    columns: Optional[np.ndarray] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class CompoundBsq:
    connective: str  # "and" | "or"
    atoms: Tuple[Bsq, ...]
    space: Optional[ia.ParamSpace] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Rule:
    condition: Optional[CompoundBsq]  # None is the catchall
    action: str


@dataclass(frozen=True)
class BsqPreference:
    name: str
    space: ia.ParamSpace
    rules: Tuple[Rule, ...]

    @property
    def n_params(self) -> int:
        return self.space.ndim

    def policy(self, theta: Sequence[float]) -> "BsqPolicy":
        return BsqPolicy(self, tuple(float(x) for x in theta))


# --------------------------------------------------------------------------- #
# Observable-formula compilation
# --------------------------------------------------------------------------- #
# An observable formula compiles to a skeleton over per-state value columns:
#   ("bool", k)              column k is a parameter-free sub-formula
#   ("param", k, cmp, dim)   parameter ``dim`` compared with column k, cmp in {"<", ">="}
#   ("and", children) / ("or", children) / ("not", child)
# States sharing a row of column values share the outcome, so evaluation runs
# once per distinct row of the belief's support.
def _compile_observable(formula: Any, model: GPomdp, space: ia.ParamSpace):
    columns: List[np.ndarray] = []

    def column(values: Any) -> int:
        arr = np.broadcast_to(np.asarray(values, dtype=float), (model.n_states,))
        columns.append(np.round(arr, QUERY_DECIMALS))
        return len(columns) - 1

    def walk(node: Any, env: Dict[str, Any]) -> Any:
        if not sf.params_in(node):
            return ("bool", column(sf.evaluate_formula(node, model, env)))
        if isinstance(node, sf.Compare):
            on_right = isinstance(node.right, sf.Param)
            param = node.right if on_right else node.left
            other = node.left if on_right else node.right
            values = sf.evaluate_term(other, model, env)
            return ("param", column(values), sf.param_constraint(node.op, on_right),
                    space.index(param.name))
        if isinstance(node, sf.Not):
            return ("not", walk(node.operand, env))
        if isinstance(node, (sf.And, sf.Or)):
            tag = "and" if isinstance(node, sf.And) else "or"
            return (tag, tuple(walk(i, env) for i in node.items))
        if isinstance(node, sf.Quant):
            names = [v for v, _ in node.binders]
            parts = []
            for combo in sf.quantifier_assignments(node, model.vocabulary):
                scoped = dict(env)
                scoped.update(zip(names, combo))
                parts.append(walk(node.body, scoped))
            return ("and" if node.kind == "forall" else "or", tuple(parts))
        raise sf.FormulaError(f"cannot place a parameter in {sf.format_formula(node)}")

    program = walk(formula, {})
    matrix = np.stack(columns, axis=1) if columns else np.zeros((model.n_states, 0))
    matrix.setflags(write=False)
    return program, matrix


def _program_holds(program: Any, row: np.ndarray, theta: Sequence[float]) -> bool:
    tag = program[0]
    if tag == "bool":
        return bool(row[program[1]])
    if tag == "param":
        _, k, cmp, dim = program
        return theta[dim] < row[k] if cmp == "<" else theta[dim] >= row[k]
    if tag == "not":
        return not _program_holds(program[1], row, theta)
    if tag == "and":
        return all(_program_holds(p, row, theta) for p in program[1])
    return any(_program_holds(p, row, theta) for p in program[1])


def _program_interval(program: Any, row: np.ndarray, space: ia.ParamSpace) -> ia.IntervalSet:
    tag = program[0]
    if tag == "bool":
        return space.full() if row[program[1]] else space.empty()
    if tag == "param":
        _, k, cmp, dim = program
        return ia.from_constraint(space, dim, cmp, float(row[k]))
    if tag == "not":
        return ia.complement(_program_interval(program[1], row, space))
    parts = [_program_interval(p, row, space) for p in program[1]]
    out = parts[0]
    for part in parts[1:]:
        out = ia.intersect(out, part) if tag == "and" else ia.union(out, part)
    return out


def _support_rows(atom: Bsq, belief: Belief) -> np.ndarray:
    rows = atom.columns[belief.support()]
    if rows.shape[1] == 0:
        return rows[:1]
    return np.unique(rows, axis=0)


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #
def atom_query(atom: Bsq, belief: Belief) -> float:
    return snap(belief.probs[atom.mask].sum())


def eval_atom(atom: Bsq, belief: Belief, theta: Sequence[float]) -> bool:
    if atom.kind == "observable":
        return all(_program_holds(atom.program, row, theta) for row in _support_rows(atom, belief))
    q = atom_query(atom, belief)
    if atom.param is None:
        return bool(_LITERAL_CMP[atom.op](q, atom.literal))
    return bool(sf.param_holds(q, atom.op, theta[atom.param_index]))


def interval_of_atom(atom: Bsq, belief: Belief, space: ia.ParamSpace) -> ia.IntervalSet:
    if atom.kind == "observable":
        out = space.full()
        for row in _support_rows(atom, belief):
            out = ia.intersect(out, _program_interval(atom.program, row, space))
            if out.is_empty:
                break
        return out
    q = atom_query(atom, belief)
    if atom.param is None:
        return space.full() if _LITERAL_CMP[atom.op](q, atom.literal) else space.empty()
    return ia.from_constraint(space, atom.param_index, sf.param_constraint(atom.op), q)


def eval_compound(condition: Optional[CompoundBsq], belief: Belief, theta: Sequence[float]) -> bool:
    if condition is None:
        return True
    if condition.connective == "and":
        return all(eval_atom(a, belief, theta) for a in condition.atoms)
    return any(eval_atom(a, belief, theta) for a in condition.atoms)


def interval_of_compound(condition: Optional[CompoundBsq], belief: Belief,
                         space: Optional[ia.ParamSpace] = None) -> ia.IntervalSet:
    if condition is None:
        if space is None:
            raise ValueError("the catchall condition needs an explicit parameter space")
        return space.full()
    space = space or condition.space
    parts = (interval_of_atom(a, belief, space) for a in condition.atoms)
    if condition.connective == "and":
        out = space.full()
        for part in parts:
            out = ia.intersect(out, part)
            if out.is_empty:
                break
        return out
    out = space.empty()
    for part in parts:
        out = ia.union(out, part)
    return out


def fired_rule(pref: BsqPreference, belief: Belief, theta: Sequence[float]) -> int:
    for i, rule in enumerate(pref.rules):
        if eval_compound(rule.condition, belief, theta):
            return i
    raise AssertionError("preference without a catchall rule")


def effective_interval(pref: BsqPreference, belief: Belief, index: int) -> ia.IntervalSet:
    """I(Ψᵢ) at ``belief`` minus the condition intervals of every earlier rule."""
    remaining = pref.space.full()
    for rule in pref.rules[:index]:
        remaining = ia.subtract(remaining, interval_of_compound(rule.condition, belief, pref.space))
        if remaining.is_empty:
            return remaining
    return ia.intersect(remaining, interval_of_compound(pref.rules[index].condition, belief, pref.space))


def effective_intervals(pref: BsqPreference, belief: Belief) -> List[ia.IntervalSet]:
    out = []
    remaining = pref.space.full()
    for rule in pref.rules:
        cond = interval_of_compound(rule.condition, belief, pref.space)
        out.append(ia.intersect(remaining, cond))
        remaining = ia.subtract(remaining, cond)
    return out


def select_rule(pref: BsqPreference, belief: Belief,
                theta: Sequence[float]) -> Tuple[int, str, ia.IntervalSet]:
    index = fired_rule(pref, belief, theta)
    return index, pref.rules[index].action, effective_interval(pref, belief, index)


class IntervalMemo:
    """Bounded cache of effective intervals keyed by (rule, belief bytes)."""

    def __init__(self, pref: BsqPreference, capacity: int = 100_000):
        self.pref = pref
        self.capacity = capacity
        self._store: Dict[Tuple[int, bytes], ia.IntervalSet] = {}

    def get(self, index: int, belief: Belief) -> ia.IntervalSet:
        key = (index, belief.key())
        hit = self._store.get(key)
        if hit is None:
            if len(self._store) >= self.capacity:
                self._store.clear()
            hit = self._store[key] = effective_interval(self.pref, belief, index)
        return hit


def leaf_interval(pref: BsqPreference, trace: Sequence[Tuple[int, Belief]],
                  memo: Optional[IntervalMemo] = None) -> ia.IntervalSet:
    out = pref.space.full()
    for index, belief in trace:
        step = memo.get(index, belief) if memo is not None else effective_interval(pref, belief, index)
        out = ia.intersect(out, step)
        if out.is_empty:
            break
    return out


class BsqPolicy:
    """A preference instantiated with a parameter vector; callable on beliefs."""

    def __init__(self, pref: BsqPreference, theta: Tuple[float, ...]):
        if len(theta) != pref.n_params:
            raise ValueError(f"expected {pref.n_params} parameter values, got {len(theta)}")
        self.pref = pref
        self.theta = theta

    def __call__(self, belief: Belief) -> Tuple[int, str]:
        index = fired_rule(self.pref, belief, self.theta)
        return index, self.pref.rules[index].action


# --------------------------------------------------------------------------- #
# Parsing
# --------------------------------------------------------------------------- #
def _hidden_atoms(node: Any, observable: frozenset) -> set:
    """Atoms under ``node`` that are neither observable by name nor by ground key.

    ``observable`` may list whole functions (``distance``) or single ground
    atoms (``speed(agent)``); atoms with quantified arguments match by name.
    """
    out: set = set()
    if isinstance(node, sf.Call):
        if node.name not in observable:
            if all(isinstance(a, (sf.Sym, sf.Num)) for a in node.args):
                key = sf.ground_key(node.name, [
                    a.name if isinstance(a, sf.Sym) else a.value for a in node.args
                ])
                if key not in observable:
                    out.add(key)
            else:
                out.add(sf.format_term(node))
        return out
    for child in _children(node):
        out |= _hidden_atoms(child, observable)
    return out


def _children(node: Any) -> Tuple[Any, ...]:
    if isinstance(node, (sf.Arith, sf.Compare)):
        return (node.left, node.right)
    if isinstance(node, (sf.Neg, sf.Abs, sf.Not)):
        return (node.operand,)
    if isinstance(node, sf.Holds):
        return (node.call,)
    if isinstance(node, (sf.And, sf.Or)):
        return node.items
    if isinstance(node, sf.Quant):
        return (node.body,)
    return ()


class PreferenceParser(sf.FormulaParser):
    def __init__(self, text: str, model: GPomdp):
        super().__init__(text, model.vocabulary)
        self.model = model
        self.space: Optional[ia.ParamSpace] = None
        self.first_rule_pos: Optional[int] = None

    def preference(self) -> BsqPreference:
        self.match_kw("pref")
        name = self.match_name("preference name")
        self.match_op("(")
        decls = []
        if self.peek_kw("params"):
            self.advance()
            self.match_op(":")
        if not self.peek_op(")"):
            while True:
                tok = self.nt
                pname = self.match_name("parameter name")
                if pname in self.vocab.symbols:
                    self.error(f"parameter {pname!r} clashes with a model constant", tok)
                self.match_kw("in")
                self.match_op("[")
                lo = self.match_number()
                self.match_op(",")
                hi = self.match_number()
                self.match_op("]")
                decls.append((pname, lo, hi))
                if not self.peek_op(","):
                    break
                self.advance()
        self.match_op(")")
        try:
            self.space = ia.ParamSpace(tuple(decls))
        except ia.IntervalError as exc:
            self.error(str(exc))
        self.params = set(self.space.names)
        self.match_op("{")
        rules, closed = self.statements(top=True)
        close = self.nt
        self.match_op("}")
        self.match_eof()
        if not closed:
            self.error("missing terminal else", close)
        return BsqPreference(name, self.space, tuple(rules))

    def statements(self, top: bool) -> Tuple[List[Rule], bool]:
        rules: List[Rule] = []
        while not self.peek_op("}"):
            tok = self.nt
            if self.peek_kw("else"):
                if not top:
                    self.error("else is not allowed inside a for loop")
                self.advance()
                self.match_op("->")
                rules.append(Rule(None, self.action()))
                self.match_op(";")
                if not self.peek_op("}"):
                    self.error("else must be the last rule")
                return rules, True
            if self.peek_kw("for"):
                rules.extend(self.for_loop())
                continue
            if self.peek_kw("if"):
                if self.first_rule_pos not in (None, self.pos):
                    self.error("use elif after the first rule")
                self.first_rule_pos = self.pos
            elif self.peek_kw("elif"):
                if self.first_rule_pos is None or self.first_rule_pos == self.pos:
                    self.error("elif without a preceding if")
            else:
                self.error(f"expected a rule, found {self._describe(tok)}")
            self.advance()
            condition = self.condition()
            self.match_op("->")
            rules.append(Rule(condition, self.action()))
            self.match_op(";")
        return rules, False

    def for_loop(self) -> List[Rule]:
        self.match_kw("for")
        var = self.match_name("loop variable")
        self.match_kw("in")
        tok = self.nt
        values = self.constant_set(self.match_name("constant set"), tok)
        self.match_op("{")
        start = self.pos
        rules: List[Rule] = []
        saved = self.env.get(var)
        for value in values:
            self.pos = start
            self.env[var] = value
            body, _ = self.statements(top=False)
            rules.extend(body)
        if not values:
            self._skip_block()
        if saved is None:
            self.env.pop(var, None)
        else:
            self.env[var] = saved
        self.match_op("}")
        return rules

    def _skip_block(self) -> None:
        depth = 0
        while not (depth == 0 and self.peek_op("}")):
            if self.nt.kind == "EOF":
                self.error("unterminated for loop")
            if self.peek_op("{"):
                depth += 1
            elif self.peek_op("}"):
                depth -= 1
            self.advance()

    def condition(self) -> CompoundBsq:
        connective: Optional[str] = None
        atoms, implied = self.bsq_atoms()
        while self.peek_kw("and") or self.peek_kw("or"):
            tok = self.advance()
            if connective not in (None, tok.value):
                self.error("a condition joins its queries with one connective only", tok)
            connective = tok.value
            more, more_implied = self.bsq_atoms()
            for hint in (implied, more_implied):
                if hint not in (None, connective):
                    self.error(f"a quantified condition needs {hint!r} as its connective", tok)
            atoms.extend(more)
        connective = connective or implied or "and"
        if len(atoms) == 1:
            connective = "and"
        if implied not in (None, connective):
            self.error(f"a quantified condition needs {implied!r} as its connective")
        return CompoundBsq(connective, tuple(atoms), self.space)

    def bsq_atoms(self) -> Tuple[List[Bsq], Optional[str]]:
        if self.peek_kw("forall") or self.peek_kw("exists"):
            kind = self.advance().value
            binders = self.binders()
            self.match_op(":")
            names = [v for v, _ in binders]
            domains = [self.vocab.constant_sets[s] for _, s in binders]
            start = self.pos
            saved = {n: self.env.get(n) for n in names}
            atoms: List[Bsq] = []
            combos = list(itertools.product(*domains))
            if not combos:
                self.error("quantifier over an empty constant set")
            joiner = "and" if kind == "forall" else "or"
            for combo in combos:
                self.pos = start
                self.env.update(zip(names, combo))
                inner, hint = self.bsq_atoms()
                if hint not in (None, joiner):
                    self.error("nested condition quantifiers must agree on the connective")
                atoms.extend(inner)
            for n, v in saved.items():
                if v is None:
                    self.env.pop(n, None)
                else:
                    self.env[n] = v
            return atoms, joiner
        return [self.bsq()], None

    def bsq(self) -> Bsq:
        start = self.nt
        self.match_kw("P")
        self.match_op("[")
        formula = self.formula()
        self.match_op("]")
        op_tok = self.nt
        if op_tok.kind != "OP" or op_tok.value not in PARAM_OPS + ("==",):
            self.error(f"expected a comparison after P[...], found {self._describe(op_tok)}")
        self.advance()
        op = op_tok.value
        has_params = bool(sf.params_in(formula))
        if op == "==":
            bound_tok = self.nt
            if bound_tok.kind != "NUM" or bound_tok.value != 1.0:
                self.error("only '== 1' is allowed (equality against a parameter is not)", bound_tok)
            self.advance()
            hidden = _hidden_atoms(formula, self.vocab.observable_functions)
            if hidden:
                raise UnknownSymbolError(
                    f"{start.line}:{start.column}: '== 1' queries need fully observable "
                    f"functions, got {', '.join(sorted(hidden))}"
                )
            program, columns = _compile_observable(formula, self.model, self.space)
            return Bsq("observable", formula, "==", literal=1.0, program=program, columns=columns)
        if has_params:
            self.error("parameters inside P[...] need the '== 1' form", start)
        mask = formula_mask(self.model, formula)
        if self.nt.kind == "NUM" or self.peek_op("-"):
            return Bsq("probability", formula, op, literal=self.match_number(), mask=mask)
        tok = self.nt
        name = self.match_name("parameter")
        if name not in self.params:
            self.error(f"parameter {name!r} has no declared domain", tok)
        return Bsq("probability", formula, op, param=name,
                   param_index=self.space.index(name), mask=mask)

    def action(self) -> str:
        tok = self.nt
        name = self.match_name("action")
        args: List[Any] = []
        if self.peek_op("("):
            self.advance()
            if not self.peek_op(")"):
                while True:
                    arg_tok = self.nt
                    if arg_tok.kind == "NUM" or self.peek_op("-"):
                        args.append(self.match_number())
                    else:
                        term = self.resolve(self.match_name("action argument"), arg_tok)
                        if not isinstance(term, (sf.Sym, sf.Num)):
                            self.error("action arguments must be constants", arg_tok)
                        args.append(term.name if isinstance(term, sf.Sym) else term.value)
                    if not self.peek_op(","):
                        break
                    self.advance()
            self.match_op(")")
        action = sf.ground_key(name, args) if args else name
        if action not in self.vocab.actions:
            raise UnknownSymbolError(f"{tok.line}:{tok.column}: unknown action {action!r}")
        return action


def parse_preference(text: str, model: GPomdp) -> BsqPreference:
    return PreferenceParser(text, model).preference()


# --------------------------------------------------------------------------- #
# Printing
# --------------------------------------------------------------------------- #
def atom_text(atom: Bsq) -> str:
    inner = sf.format_formula(atom.formula)
    if atom.kind == "observable":
        return f"P[{inner}] == 1"
    bound = atom.param if atom.param is not None else sf.format_number(atom.literal)
    return f"P[{inner}] {atom.op} {bound}"


def condition_text(condition: Optional[CompoundBsq]) -> str:
    if condition is None:
        return "true"
    return f" {condition.connective} ".join(atom_text(a) for a in condition.atoms)


def describe_rule(rule: Rule, index: int = 0) -> str:
    """One human-readable line per rule: ``r1: if <cond> -> action``."""
    if rule.condition is None:
        return f"r{index + 1}: else -> {rule.action}"
    return f"r{index + 1}: if {condition_text(rule.condition)} -> {rule.action}"


def describe(pref: BsqPreference) -> str:
    return "\n".join(describe_rule(r, i) for i, r in enumerate(pref.rules))


def format_preference(pref: BsqPreference) -> str:
    decls = ", ".join(
        f"{n} in [{sf.format_number(lo)}, {sf.format_number(hi)}]" for n, lo, hi in pref.space.dims
    )
    lines = [f"pref {pref.name}(params: {decls}) {{" if decls else f"pref {pref.name}() {{"]
    for i, rule in enumerate(pref.rules):
        if rule.condition is None:
            lines.append(f"  else -> {rule.action};")
        else:
            keyword = "if" if i == 0 else "elif"
            lines.append(f"  {keyword} {condition_text(rule.condition)} -> {rule.action};")
    lines.append("}")
    return "\n".join(lines) + "\n"
