#!/usr/bin/env python3
"""
Probabilistic logic language: syntax tree, parser, serializer and validator.

The accepted language is a ProbLog-flavoured subset:

    :- external(object, 1).              % external parameter family
    object/1::object(1).                 % neural fact bound to key object/1
    @group(slot1) class/1/0::class(1, 0).
    0.1::alarm.                          % literal probability
    digit(ID, 0) :- \\+ object(ID).
    add(Z) :- digit(1, Y1), digit(2, Y2), Z is Y1 + Y2.
    query(add(Z)).

`%` starts a line comment. Negation is written `\\+ atom` or `not(atom)`.
Builtins are `is`, `between/3`, `<`, `>`, `=<`, `>=`, `=` and `\\=` over
non-negative integers.
"""

import itertools
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Set, Tuple, Union

import lark
import networkx as nx

from errors import ParseError, ValidationError

BUILTIN_OPS = ("is", "between", "<", ">", "=<", ">=", "=", "\\=")
COMPARISONS = ("<", ">", "=<", ">=", "=", "\\=")
_PRECEDENCE = {"+": 1, "-": 1, "*": 2}


@dataclass(frozen=True)
class Term:
    """An integer constant, a symbolic constant or a variable."""

    kind: str  # "int" | "sym" | "var"
    value: Union[int, str]

    @classmethod
    def var(cls, name: str) -> "Term":
        return cls("var", name)

    @classmethod
    def sym(cls, name: str) -> "Term":
        return cls("sym", name)

    @classmethod
    def int_(cls, value: int) -> "Term":
        return cls("int", int(value))

    @property
    def is_var(self) -> bool:
        return self.kind == "var"

    def __str__(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class BinOp:
    """Integer arithmetic inside builtins."""

    op: str
    left: "Expr"
    right: "Expr"

    def __str__(self) -> str:
        prec = _PRECEDENCE[self.op]
        left = str(self.left)
        right = str(self.right)
        if isinstance(self.left, BinOp) and _PRECEDENCE[self.left.op] < prec:
            left = f"({left})"
        if isinstance(self.right, BinOp) and _PRECEDENCE[self.right.op] <= prec:
            right = f"({right})"
        return f"{left} {self.op} {right}"


Expr = Union[Term, BinOp]


def expr_variables(expr: Expr) -> Iterator[str]:
    """Variable names of an expression, left to right."""
    if isinstance(expr, BinOp):
        yield from expr_variables(expr.left)
        yield from expr_variables(expr.right)
    elif expr.is_var:
        yield expr.value


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: Tuple[Term, ...] = ()

    @property
    def arity(self) -> int:
        return len(self.args)

    def variables(self) -> Iterator[str]:
        for arg in self.args:
            if arg.is_var:
                yield arg.value

    def __str__(self) -> str:
        if not self.args:
            return self.predicate
        return f"{self.predicate}({', '.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class Literal:
    """A positive or negated atom in a rule body."""

    atom: Atom
    positive: bool = True

    def __str__(self) -> str:
        return str(self.atom) if self.positive else f"\\+ {self.atom}"


@dataclass(frozen=True)
class Builtin:
    op: str
    args: Tuple[Expr, ...]

    def variables(self) -> Iterator[str]:
        for arg in self.args:
            yield from expr_variables(arg)

    def __str__(self) -> str:
        if self.op == "between":
            return f"between({', '.join(str(a) for a in self.args)})"
        return f"{self.args[0]} {self.op} {self.args[1]}"


BodyItem = Union[Literal, Builtin]


@dataclass(frozen=True)
class FactDecl:
    """A probabilistic fact; `param` is a literal probability or an external key."""

    param: Union[float, str]
    atom: Atom
    group: Optional[str] = None

    @property
    def is_external(self) -> bool:
        return isinstance(self.param, str)

    def __str__(self) -> str:
        param = self.param if self.is_external else repr(float(self.param))
        prefix = f"@group({self.group}) " if self.group else ""
        return f"{prefix}{param}::{self.atom}."


@dataclass(frozen=True)
class Rule:
    head: Atom
    body: Tuple[BodyItem, ...] = ()

    def __str__(self) -> str:
        if not self.body:
            return f"{self.head}."
        return f"{self.head} :- {', '.join(str(b) for b in self.body)}."


@dataclass(frozen=True)
class Program:
    facts: Tuple[FactDecl, ...] = ()
    rules: Tuple[Rule, ...] = ()
    queries: Tuple[Atom, ...] = ()
    externals: Tuple[Tuple[str, int], ...] = ()

    @property
    def fact_predicates(self) -> Set[str]:
        return {f.atom.predicate for f in self.facts}

    @property
    def rule_predicates(self) -> Set[str]:
        return {r.head.predicate for r in self.rules}

    def external_keys(self) -> List[str]:
        return [f.param for f in self.facts if f.is_external]


GRAMMAR = r"""
start: statement*

?statement: fact
          | rule
          | query
          | external

fact: param "::" atom "."
    | group param "::" atom "."
group: "@group" "(" NAME ")"
param: PROB -> literal_param
     | KEY  -> key_param

rule: atom "."
    | atom ":-" body "."
body: literal ("," literal)*

literal: atom                  -> pos_lit
       | "\\+" atom            -> neg_lit
       | "not" "(" atom ")"    -> neg_lit
       | VARIABLE "is" expr    -> is_builtin
       | "between" "(" expr "," expr "," expr ")" -> between_builtin
       | expr COMPARE expr     -> compare_builtin

query: "query" "(" atom ")" "."
     | "?-" atom "."

external: ":-" "external" "(" NAME "," INT ")" "."

atom: NAME
    | NAME "(" term ("," term)* ")"

?term: VARIABLE -> var_term
     | INT      -> int_term
     | NAME     -> sym_term

?expr: expr "+" product -> add_expr
     | expr "-" product -> sub_expr
     | product
?product: product "*" operand -> mul_expr
        | operand
?operand: VARIABLE -> var_term
        | INT      -> int_term
        | "(" expr ")"

COMPARE: "=<" | ">=" | "\\=" | "<" | ">" | "="
KEY.2: /[a-z][A-Za-z0-9_]*(\/[0-9]+)+/
NAME: /[a-z][A-Za-z0-9_]*/
VARIABLE: /[A-Z_][A-Za-z0-9_]*/
PROB: /[0-9]+(\.[0-9]+)?([eE][-+]?[0-9]+)?/
INT: /[0-9]+/
COMMENT: /%[^\n]*/

%import common.WS
%ignore WS
%ignore COMMENT
"""

_PARSER = lark.Lark(GRAMMAR, parser="lalr", start="start")
_ATOM_PARSER = lark.Lark(GRAMMAR, parser="lalr", start="atom")


class _Group:
    def __init__(self, name: str):
        self.name = name


class _Query:
    def __init__(self, atom: Atom):
        self.atom = atom


class _External:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count


class _ProgramBuilder(lark.Transformer):
    """Turns the parse tree into Program objects, enforcing parse-time rules."""

    def __init__(self):
        super().__init__()
        self._arity: Dict[str, int] = {}
        self._anonymous = itertools.count()

    def start(self, items):
        facts, rules, queries, externals = [], [], [], []
        for item in items:
            if isinstance(item, FactDecl):
                facts.append(item)
            elif isinstance(item, Rule):
                rules.append(item)
            elif isinstance(item, _Query):
                queries.append(item.atom)
            elif isinstance(item, _External):
                externals.append((item.name, item.count))
        return Program(tuple(facts), tuple(rules), tuple(queries), tuple(externals))

    def fact(self, items):
        group = None
        if isinstance(items[0], _Group):
            group = items[0].name
            items = items[1:]
        param, atom = items
        return FactDecl(param=param, atom=atom, group=group)

    def group(self, items):
        return _Group(str(items[0]))

    def literal_param(self, items):
        token = items[0]
        value = float(token)
        if not 0.0 <= value <= 1.0:
            raise ParseError(f"probability {token} outside [0, 1]", token.line, token.column)
        return value

    def key_param(self, items):
        return str(items[0])

    def rule(self, items):
        body = tuple(items[1]) if len(items) > 1 else ()
        return Rule(head=items[0], body=body)

    def body(self, items):
        return list(items)

    def pos_lit(self, items):
        return Literal(items[0], True)

    def neg_lit(self, items):
        return Literal(items[0], False)

    def is_builtin(self, items):
        return Builtin("is", (self.var_term([items[0]]), items[1]))

    def between_builtin(self, items):
        return Builtin("between", tuple(items))

    def compare_builtin(self, items):
        left, op, right = items
        return Builtin(str(op), (left, right))

    def query(self, items):
        return _Query(items[0])

    def external(self, items):
        return _External(str(items[0]), int(items[1]))

    def atom(self, items):
        name = items[0]
        args = tuple(items[1:])
        known = self._arity.setdefault(str(name), len(args))
        if known != len(args):
            raise ParseError(
                f"predicate '{name}' used with arity {len(args)}, earlier with arity {known}",
                name.line, name.column,
            )
        return Atom(str(name), args)

    def var_term(self, items):
        name = str(items[0])
        if name == "_":
            name = f"_A{next(self._anonymous)}"
        return Term.var(name)

    def int_term(self, items):
        return Term.int_(int(items[0]))

    def sym_term(self, items):
        return Term.sym(str(items[0]))

    def add_expr(self, items):
        return BinOp("+", items[0], items[1])

    def sub_expr(self, items):
        return BinOp("-", items[0], items[1])

    def mul_expr(self, items):
        return BinOp("*", items[0], items[1])


def _run_parser(parser: lark.Lark, text: str):
    try:
        tree = parser.parse(text)
    except lark.exceptions.UnexpectedInput as e:
        line = getattr(e, "line", None)
        column = getattr(e, "column", None)
        if line is not None and line < 0:
            line, column = None, None
        raise ParseError(str(e).strip().splitlines()[0], line, column) from None
    try:
        return _ProgramBuilder().transform(tree)
    except lark.exceptions.VisitError as e:
        if isinstance(e.orig_exc, ParseError):
            raise e.orig_exc from None
        raise


def parse_program(text: str) -> Program:
    """
    Parse program source text.

    Raises:
        ParseError: syntax errors (with line/column), probabilities outside [0, 1],
            predicates used with two different arities
    """
    return _run_parser(_PARSER, text)


def parse_atom(text: str) -> Atom:
    """Parse a single atom such as a CLI query string (`add(1)`, `add(Z)`)."""
    return _run_parser(_ATOM_PARSER, text.strip().rstrip("."))


def serialize(program: Program) -> str:
    """Render a Program as source text; parse_program(serialize(p)) == p."""
    lines = [f":- external({name}, {count})." for name, count in program.externals]
    lines.extend(str(f) for f in program.facts)
    lines.extend(str(r) for r in program.rules)
    lines.extend(f"query({q})." for q in program.queries)
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str
    message: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


@dataclass
class ValidationReport:
    violations: List[Violation] = field(default_factory=list)
    strata: Dict[str, int] = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return not self.violations

    def add(self, kind: str, message: str):
        violation = Violation(kind, message)
        if violation not in self.violations:
            self.violations.append(violation)


def dependency_graph(program: Program) -> nx.DiGraph:
    """Predicate graph with an edge body -> head; `negative` marks negated use."""
    graph = nx.DiGraph()
    graph.add_nodes_from(sorted(program.fact_predicates | program.rule_predicates))
    for rule in program.rules:
        graph.add_node(rule.head.predicate)
        for item in rule.body:
            if not isinstance(item, Literal):
                continue
            src, dst = item.atom.predicate, rule.head.predicate
            if graph.has_edge(src, dst):
                graph[src][dst]["negative"] |= not item.positive
            else:
                graph.add_edge(src, dst, negative=not item.positive)
    return graph


def stratify(program: Program, report: Optional[ValidationReport] = None) -> Dict[str, int]:
    """
    Assign each predicate a stratum in one pass over the condensed dependency graph.

    Negative edges inside a strongly connected component are reported as
    violations; the returned map is empty in that case.
    """
    report = report if report is not None else ValidationReport()
    graph = dependency_graph(program)
    components = list(nx.strongly_connected_components(graph))
    member = {node: i for i, comp in enumerate(components) for node in comp}
    stratified = True
    for src, dst, data in graph.edges(data=True):
        if data["negative"] and member[src] == member[dst]:
            stratified = False
            report.add("stratification", f"'{dst}' depends negatively on '{src}' inside a cycle")
    if not stratified:
        return {}
    condensed = nx.condensation(graph, scc=components)
    level: Dict[int, int] = {}
    for comp in nx.topological_sort(condensed):
        nodes = condensed.nodes[comp]["members"]
        best = 0
        for node in nodes:
            for src, _, data in graph.in_edges(node, data=True):
                if member[src] == comp:
                    continue
                best = max(best, level[member[src]] + (1 if data["negative"] else 0))
        level[comp] = best
    return {node: level[member[node]] for node in sorted(graph.nodes)}


def _check_facts(program: Program, report: ValidationReport):
    declared = dict(program.externals)
    for name, count in program.externals:
        if declared[name] != count:
            report.add("external", f"family '{name}' declared with conflicting index counts")

    seen_atoms: Set[Atom] = set()
    seen_keys: Set[str] = set()
    groups: Dict[str, List[FactDecl]] = defaultdict(list)
    for fact in program.facts:
        if fact.atom in seen_atoms:
            report.add("duplicate", f"fact atom '{fact.atom}' declared twice")
        seen_atoms.add(fact.atom)
        if fact.is_external:
            family, *indices = fact.param.split("/")
            if family not in declared:
                report.add("external", f"key '{fact.param}' uses undeclared family '{family}'")
            elif declared[family] != len(indices):
                report.add(
                    "external",
                    f"key '{fact.param}' has {len(indices)} indices, family '{family}' "
                    f"declares {declared[family]}",
                )
            if fact.param in seen_keys:
                report.add("external", f"key '{fact.param}' binds more than one fact")
            seen_keys.add(fact.param)
        if any(arg.is_var for arg in fact.atom.args):
            report.add("fact", f"fact '{fact.atom}' is not ground")
        if fact.group:
            groups[fact.group].append(fact)

    for name, members in groups.items():
        first = members[0].atom
        for fact in members[1:]:
            if fact.atom.predicate != first.predicate or fact.atom.arity != first.arity \
                    or fact.atom.args[:-1] != first.args[:-1]:
                report.add(
                    "group",
                    f"group '{name}': '{fact.atom}' does not share predicate and leading "
                    f"arguments with '{first}'",
                )
        if first.arity == 0:
            report.add("group", f"group '{name}': atoms need a class argument")
        kinds = {f.is_external for f in members}
        if len(kinds) > 1:
            report.add("group", f"group '{name}' mixes literal and external probabilities")
        elif kinds == {False}:
            total = sum(float(f.param) for f in members)
            if abs(total - 1.0) > 1e-9:
                report.add("group", f"group '{name}' probabilities sum to {total}, not 1")


def _check_predicates(program: Program, report: ValidationReport):
    facts, heads = program.fact_predicates, program.rule_predicates
    for pred in sorted(facts & heads):
        report.add("predicate", f"'{pred}' is both a fact predicate and a rule head")
    defined = facts | heads
    for rule in program.rules:
        for item in rule.body:
            if isinstance(item, Literal) and item.atom.predicate not in defined:
                report.add("predicate", f"undefined predicate '{item.atom.predicate}' in '{rule}'")
    for query in program.queries:
        if query.predicate not in defined:
            report.add("predicate", f"query predicate '{query.predicate}' is undefined")


def _check_modes(program: Program, report: ValidationReport):
    """Range restriction under the binding patterns the declared queries induce."""
    rules_by_pred: Dict[str, List[Rule]] = defaultdict(list)
    for rule in program.rules:
        rules_by_pred[rule.head.predicate].append(rule)

    pending = deque()
    if program.queries:
        for query in program.queries:
            pending.append((query.predicate, tuple(not a.is_var for a in query.args)))
    else:
        for rule in program.rules:
            pending.append((rule.head.predicate, (False,) * rule.head.arity))
    seen = set()

    def call(atom: Atom, bound: Set[str]):
        mode = tuple(not a.is_var or a.value in bound for a in atom.args)
        if atom.predicate in rules_by_pred and (atom.predicate, mode) not in seen:
            pending.append((atom.predicate, mode))

    def next_call():
        if not pending:
            # heads no declared query reaches stay callable through `cli.py query`
            reached = {pred for pred, _ in seen}
            for pred, rules in rules_by_pred.items():
                if pred not in reached:
                    pending.append((pred, (False,) * rules[0].head.arity))
        return pending.popleft() if pending else None

    while (step := next_call()) is not None:
        pred, mode = step
        if (pred, mode) in seen:
            continue
        seen.add((pred, mode))
        for rule in rules_by_pred.get(pred, []):
            bound = {a.value for a, b in zip(rule.head.args, mode) if b and a.is_var}
            for item in rule.body:
                if isinstance(item, Literal):
                    call(item.atom, bound)
                    if item.positive:
                        bound.update(item.atom.variables())
                    else:
                        for var in item.atom.variables():
                            if var not in bound:
                                report.add("range", f"variable {var} unbound in negated literal of '{rule}'")
                    continue
                _check_builtin_mode(item, rule, bound, report)
            for var in rule.head.variables():
                if var not in bound:
                    report.add("range", f"head variable {var} of '{rule}' is never bound")


def _check_builtin_mode(item: Builtin, rule: Rule, bound: Set[str], report: ValidationReport):
    def require(expr: Expr):
        for var in expr_variables(expr):
            if var not in bound:
                report.add("range", f"variable {var} unbound in builtin '{item}' of '{rule}'")

    if item.op == "is":
        require(item.args[1])
        bound.update(expr_variables(item.args[0]))
    elif item.op == "between":
        lo, hi, target = item.args
        require(lo)
        require(hi)
        generator = isinstance(target, Term) and target.is_var and target.value not in bound
        if generator and not (isinstance(lo, Term) and lo.kind == "int"
                              and isinstance(hi, Term) and hi.kind == "int"):
            report.add("range", f"generator '{item}' in '{rule}' needs constant bounds")
        if generator:
            bound.add(target.value)
        else:
            require(target)
    elif item.op == "=":
        left, right = item.args
        left_free = [v for v in expr_variables(left) if v not in bound]
        right_free = [v for v in expr_variables(right) if v not in bound]
        if isinstance(left, Term) and left.is_var and left_free and not right_free:
            bound.add(left.value)
        elif isinstance(right, Term) and right.is_var and right_free and not left_free:
            bound.add(right.value)
        else:
            require(left)
            require(right)
    else:
        for arg in item.args:
            require(arg)


def validate(program: Program) -> ValidationReport:
    """
    Check a parsed program and report every violation found.

    The program is accepted iff it is stratified, range-restricted under its
    query call modes, and its fact declarations and categorical groups are
    well formed.
    """
    report = ValidationReport()
    _check_predicates(program, report)
    _check_facts(program, report)
    report.strata = stratify(program, report)
    _check_modes(program, report)
    return report


def ensure_valid(program: Program) -> ValidationReport:
    """Validate and raise ValidationError unless accepted."""
    report = validate(program)
    if not report.accepted:
        raise ValidationError(report)
    return report


def load_program(path: str) -> Program:
    """Read and parse a program file."""
    with open(path, "r", encoding="utf-8") as f:
        return parse_program(f.read())
