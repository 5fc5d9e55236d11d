#!/usr/bin/env python3
"""
Query-driven grounding.

Backward chaining from a query pattern, memoised per canonical subgoal,
produces the ground rules and facts some query instance depends on. Builtins
are evaluated during grounding and never appear in the result.
"""

import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple, Union

import networkx as nx

from config import config
from errors import GroundingError
from logger import timed_operation
from logic_lang import Atom, BinOp, Builtin, Expr, Program, Term

Constant = Union[int, str]
Bindings = Dict[str, Constant]


@dataclass(frozen=True)
class GroundAtom:
    predicate: str
    args: Tuple[Constant, ...] = ()

    @classmethod
    def from_atom(cls, atom: Atom) -> "GroundAtom":
        if any(arg.is_var for arg in atom.args):
            raise GroundingError(f"atom '{atom}' is not ground")
        return cls(atom.predicate, tuple(arg.value for arg in atom.args))

    def sort_key(self):
        return (self.predicate,
                tuple((0, a, "") if isinstance(a, int) else (1, 0, a) for a in self.args))

    def __str__(self) -> str:
        if not self.args:
            return self.predicate
        return f"{self.predicate}({', '.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class GroundFact:
    fact_id: int
    atom: GroundAtom
    param: Union[float, str]
    group: Optional[str] = None

    def __str__(self) -> str:
        param = self.param if isinstance(self.param, str) else repr(float(self.param))
        prefix = f"@group({self.group}) " if self.group else ""
        return f"{self.fact_id}: {prefix}{param}::{self.atom}."


@dataclass(frozen=True)
class GroundRule:
    head: GroundAtom
    body: Tuple[Tuple[bool, GroundAtom], ...] = ()

    def __str__(self) -> str:
        if not self.body:
            return f"{self.head}."
        parts = [str(a) if positive else f"\\+ {a}" for positive, a in self.body]
        return f"{self.head} :- {', '.join(parts)}."


@dataclass(frozen=True)
class GroundProgram:
    facts: Tuple[GroundFact, ...] = ()
    rules: Tuple[GroundRule, ...] = ()
    queries: Tuple[GroundAtom, ...] = ()

    @cached_property
    def fact_by_atom(self) -> Dict[GroundAtom, GroundFact]:
        return {f.atom: f for f in self.facts}

    @cached_property
    def rules_by_head(self) -> Dict[GroundAtom, List[GroundRule]]:
        index: Dict[GroundAtom, List[GroundRule]] = {}
        for rule in self.rules:
            index.setdefault(rule.head, []).append(rule)
        return index

    @cached_property
    def head_order(self) -> List[GroundAtom]:
        """Rule heads, every head after the heads its bodies mention."""
        graph = nx.DiGraph()
        for rule in self.rules:
            graph.add_node(rule.head)
            for _, atom in rule.body:
                if atom in self.rules_by_head:
                    graph.add_edge(atom, rule.head)
        return list(nx.lexicographical_topological_sort(graph, key=str))

    def dump(self) -> str:
        """One ground clause per line: facts by id, then rules by head, then queries."""
        lines = [str(f) for f in self.facts]
        lines += sorted((str(r) for r in self.rules), key=lambda s: (s.split(" :- ")[0], s))
        lines += [f"query({q})." for q in self.queries]
        return "\n".join(lines) + ("\n" if lines else "")

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Builtins
# ---------------------------------------------------------------------------

def _value(expr: Expr, bindings: Bindings, builtin: Builtin) -> Constant:
    if isinstance(expr, BinOp):
        left = _value(expr.left, bindings, builtin)
        right = _value(expr.right, bindings, builtin)
        if not isinstance(left, int) or not isinstance(right, int):
            raise GroundingError(f"arithmetic on non-integers in '{builtin}'")
        if expr.op == "+":
            return left + right
        if expr.op == "-":
            return left - right
        return left * right
    if expr.is_var:
        if expr.value not in bindings:
            raise GroundingError(f"builtin '{builtin}' applied to unbound variable {expr.value}")
        return bindings[expr.value]
    return expr.value


def _is_unbound(expr: Expr, bindings: Bindings) -> bool:
    return isinstance(expr, Term) and expr.is_var and expr.value not in bindings


def _integer(value: Constant, builtin: Builtin) -> int:
    if not isinstance(value, int):
        raise GroundingError(f"arithmetic on non-integers in '{builtin}'")
    return value


def evaluate_builtin(builtin: Builtin, bindings: Optional[Bindings] = None) -> List[Bindings]:
    """
    Evaluate a builtin under `bindings`.

    Returns the list of extended bindings: empty when the builtin fails, one
    entry for a successful test or `is`, and one per value for a `between`
    generator.
    """
    bindings = dict(bindings or {})
    op, args = builtin.op, builtin.args

    if op == "is":
        target, expr = args
        result = _integer(_value(expr, bindings, builtin), builtin)
        if _is_unbound(target, bindings):
            return [{**bindings, target.value: result}]
        return [bindings] if _value(target, bindings, builtin) == result else []

    if op == "between":
        lo_expr, hi_expr, target = args
        if _is_unbound(target, bindings):
            constant = all(isinstance(e, Term) and e.kind == "int" for e in (lo_expr, hi_expr))
            if not constant:
                raise GroundingError(f"generator '{builtin}' needs constant bounds")
            return [{**bindings, target.value: n}
                    for n in range(lo_expr.value, hi_expr.value + 1)]
        lo = _integer(_value(lo_expr, bindings, builtin), builtin)
        hi = _integer(_value(hi_expr, bindings, builtin), builtin)
        value = _integer(_value(target, bindings, builtin), builtin)
        return [bindings] if lo <= value <= hi else []

    left, right = args
    if op == "=":
        if _is_unbound(left, bindings) and not _is_unbound(right, bindings):
            return [{**bindings, left.value: _value(right, bindings, builtin)}]
        if _is_unbound(right, bindings) and not _is_unbound(left, bindings):
            return [{**bindings, right.value: _value(left, bindings, builtin)}]
        same = _value(left, bindings, builtin) == _value(right, bindings, builtin)
        return [bindings] if same else []
    if op == "\\=":
        same = _value(left, bindings, builtin) == _value(right, bindings, builtin)
        return [] if same else [bindings]

    lhs = _integer(_value(left, bindings, builtin), builtin)
    rhs = _integer(_value(right, bindings, builtin), builtin)
    holds = {"<": lhs < rhs, ">": lhs > rhs, "=<": lhs <= rhs, ">=": lhs >= rhs}[op]
    return [bindings] if holds else []


# ---------------------------------------------------------------------------
# Backward chaining
# ---------------------------------------------------------------------------

def _instantiate(atom: Atom, bindings: Bindings) -> Atom:
    args = []
    for arg in atom.args:
        if arg.is_var and arg.value in bindings:
            value = bindings[arg.value]
            args.append(Term.int_(value) if isinstance(value, int) else Term.sym(value))
        else:
            args.append(arg)
    return Atom(atom.predicate, tuple(args))


def _canonical(pattern: Atom):
    names: Dict[str, int] = {}
    key = []
    for arg in pattern.args:
        if arg.is_var:
            key.append(("v", names.setdefault(arg.value, len(names))))
        else:
            key.append(("c", arg.value))
    return pattern.predicate, tuple(key)


def _match(atom: Atom, ground: GroundAtom, bindings: Bindings) -> Optional[Bindings]:
    """Extend `bindings` so `atom` equals `ground`, or None."""
    if atom.predicate != ground.predicate or atom.arity != len(ground.args):
        return None
    result = bindings
    for arg, value in zip(atom.args, ground.args):
        if not arg.is_var:
            if arg.value != value:
                return None
        elif arg.value in result:
            if result[arg.value] != value:
                return None
        else:
            if result is bindings:
                result = dict(bindings)
            result[arg.value] = value
    return result


class _Grounder:
    def __init__(self, program: Program):
        self.program = program
        self.max_depth = config.max_grounding_depth
        self.facts_by_pred: Dict[str, List[Tuple[int, GroundAtom]]] = {}
        self.fact_decls = {}
        for fact_id, fact in enumerate(program.facts):
            atom = GroundAtom.from_atom(fact.atom)
            self.facts_by_pred.setdefault(atom.predicate, []).append((fact_id, atom))
            self.fact_decls[atom] = (fact_id, fact)
        self.rules_by_pred = {}
        for rule in program.rules:
            self.rules_by_pred.setdefault(rule.head.predicate, []).append(rule)
        self.memo: Dict[tuple, Tuple[GroundAtom, ...]] = {}
        self.in_progress: Set[tuple] = set()
        self.ground_rules: Dict[GroundAtom, Dict[tuple, None]] = {}

    def solve(self, pattern: Atom, depth: int = 0) -> Tuple[GroundAtom, ...]:
        """Ground instances of `pattern` derivable in at least one world."""
        key = _canonical(pattern)
        if key in self.memo:
            return self.memo[key]
        if key in self.in_progress:
            raise GroundingError(f"ground-level cycle through '{pattern}'")
        if depth > self.max_depth:
            raise GroundingError(f"grounding deeper than {self.max_depth} calls at '{pattern}'")
        self.in_progress.add(key)

        found: Dict[GroundAtom, None] = {}
        for _, atom in self.facts_by_pred.get(pattern.predicate, []):
            if _match(pattern, atom, {}) is not None:
                found[atom] = None
        for rule in self.rules_by_pred.get(pattern.predicate, []):
            start = _unify_head(rule.head, pattern)
            if start is None:
                continue
            for bindings, body in self._solve_body(rule.body, 0, start, (), depth):
                head = GroundAtom.from_atom(_instantiate(rule.head, bindings))
                if _match(pattern, head, {}) is None:
                    continue
                self.ground_rules.setdefault(head, {})[body] = None
                found[head] = None

        self.in_progress.discard(key)
        result = tuple(sorted(found, key=GroundAtom.sort_key))
        self.memo[key] = result
        return result

    def _solve_body(self, body: Sequence, index: int, bindings: Bindings,
                    literals: tuple, depth: int) -> Iterator[Tuple[Bindings, tuple]]:
        if index == len(body):
            yield bindings, literals
            return
        item = body[index]
        if isinstance(item, Builtin):
            for extended in evaluate_builtin(item, bindings):
                yield from self._solve_body(body, index + 1, extended, literals, depth)
            return

        pattern = _instantiate(item.atom, bindings)
        if item.positive:
            for ground in self.solve(pattern, depth + 1):
                extended = _match(item.atom, ground, bindings)
                if extended is not None:
                    yield from self._solve_body(body, index + 1, extended,
                                                literals + ((True, ground),), depth)
            return

        if any(arg.is_var for arg in pattern.args):
            raise GroundingError(f"negated literal '{pattern}' is not ground")
        derivable = self.solve(pattern, depth + 1)
        if derivable:
            literals = literals + ((False, derivable[0]),)
        yield from self._solve_body(body, index + 1, bindings, literals, depth)

    def build(self, query_atoms: Sequence[GroundAtom]) -> GroundProgram:
        """Keep only what the query atoms depend on."""
        needed_rules: Dict[GroundAtom, None] = {}
        needed_facts: Set[GroundAtom] = set()
        stack = list(query_atoms)
        while stack:
            atom = stack.pop()
            if atom in self.fact_decls:
                needed_facts.add(atom)
                continue
            if atom in needed_rules:
                continue
            needed_rules[atom] = None
            for body in self.ground_rules.get(atom, {}):
                stack.extend(a for _, a in body)

        rules = [GroundRule(head, body)
                 for head in needed_rules
                 for body in self.ground_rules.get(head, {})]
        rules.sort(key=lambda r: (str(r.head), str(r)))

        # a categorical group is kept whole so its domain stays exhaustive
        groups = {self.fact_decls[a][1].group for a in needed_facts} - {None}
        for atom, (_, decl) in self.fact_decls.items():
            if decl.group in groups:
                needed_facts.add(atom)

        facts = []
        for atom in needed_facts:
            fact_id, decl = self.fact_decls[atom]
            facts.append(GroundFact(fact_id, atom, decl.param, decl.group))
        facts.sort(key=lambda f: f.fact_id)

        program = GroundProgram(tuple(facts), tuple(rules),
                                tuple(sorted(set(query_atoms), key=GroundAtom.sort_key)))
        _check_acyclic(program)
        return program


def _unify_head(head: Atom, pattern: Atom) -> Optional[Bindings]:
    """Bind head variables to the constants of `pattern`; pattern variables match anything."""
    bindings: Bindings = {}
    for head_arg, arg in zip(head.args, pattern.args):
        if arg.is_var:
            continue
        if not head_arg.is_var:
            if head_arg.value != arg.value:
                return None
        elif head_arg.value in bindings:
            if bindings[head_arg.value] != arg.value:
                return None
        else:
            bindings[head_arg.value] = arg.value
    return bindings


def _check_acyclic(program: GroundProgram):
    graph = nx.DiGraph()
    for rule in program.rules:
        graph.add_node(rule.head)
        for _, atom in rule.body:
            graph.add_edge(atom, rule.head)
    if not nx.is_directed_acyclic_graph(graph):
        cycle = nx.find_cycle(graph)
        raise GroundingError(
            "ground-level cycle: " + " -> ".join(str(edge[0]) for edge in cycle)
        )


@timed_operation("ground_query")
def ground_query(program: Program, query: Optional[Atom] = None) -> GroundProgram:
    """
    Ground the part of `program` relevant to `query`.

    `query` may contain variables; every derivable instance lands in the
    query set. Without a query, all queries the program declares are grounded
    together.

    Raises:
        GroundingError: ground-level cycles, builtins over unbound variables,
            generators with non-constant bounds, unknown query predicates
    """
    patterns = [query] if query is not None else list(program.queries)
    defined = program.fact_predicates | program.rule_predicates
    grounder = _Grounder(program)
    instances: List[GroundAtom] = []
    for pattern in patterns:
        if pattern.predicate not in defined:
            raise GroundingError(f"query predicate '{pattern.predicate}' is not defined")
        instances.extend(grounder.solve(pattern))
    return grounder.build(instances)
