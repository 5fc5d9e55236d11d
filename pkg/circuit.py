#!/usr/bin/env python3
"""
Exact knowledge compilation and weighted evaluation.

A ground program is compiled into a reduced ordered multi-valued decision
diagram over one variable per independent fact and one per categorical fact
group. Every query instance of the program is a root in one shared arena
(CircuitFamily); compile() extracts a single-root Circuit from it.

Evaluation is a bottom-up weighted sum over the arena. Backpropagation runs
the same pass in reverse to obtain the partial derivatives of the path-sum
polynomial with respect to every external parameter. Parameter values may be
scalars or numpy arrays sharing one batch shape.
"""

import math
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import config
from errors import CapacityError, MissingParameterError, ParameterError
from grounder import GroundAtom, GroundFact, GroundProgram
from logger import get_logger, timed_operation

FALSE = 0
TRUE = 1
SIMPLEX_TOLERANCE = 1e-9
ORACLE_BLOCK = 1 << 16

Value = Union[float, np.ndarray]


# ---------------------------------------------------------------------------
# Parameter and gradient tables
# ---------------------------------------------------------------------------

class FactParamTable:
    """Probabilities bound to external parameter keys."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self.values: Dict[str, Any] = dict(values or {})

    def __getitem__(self, key: str):
        return self.values[key]

    def __setitem__(self, key: str, value):
        self.values[key] = value

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def __len__(self) -> int:
        return len(self.values)

    def keys(self):
        return self.values.keys()

    def items(self):
        return self.values.items()

    def set_vector(self, prefix: str, vector: Sequence):
        """Bind `prefix/0 .. prefix/K-1` from a categorical vector."""
        for k, value in enumerate(vector):
            self.values[f"{prefix}/{k}"] = value

    def vector(self, prefix: str, size: int) -> List:
        return [self.values[f"{prefix}/{k}"] for k in range(size)]


class GradientTable:
    """∂p/∂param per external key; keys the circuit never reads report 0."""

    def __init__(self, values: Optional[Dict[str, Value]] = None):
        self.values: Dict[str, Value] = dict(values or {})

    def __getitem__(self, key: str) -> Value:
        return self.values.get(key, 0.0)

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def get(self, key: str, default: Value = 0.0) -> Value:
        return self.values.get(key, default)

    def keys(self):
        return self.values.keys()

    def items(self):
        return self.values.items()

    def vector(self, prefix: str, size: int) -> List[Value]:
        return [self.get(f"{prefix}/{k}") for k in range(size)]


def _as_table(params) -> FactParamTable:
    return params if isinstance(params, FactParamTable) else FactParamTable(params)


# ---------------------------------------------------------------------------
# Variable space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Variable:
    index: int
    name: str
    kind: str  # "bool" | "cat"
    facts: Tuple[GroundFact, ...]

    @property
    def domain(self) -> int:
        return 2 if self.kind == "bool" else len(self.facts)

    @property
    def bits(self) -> int:
        return 1 if self.kind == "bool" else math.ceil(math.log2(self.domain)) if self.domain > 1 else 0


@dataclass(frozen=True)
class VariableSpace:
    variables: Tuple[Variable, ...]
    assignment: Dict[GroundAtom, Tuple[int, int]] = field(hash=False, compare=False)

    @classmethod
    def from_ground(cls, ground: GroundProgram) -> "VariableSpace":
        """One Boolean per ungrouped fact, one categorical per group, ordered by first fact id."""
        units: List[Tuple[str, str, List[GroundFact]]] = []
        by_group: Dict[str, List[GroundFact]] = {}
        for fact in ground.facts:
            if fact.group is None:
                units.append(("bool", str(fact.atom), [fact]))
            elif fact.group in by_group:
                by_group[fact.group].append(fact)
            else:
                by_group[fact.group] = [fact]
                units.append(("cat", fact.group, by_group[fact.group]))
        units.sort(key=lambda u: min(f.fact_id for f in u[2]))

        variables = []
        assignment: Dict[GroundAtom, Tuple[int, int]] = {}
        for index, (kind, name, facts) in enumerate(units):
            facts = sorted(facts, key=lambda f: f.fact_id)
            variables.append(Variable(index, name, kind, tuple(facts)))
            if kind == "bool":
                assignment[facts[0].atom] = (index, 1)
            else:
                for value, fact in enumerate(facts):
                    assignment[fact.atom] = (index, value)
        return cls(tuple(variables), assignment)

    @property
    def bits(self) -> int:
        return sum(v.bits for v in self.variables)

    @property
    def world_count(self) -> int:
        return math.prod(v.domain for v in self.variables)

    def external_keys(self) -> List[str]:
        return [f.param for v in self.variables for f in v.facts if isinstance(f.param, str)]

    def weights(self, params: FactParamTable) -> Tuple[List[List[Value]], Tuple[int, ...]]:
        """
        Branch weights per variable and the common batch shape.

        Raises:
            MissingParameterError: an external key without a binding
            ParameterError: values outside [0, 1], or a group off the simplex
        """
        raw = []
        for var in self.variables:
            probs = [_bound_value(f, params) for f in var.facts]
            for fact, p in zip(var.facts, probs):
                if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
                    raise ParameterError(f"parameter for '{fact.atom}' outside [0, 1]")
            if var.kind == "bool":
                raw.append([1.0 - probs[0], probs[0]])
            else:
                total = sum(probs)
                if np.any(np.abs(total - 1.0) > SIMPLEX_TOLERANCE):
                    raise ParameterError(
                        f"class vector of group '{var.name}' sums to {np.max(total)!r}, not 1"
                    )
                raw.append(probs)

        shape = np.broadcast_shapes(*(np.shape(w) for ws in raw for w in ws)) if raw else ()
        if shape == ():
            return [[float(w) for w in ws] for ws in raw], shape
        return [[np.broadcast_to(np.asarray(w, dtype=np.float64), shape) for w in ws]
                for ws in raw], shape


def _bound_value(fact: GroundFact, params: FactParamTable):
    if not isinstance(fact.param, str):
        return np.float64(fact.param)
    if fact.param not in params:
        raise MissingParameterError(f"no parameter bound for key '{fact.param}'")
    return np.asarray(params[fact.param], dtype=np.float64)


# ---------------------------------------------------------------------------
# Diagram construction
# ---------------------------------------------------------------------------

Node = Tuple[int, Tuple[int, ...]]


class _DiagramBuilder:
    """Apply-based construction over a unique table; node ids are topological."""

    def __init__(self, space: VariableSpace):
        self.space = space
        self.terminal_var = len(space.variables)
        self.nodes: List[Node] = [(self.terminal_var, ()), (self.terminal_var, ())]
        self.unique: Dict[Node, int] = {}
        self.apply_memo: Dict[Tuple[str, int, int], int] = {}
        self.negate_memo: Dict[int, int] = {}

    def make(self, var: int, children: Tuple[int, ...]) -> int:
        if all(c == children[0] for c in children):
            return children[0]
        key = (var, children)
        node = self.unique.get(key)
        if node is None:
            node = len(self.nodes)
            self.nodes.append(key)
            self.unique[key] = node
        return node

    def literal(self, var: int, value: int) -> int:
        domain = self.space.variables[var].domain
        return self.make(var, tuple(TRUE if j == value else FALSE for j in range(domain)))

    def _cofactor(self, node: int, var: int, value: int) -> int:
        node_var, children = self.nodes[node]
        return children[value] if node_var == var else node

    def apply(self, op: str, a: int, b: int) -> int:
        if op == "and":
            if a == FALSE or b == FALSE:
                return FALSE
            if a == TRUE:
                return b
            if b == TRUE or a == b:
                return a
        else:
            if a == TRUE or b == TRUE:
                return TRUE
            if a == FALSE:
                return b
            if b == FALSE or a == b:
                return a
        key = (op, min(a, b), max(a, b))
        if key in self.apply_memo:
            return self.apply_memo[key]
        var = min(self.nodes[a][0], self.nodes[b][0])
        domain = self.space.variables[var].domain
        children = tuple(
            self.apply(op, self._cofactor(a, var, j), self._cofactor(b, var, j))
            for j in range(domain)
        )
        result = self.make(var, children)
        self.apply_memo[key] = result
        return result

    def negate(self, a: int) -> int:
        if a in (FALSE, TRUE):
            return TRUE - a
        if a not in self.negate_memo:
            var, children = self.nodes[a]
            self.negate_memo[a] = self.make(var, tuple(self.negate(c) for c in children))
        return self.negate_memo[a]


@dataclass(frozen=True)
class Circuit:
    """A single-root decision diagram; nodes[0] is FALSE, nodes[1] is TRUE."""

    space: VariableSpace
    nodes: Tuple[Node, ...]
    root: int
    query: GroundAtom

    @property
    def node_count(self) -> int:
        return len(self.nodes) - 2

    def variables_used(self) -> List[int]:
        return sorted({var for var, _ in self.nodes[2:]})

    def paths(self) -> Iterator[Tuple[Tuple[int, int], ...]]:
        """Root-to-TRUE paths as (variable, value) sequences."""
        def walk(node, prefix):
            if node == TRUE:
                yield prefix
                return
            if node == FALSE:
                return
            var, children = self.nodes[node]
            for value, child in enumerate(children):
                yield from walk(child, prefix + ((var, value),))
        yield from walk(self.root, ())

    def is_true(self, world: Sequence[int]) -> bool:
        """Follow the path a total assignment selects."""
        node = self.root
        while node not in (FALSE, TRUE):
            var, children = self.nodes[node]
            node = children[world[var]]
        return node == TRUE


@dataclass(frozen=True)
class CircuitFamily:
    """Every query instance of a ground program compiled into one arena."""

    space: VariableSpace
    nodes: Tuple[Node, ...]
    roots: Dict[GroundAtom, int] = field(hash=False, compare=False)
    digest: str = ""

    def root(self, instance: GroundAtom) -> int:
        # atoms outside the query set are not derivable
        return self.roots.get(instance, FALSE)

    def circuit(self, instance: GroundAtom) -> Circuit:
        root = self.root(instance)
        reachable = set()
        stack = [root]
        while stack:
            node = stack.pop()
            if node in reachable:
                continue
            reachable.add(node)
            stack.extend(self.nodes[node][1])
        order = [FALSE, TRUE] + sorted(reachable - {FALSE, TRUE})
        remap = {old: new for new, old in enumerate(order)}
        nodes = tuple(
            (self.nodes[old][0], tuple(remap[c] for c in self.nodes[old][1])) for old in order
        )
        return Circuit(self.space, nodes, remap[root], instance)

    def evaluate(self, params) -> Dict[GroundAtom, Value]:
        weights, shape = self.space.weights(_as_table(params))
        values = _forward(self.nodes, weights, shape)
        return {q: values[node] for q, node in self.roots.items()}

    def backprop(self, params, seeds: Mapping[GroundAtom, Value]
                 ) -> Tuple[Dict[GroundAtom, Value], GradientTable]:
        """Gradients of Σ seed[q] · p(q) for the seeded query instances."""
        weights, shape = self.space.weights(_as_table(params))
        values = _forward(self.nodes, weights, shape)
        node_seeds: Dict[int, Value] = {}
        for q, seed in seeds.items():
            node = self.root(q)
            node_seeds[node] = node_seeds.get(node, 0.0) + seed
        grads = _backward(self.nodes, self.space, weights, values, node_seeds, shape)
        return {q: values[node] for q, node in self.roots.items()}, grads


# ---------------------------------------------------------------------------
# Forward and reverse passes
# ---------------------------------------------------------------------------

def _forward(nodes: Sequence[Node], weights, shape) -> List[Value]:
    values: List[Value] = ([np.zeros(shape), np.ones(shape)] if shape else [0.0, 1.0])
    for var, children in nodes[2:]:
        w = weights[var]
        total = w[0] * values[children[0]]
        for j in range(1, len(children)):
            total = total + w[j] * values[children[j]]
        values.append(total)
    return values


def _backward(nodes: Sequence[Node], space: VariableSpace, weights, values,
              seeds: Dict[int, Value], shape) -> GradientTable:
    zero = np.zeros(shape) if shape else 0.0
    adjoint: List[Value] = [zero] * len(nodes)
    for node, seed in seeds.items():
        adjoint[node] = adjoint[node] + seed
    local = [[zero] * v.domain for v in space.variables]

    for i in range(len(nodes) - 1, 1, -1):
        a = adjoint[i]
        if not shape and a == 0.0:
            continue
        var, children = nodes[i]
        w = weights[var]
        for j, child in enumerate(children):
            adjoint[child] = adjoint[child] + a * w[j]
            local[var][j] = local[var][j] + a * values[child]

    grads: Dict[str, Value] = {}
    for var in space.variables:
        g = local[var.index]
        if var.kind == "bool":
            key = var.facts[0].param
            if isinstance(key, str):
                grads[key] = g[1] - g[0]
        else:
            for j, fact in enumerate(var.facts):
                if isinstance(fact.param, str):
                    grads[fact.param] = g[j]
    return GradientTable(grads)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

@timed_operation("compile")
def compile_family(ground: GroundProgram) -> CircuitFamily:
    """
    Compile every query instance of `ground` into a shared arena.

    Raises:
        CapacityError: the variable space needs more Boolean-equivalent bits
            than config.max_circuit_bits
    """
    space = VariableSpace.from_ground(ground)
    if space.bits > config.max_circuit_bits:
        raise CapacityError(
            f"variable space needs {space.bits} bits, limit is {config.max_circuit_bits}"
        )

    builder = _DiagramBuilder(space)
    functions: Dict[GroundAtom, int] = {}
    for atom, (var, value) in space.assignment.items():
        functions[atom] = builder.literal(var, value)
    for head in ground.head_order:
        result = FALSE
        for rule in ground.rules_by_head[head]:
            term = TRUE
            for positive, atom in rule.body:
                literal = functions.get(atom, FALSE)
                term = builder.apply("and", term, literal if positive else builder.negate(literal))
            result = builder.apply("or", result, term)
        functions[head] = result

    roots = {q: functions.get(q, FALSE) for q in ground.queries}
    family = CircuitFamily(space, tuple(builder.nodes), roots, ground.digest())
    get_logger().circuit_compiled(
        query=", ".join(str(q) for q in ground.queries[:4]) + (" ..." if len(roots) > 4 else ""),
        node_count=len(builder.nodes) - 2,
        variable_count=len(space.variables),
    )
    return family


def compile(ground: GroundProgram, instance: GroundAtom) -> Circuit:
    """Decision diagram for one query instance of `ground`."""
    return compile_family(ground).circuit(instance)


def evaluate(circuit: Circuit, params) -> Value:
    """Probability of the circuit's query: Σ over TRUE paths of Π branch weights."""
    weights, shape = circuit.space.weights(_as_table(params))
    return _forward(circuit.nodes, weights, shape)[circuit.root]


def backprop(circuit: Circuit, params) -> Tuple[Value, GradientTable]:
    """Probability plus ∂p/∂param for every external key of the variable space."""
    weights, shape = circuit.space.weights(_as_table(params))
    values = _forward(circuit.nodes, weights, shape)
    one = np.ones(shape) if shape else 1.0
    grads = _backward(circuit.nodes, circuit.space, weights, values, {circuit.root: one}, shape)
    return values[circuit.root], grads


def oracle_distribution(ground: GroundProgram, params,
                        instances: Optional[Sequence[GroundAtom]] = None) -> Dict[GroundAtom, Value]:
    """
    p(q) for several query instances by summing over every total assignment.

    Worlds are visited in blocks of ORACLE_BLOCK; inside a block every fact
    and rule head is a boolean column over the block's worlds, heads are
    filled in head order, and world weights are products of per-variable
    weight tables indexed by the world's values. One pass serves every
    requested instance. Instances that are not queries of `ground` get 0.

    Raises:
        CapacityError: more worlds than config.max_oracle_worlds
    """
    space = VariableSpace.from_ground(ground)
    if space.world_count > config.max_oracle_worlds:
        raise CapacityError(
            f"{space.world_count} worlds exceed the oracle limit of {config.max_oracle_worlds}"
        )
    weights, shape = space.weights(_as_table(params))
    targets = list(ground.queries) if instances is None else list(instances)
    totals = {instance: np.zeros(shape) for instance in targets}
    scored = [instance for instance in targets if instance in ground.queries]

    tables = [np.asarray(w, dtype=np.float64) for w in weights]
    dims = tuple(v.domain for v in space.variables)
    rules_by_head = ground.rules_by_head
    for start in range(0, space.world_count if scored else 0, ORACLE_BLOCK):
        stop = min(start + ORACLE_BLOCK, space.world_count)
        n = stop - start
        columns = np.unravel_index(np.arange(start, stop), dims) if dims else ()
        never = np.zeros(n, dtype=bool)
        truth = {atom: columns[var] == value for atom, (var, value) in space.assignment.items()}
        for head in ground.head_order:
            derived = np.zeros(n, dtype=bool)
            for rule in rules_by_head.get(head, ()):
                holds = np.ones(n, dtype=bool)
                for positive, atom in rule.body:
                    column = truth.get(atom, never)
                    holds &= column if positive else ~column
                derived |= holds
            truth[head] = derived

        world_weight = np.ones((n,) + shape)
        for var, table in enumerate(tables):
            world_weight = world_weight * table[columns[var]]
        for instance in scored:
            mask = truth.get(instance, never).astype(np.float64)
            totals[instance] = totals[instance] + np.tensordot(mask, world_weight, axes=(0, 0))

    return {instance: float(total) if shape == () else total
            for instance, total in totals.items()}


def enumerate_oracle(ground: GroundProgram, params, instance: GroundAtom) -> Value:
    """Probability of one query instance by world enumeration (see oracle_distribution)."""
    return oracle_distribution(ground, params, [instance])[instance]


class CircuitCache:
    """Compiled families keyed by ground-program digest; safe to share across threads."""

    def __init__(self):
        self._families: Dict[str, CircuitFamily] = {}
        self._circuits: Dict[Tuple[str, GroundAtom], Circuit] = {}
        self._lock = threading.Lock()

    def family(self, ground: GroundProgram) -> CircuitFamily:
        digest = ground.digest()
        with self._lock:
            cached = self._families.get(digest)
        if cached is not None:
            return cached
        family = compile_family(ground)
        with self._lock:
            return self._families.setdefault(digest, family)

    def circuit(self, ground: GroundProgram, instance: GroundAtom) -> Circuit:
        key = (ground.digest(), instance)
        with self._lock:
            cached = self._circuits.get(key)
        if cached is not None:
            return cached
        circuit = self.family(ground).circuit(instance)
        with self._lock:
            return self._circuits.setdefault(key, circuit)

    def __len__(self) -> int:
        with self._lock:
            return len(self._families)


_default_cache = CircuitCache()


def task_distribution(ground: GroundProgram, params,
                      cache: Optional[CircuitCache] = None) -> Dict[GroundAtom, Value]:
    """p(q) for every query instance of `ground`, circuits reused through `cache`."""
    family = (cache or _default_cache).family(ground)
    return family.evaluate(params)


def circuit_stats(circuit: Union[Circuit, CircuitFamily]) -> Dict[str, int]:
    if isinstance(circuit, CircuitFamily):
        roots = len(circuit.roots)
        used = {var for var, _ in circuit.nodes[2:]}
    else:
        roots = 1
        used = set(circuit.variables_used())
    return {
        "nodes": len(circuit.nodes) - 2,
        "variables": len(used),
        "bits": circuit.space.bits,
        "roots": roots,
    }


# ---------------------------------------------------------------------------
# Parameter-table files
# ---------------------------------------------------------------------------

def parse_param_table(text: str) -> FactParamTable:
    """
    Parse `key value` and `prefix v0 ... vK-1` records; `#` starts a comment.

    A record with several values binds `prefix/0 .. prefix/K-1`.
    """
    table = FactParamTable()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *fields = line.split()
        if not fields:
            raise ParameterError(f"line {lineno}: no value for key '{key}'")
        try:
            values = [float(v) for v in fields]
        except ValueError:
            raise ParameterError(f"line {lineno}: non-numeric value for key '{key}'") from None
        if len(values) == 1:
            table[key] = values[0]
        else:
            table.set_vector(key, values)
    return table


def read_param_table(path: str) -> FactParamTable:
    with open(path, "r", encoding="utf-8") as f:
        return parse_param_table(f.read())


def write_param_table(table: FactParamTable, path: str):
    with open(path, "w", encoding="utf-8") as f:
        for key, value in sorted(_as_table(table).items()):
            f.write(f"{key} {float(value)!r}\n")
