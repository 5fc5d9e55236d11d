#!/usr/bin/env python3
"""
Unit tests for circuit compilation, evaluation and backpropagation.

The two-slot addition example uses β = (0.8, 0.6) and class rows (0.3, 0.7)
for both slots, giving p(add(0..2)) = (0.2552, 0.5096, 0.2352).
"""

import pytest
import itertools
import os
import sys
from functools import lru_cache
import numpy as np
from unittest.mock import patch
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from circuit import (
    CircuitCache, FactParamTable, VariableSpace, backprop, circuit_stats, compile,
    compile_family, enumerate_oracle, evaluate, oracle_distribution, parse_param_table,
    read_param_table, task_distribution, write_param_table,
)
from errors import CapacityError, MissingParameterError, ParameterError
from grounder import GroundAtom, ground_query
from logic_lang import load_program, parse_program
from programs import render_template

PROGRAM_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "programs")


def add(z):
    return GroundAtom("add", (z,))


@pytest.fixture
def addition_ground():
    return ground_query(load_program(os.path.join(PROGRAM_DIR, "example_addition.pl")))


@pytest.fixture
def example_params():
    table = FactParamTable({"object/1": 0.8, "object/2": 0.6})
    table.set_vector("class/1", [0.3, 0.7])
    table.set_vector("class/2", [0.3, 0.7])
    return table


def _random_params(rng, n_slots=2, n_classes=2):
    table = FactParamTable()
    for i in range(1, n_slots + 1):
        table[f"object/{i}"] = float(rng.uniform(0.05, 0.95))
        table.set_vector(f"class/{i}", rng.dirichlet(np.ones(n_classes)).tolist())
    return table


class TestCompile:
    """Test cases for compile and the decision diagram structure."""

    def test_add2_has_single_witness(self, addition_ground):
        """add(2) holds exactly when both slots hold a 1."""
        circuit = compile(addition_ground, add(2))

        paths = list(circuit.paths())

        assert len(paths) == 1
        assert all(value == 1 for _, value in paths[0])
        assert len(paths[0]) == len(circuit.space.variables)

    def test_add1_matches_world_enumeration(self, addition_ground):
        """The diagram is true on exactly the worlds where one slot contributes 1."""
        circuit = compile(addition_ground, add(1))
        space = circuit.space

        for world in itertools.product(*(range(v.domain) for v in space.variables)):
            digits = []
            for slot in (1, 2):
                present = world[space.assignment[GroundAtom("object", (slot,))][0]] == 1
                var, _ = space.assignment[GroundAtom("class", (slot, 1))]
                digits.append(1 if present and world[var] == 1 else 0)
            assert circuit.is_true(world) == (sum(digits) == 1)

    def test_variable_space(self, addition_ground):
        """One Boolean per objectness fact and one categorical per class group."""
        space = VariableSpace.from_ground(addition_ground)

        assert [v.kind for v in space.variables] == ["bool", "cat", "bool", "cat"]
        assert space.bits == 4
        assert space.world_count == 16

    def test_unique_table_shares_subdiagrams(self, addition_ground):
        """Query roots of one family share nodes."""
        family = compile_family(addition_ground)

        reachable = set()
        stack = [family.root(add(z)) for z in range(3)]
        while stack:
            node = stack.pop()
            if node not in reachable:
                reachable.add(node)
                stack.extend(family.nodes[node][1])
        total = sum(family.circuit(add(z)).node_count for z in range(3))

        assert len(reachable - {0, 1}) < total

    def test_capacity_limit(self, addition_ground):
        """Too many bits for the configured limit raises CapacityError."""
        with patch("circuit.config") as mock_config:
            mock_config.max_circuit_bits = 3
            with pytest.raises(CapacityError):
                compile_family(addition_ground)

    def test_stats(self, addition_ground):
        """circuit_stats reports size figures."""
        stats = circuit_stats(compile_family(addition_ground))

        assert stats["roots"] == 3
        assert stats["bits"] == 4
        assert stats["variables"] == 4
        assert stats["nodes"] > 0


class TestEvaluate:
    """Test cases for evaluate."""

    def test_single_fact(self):
        """A single fact evaluates to its probability."""
        ground = ground_query(parse_program("0.5::f.\nquery(f)."))

        assert evaluate(compile(ground, GroundAtom("f")), {}) == pytest.approx(0.5, abs=1e-12)

    def test_slot_absent_with_half_probability(self, addition_ground):
        """add(1) with slot 1 a certain 1 and slot 2 a coin flip on a 1 is 0.5."""
        table = FactParamTable({"object/1": 1.0, "object/2": 0.5})
        table.set_vector("class/1", [0.0, 1.0])
        table.set_vector("class/2", [0.0, 1.0])

        assert evaluate(compile(addition_ground, add(1)), table) == pytest.approx(0.5, abs=1e-12)

    def test_worked_distribution(self, addition_ground, example_params):
        """p(add(0..2)) = (0.2552, 0.5096, 0.2352)."""
        values = [evaluate(compile(addition_ground, add(z)), example_params) for z in range(3)]

        assert values == pytest.approx([0.2552, 0.5096, 0.2352], abs=1e-12)

    def test_literal_probabilities(self):
        """alarm = 1 − 0.9·0.8 and calm is its complement."""
        ground = ground_query(load_program(os.path.join(PROGRAM_DIR, "alarm.pl")))
        values = compile_family(ground).evaluate({})

        assert values[GroundAtom("alarm")] == pytest.approx(0.28, abs=1e-12)
        assert values[GroundAtom("calm")] == pytest.approx(0.72, abs=1e-12)

    def test_batched_parameters(self, addition_ground):
        """Array-valued parameters evaluate elementwise."""
        table = FactParamTable({"object/1": np.array([0.8, 1.0]), "object/2": np.array([0.6, 0.5])})
        table.set_vector("class/1", [np.array([0.3, 0.0]), np.array([0.7, 1.0])])
        table.set_vector("class/2", [np.array([0.3, 0.0]), np.array([0.7, 1.0])])

        value = evaluate(compile(addition_ground, add(1)), table)

        np.testing.assert_allclose(value, [0.5096, 0.5], atol=1e-12)

    def test_unprovable_instance_is_zero(self, addition_ground, example_params):
        """Atoms outside the query set evaluate to 0."""
        circuit = compile_family(addition_ground).circuit(add(7))

        assert evaluate(circuit, example_params) == 0.0

    def test_missing_parameter(self, addition_ground):
        """Unbound external keys raise MissingParameterError."""
        with pytest.raises(MissingParameterError) as exc_info:
            evaluate(compile(addition_ground, add(1)), {"object/1": 0.5})

        assert exc_info.value.exit_code == 4

    def test_out_of_range_parameter(self, addition_ground, example_params):
        """Probabilities outside [0, 1] raise ParameterError."""
        example_params["object/2"] = 1.2

        with pytest.raises(ParameterError):
            evaluate(compile(addition_ground, add(1)), example_params)

    def test_class_vector_off_simplex(self, addition_ground, example_params):
        """Class rows must sum to 1 within 1e-9."""
        example_params.set_vector("class/1", [0.3, 0.6])

        with pytest.raises(ParameterError) as exc_info:
            evaluate(compile(addition_ground, add(1)), example_params)

        assert "slot1" in str(exc_info.value)

    def test_distribution_sums_to_one(self, addition_ground):
        """Addition outcomes are exhaustive and exclusive."""
        rng = np.random.default_rng(3)
        for _ in range(5):
            values = task_distribution(addition_ground, _random_params(rng))
            assert sum(values.values()) == pytest.approx(1.0, abs=1e-12)


class TestBackprop:
    """Test cases for backprop."""

    def test_single_fact_gradient(self):
        """p(f) is linear in its own parameter."""
        ground = ground_query(parse_program(":- external(w, 1).\nw/1::f.\nquery(f)."))

        p, grads = backprop(compile(ground, GroundAtom("f")), {"w/1": 0.3})

        assert p == pytest.approx(0.3)
        assert grads["w/1"] == pytest.approx(1.0, abs=1e-12)

    def test_worked_gradients(self, addition_ground, example_params):
        """∂add(2)/∂β1 = 0.294 and ∂add(2)/∂class/1/1 = 0.336."""
        p, grads = backprop(compile(addition_ground, add(2)), example_params)

        assert p == pytest.approx(0.2352, abs=1e-12)
        assert grads["object/1"] == pytest.approx(0.294, abs=1e-12)
        assert grads["class/1/1"] == pytest.approx(0.336, abs=1e-12)
        assert grads["class/1/0"] == pytest.approx(0.0, abs=1e-12)

    def test_matches_finite_differences(self, addition_ground):
        """Every key's gradient matches central differences on evaluate."""
        rng = np.random.default_rng(11)
        step = 1e-5
        for z in range(3):
            circuit = compile(addition_ground, add(z))
            params = _random_params(rng)
            _, grads = backprop(circuit, params)
            for key in list(params.keys()):
                plus = FactParamTable(dict(params.values))
                minus = FactParamTable(dict(params.values))
                plus[key] = params[key] + step
                minus[key] = params[key] - step
                # the simplex check would reject a perturbed class row
                with patch("circuit.SIMPLEX_TOLERANCE", 1.0):
                    numeric = (evaluate(circuit, plus) - evaluate(circuit, minus)) / (2 * step)
                assert grads[key] == pytest.approx(numeric, abs=1e-7)

    def test_unused_keys_report_zero(self, addition_ground, example_params):
        """Keys the circuit never reads have zero gradient."""
        _, grads = backprop(compile(addition_ground, add(2)), example_params)

        assert grads["object/9"] == 0.0

    def test_family_backprop_is_linear_in_seeds(self, addition_ground, example_params):
        """Seeding two roots adds their gradients."""
        family = compile_family(addition_ground)

        _, both = family.backprop(example_params, {add(1): 1.0, add(2): 1.0})
        _, g1 = backprop(family.circuit(add(1)), example_params)
        _, g2 = backprop(family.circuit(add(2)), example_params)

        for key in example_params.keys():
            assert both[key] == pytest.approx(g1[key] + g2[key], abs=1e-12)


class TestOracle:
    """Test cases for enumerate_oracle."""

    def test_worked_distribution(self, addition_ground, example_params):
        """World enumeration reproduces the compiled values."""
        values = [enumerate_oracle(addition_ground, example_params, add(z)) for z in range(3)]

        assert values == pytest.approx([0.2552, 0.5096, 0.2352], abs=1e-12)

    @pytest.mark.parametrize("name", ["alarm.pl", "example_addition.pl", "pair.pl"])
    def test_agrees_with_circuits(self, name):
        """Compiled evaluation equals enumeration on shipped programs."""
        ground = ground_query(load_program(os.path.join(PROGRAM_DIR, name)))
        rng = np.random.default_rng(5)
        params = _random_params(rng, n_slots=3, n_classes=5) if name == "pair.pl" \
            else _random_params(rng)
        compiled = compile_family(ground).evaluate(params)

        for q in ground.queries:
            assert compiled[q] == pytest.approx(enumerate_oracle(ground, params, q), abs=1e-12)

    def test_world_limit(self, addition_ground, example_params):
        """More worlds than allowed raises CapacityError."""
        with patch("circuit.config") as mock_config:
            mock_config.max_oracle_worlds = 8
            with pytest.raises(CapacityError):
                enumerate_oracle(addition_ground, example_params, add(1))


TEMPLATES = ("addition", "chain_addition", "count", "pair")
ORACLE_CAPACITIES = ((1, 2), (2, 3), (3, 4), (4, 5), (4, 2), (2, 5))


@lru_cache(maxsize=None)
def _template_family(name, n_slots, n_classes):
    ground = ground_query(parse_program(render_template(name, n_slots, n_classes)))
    return ground, compile_family(ground)


def _batched_params(rng, n_slots, n_classes, batch):
    """`batch` random tables at once; every key holds an array of length `batch`."""
    table = FactParamTable()
    for i in range(1, n_slots + 1):
        table[f"object/{i}"] = rng.uniform(size=batch)
        table.set_vector(f"class/{i}", list(rng.dirichlet(np.ones(n_classes), size=batch).T))
    return table


def _interior_params(rng, n_slots, n_classes):
    """Scalar table whose entries stay at least 0.05 away from 0 and 1."""
    table = FactParamTable()
    for i in range(1, n_slots + 1):
        table[f"object/{i}"] = float(rng.uniform(0.05, 0.95))
        row = 0.5 * rng.dirichlet(np.ones(n_classes)) + 0.5 / n_classes
        table.set_vector(f"class/{i}", row.tolist())
    return table


def _permute_slots(table, perm, n_classes):
    """Slot i of the result carries the parameters of slot perm[i]."""
    out = FactParamTable()
    for i, source in enumerate(perm, start=1):
        out[f"object/{i}"] = table[f"object/{source + 1}"]
        out.set_vector(f"class/{i}", table.vector(f"class/{source + 1}", n_classes))
    return out


class TestTemplateProperties:
    """Properties of compiled templates over many random parameter tables."""

    @pytest.mark.parametrize("name", TEMPLATES)
    @pytest.mark.parametrize("n_slots,n_classes", ORACLE_CAPACITIES)
    def test_circuit_equals_enumeration(self, name, n_slots, n_classes):
        """42 random tables per template and capacity, up to 4 slots x 5 classes."""
        ground, family = _template_family(name, n_slots, n_classes)
        params = _batched_params(np.random.default_rng(n_slots * 10 + n_classes),
                                 n_slots, n_classes, 42)

        compiled = family.evaluate(params)
        enumerated = oracle_distribution(ground, params)

        assert set(compiled) == set(enumerated)
        for q in enumerated:
            np.testing.assert_allclose(compiled[q], enumerated[q], rtol=0, atol=1e-9)

    @pytest.mark.parametrize("name", ["addition", "chain_addition", "count"])
    def test_label_family_is_normalized(self, name):
        """Σ_y p(y) = 1 on 1,000 random tables."""
        _, family = _template_family(name, 3, 4)
        params = _batched_params(np.random.default_rng(17), 3, 4, 1000)

        total = sum(family.evaluate(params).values())

        np.testing.assert_allclose(total, np.ones(1000), rtol=0, atol=1e-9)

    @pytest.mark.parametrize("name", TEMPLATES)
    def test_slot_permutation_leaves_distribution_unchanged(self, name):
        """Renumbering the slots never changes any label probability."""
        _, family = _template_family(name, 3, 4)
        params = _batched_params(np.random.default_rng(23), 3, 4, 50)
        reference = family.evaluate(params)

        for perm in itertools.permutations(range(3)):
            permuted = family.evaluate(_permute_slots(params, perm, 4))
            for q, p in reference.items():
                np.testing.assert_allclose(permuted[q], p, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("name", TEMPLATES)
    def test_multilinear_in_each_variable(self, name):
        """Along one β or one class row (others fixed) every p(y) is affine."""
        rng = np.random.default_rng(29)
        _, family = _template_family(name, 3, 3)
        base = _interior_params(rng, 3, 3)
        t = np.linspace(0.0, 1.0, 7)

        for slot in range(1, 4):
            along_beta = FactParamTable(dict(base.values))
            along_beta[f"object/{slot}"] = t
            u, v = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
            along_row = FactParamTable(dict(base.values))
            along_row.set_vector(f"class/{slot}", [t * u[k] + (1 - t) * v[k] for k in range(3)])
            for table in (along_beta, along_row):
                for p in family.evaluate(table).values():
                    values = np.broadcast_to(p, t.shape)
                    np.testing.assert_allclose(np.diff(values, 2), 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(100))
    def test_backprop_matches_central_differences(self, seed):
        """Random template, capacity and instance; step 1e-5, relative error ≤ 1e-5."""
        rng = np.random.default_rng(1000 + seed)
        name = TEMPLATES[rng.integers(len(TEMPLATES))]
        n_slots = int(rng.integers(2 if name == "pair" else 1, 5))
        n_classes = int(rng.integers(2, 6))
        ground, family = _template_family(name, n_slots, n_classes)
        instance = ground.queries[rng.integers(len(ground.queries))]
        circuit = family.circuit(instance)
        base = _interior_params(rng, n_slots, n_classes)
        _, grads = backprop(circuit, base)

        # column 2j moves key j up by one step, column 2j+1 moves it down
        keys = sorted(base.keys())
        step = 1e-5
        shifted = FactParamTable({key: np.full(2 * len(keys), float(base[key])) for key in keys})
        for j, key in enumerate(keys):
            shifted[key][2 * j] += step
            shifted[key][2 * j + 1] -= step
        with patch("circuit.SIMPLEX_TOLERANCE", 1.0):
            values = np.broadcast_to(evaluate(circuit, shifted), (2 * len(keys),))
        numeric = (values[0::2] - values[1::2]) / (2 * step)
        analytic = np.array([float(grads[key]) for key in keys])

        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


class TestCircuitCache:
    """Test cases for CircuitCache."""

    def test_reuses_compiled_family(self, addition_ground):
        """A second request for the same ground program hits the cache."""
        cache = CircuitCache()

        first = cache.family(addition_ground)
        second = cache.family(ground_query(load_program(
            os.path.join(PROGRAM_DIR, "example_addition.pl"))))

        assert first is second
        assert len(cache) == 1
        assert cache.circuit(addition_ground, add(1)) is cache.circuit(addition_ground, add(1))


class TestParamTables:
    """Test cases for parameter-table files."""

    def test_parse_scalars_and_vectors(self):
        """Several values expand to prefix/0 .. prefix/K-1."""
        table = parse_param_table("# comment\nobject/1 0.8\nclass/1 0.3 0.7  # row\n")

        assert table["object/1"] == 0.8
        assert table["class/1/0"] == 0.3
        assert table["class/1/1"] == 0.7

    def test_non_numeric_value(self):
        """Non-numeric values raise ParameterError with the line number."""
        with pytest.raises(ParameterError) as exc_info:
            parse_param_table("object/1 high\n")

        assert "line 1" in str(exc_info.value)

    def test_shipped_table(self, addition_ground):
        """The shipped table reproduces the worked add(1) value."""
        table = read_param_table(os.path.join(PROGRAM_DIR, "example_addition.params"))

        assert evaluate(compile(addition_ground, add(1)), table) == pytest.approx(0.5096, abs=1e-12)

    def test_write_then_read(self, tmp_path, example_params):
        """Written tables read back with the same values."""
        path = tmp_path / "params.txt"

        write_param_table(example_params, str(path))

        assert dict(read_param_table(str(path)).items()) == dict(example_params.items())


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
