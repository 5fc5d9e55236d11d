#!/usr/bin/env python3
"""
Unit tests for the program templates over the slot/class interface.
"""

import pytest
import os
import sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ConfigurationError
from grounder import GroundAtom, ground_query
from logic_lang import ensure_valid, parse_program
from programs import TEMPLATES, fact_interface, render_template


class TestTemplates:
    """Test cases for rendered templates."""

    @pytest.mark.parametrize("name", sorted(TEMPLATES))
    @pytest.mark.parametrize("n_slots,n_classes", [(1, 2), (2, 3), (3, 5)])
    def test_every_template_validates(self, name, n_slots, n_classes):
        """Templates render valid programs at any capacity."""
        program = parse_program(render_template(name, n_slots, n_classes))

        report = ensure_valid(program)

        assert report.accepted

    def test_interface_keys(self):
        """One objectness key per slot and one class key per slot and class."""
        program = parse_program("\n".join(fact_interface(2, 3)))

        keys = program.external_keys()

        assert keys == ["object/1", "class/1/0", "class/1/1", "class/1/2",
                        "object/2", "class/2/0", "class/2/1", "class/2/2"]
        assert {f.group for f in program.facts if f.group} == {"slot1", "slot2"}

    def test_addition_labels_cover_all_sums(self):
        """K=5 and three slots reach every sum 0..12."""
        ground = ground_query(parse_program(render_template("addition", 3, 5)))

        assert [q.args[0] for q in ground.queries] == list(range(13))

    def test_chain_addition_matches_query_family(self):
        """The slot-chained encoding grounds add(input, 0..18) for two decimal digits."""
        ground = ground_query(parse_program(render_template("chain_addition", 2, 10)))

        assert [q.args[1] for q in ground.queries] == list(range(19))
        assert all(q.args[0] == "input" for q in ground.queries)

    def test_count_labels(self):
        """Counting over N slots labels 0..N."""
        ground = ground_query(parse_program(render_template("count", 4, 2)))

        assert [q.args[0] for q in ground.queries] == [0, 1, 2, 3, 4]

    def test_pair_is_propositional(self):
        """Pair detection has a single 0-ary query."""
        ground = ground_query(parse_program(render_template("pair", 3, 5)))

        assert ground.queries == (GroundAtom("pair"),)

    def test_unknown_template(self):
        """Unknown template names are configuration errors."""
        with pytest.raises(ConfigurationError) as exc_info:
            render_template("subtraction", 2, 2)

        assert "addition" in str(exc_info.value)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
