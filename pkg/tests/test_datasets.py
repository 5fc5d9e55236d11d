#!/usr/bin/env python3
"""
Unit tests for synthetic scene generation, splits and dataset files.
"""

import pytest
import os
import sys
import numpy as np
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from datasets import (
    Example, Hidden, SceneSpec, Split, compositional_partition, generate_dataset,
    majority_baseline, named_generator, read_dataset, relabel, signatures, stack,
    strip_hidden, write_dataset,
)
from errors import ConfigurationError, UnsatisfiableSplitError


class TestNamedGenerator:
    """Test cases for named_generator."""

    def test_same_name_same_stream(self):
        """Seed and name fix the stream."""
        a = named_generator(3, "data", "train").standard_normal(4)
        b = named_generator(3, "data", "train").standard_normal(4)

        np.testing.assert_array_equal(a, b)

    def test_names_are_independent(self):
        """Different names give different streams."""
        a = named_generator(3, "data", "train").standard_normal(4)
        b = named_generator(3, "data", "test").standard_normal(4)

        assert not np.allclose(a, b)


class TestSceneSpec:
    """Test cases for SceneSpec."""

    def test_from_dict_rejects_unknown_keys(self):
        """Unknown scene settings are configuration errors."""
        with pytest.raises(ConfigurationError):
            SceneSpec.from_dict({"colour": "red"})

    def test_objects_must_fit(self):
        """Object tokens may not exceed the scene size."""
        with pytest.raises(ConfigurationError):
            SceneSpec.from_dict({"max_objects": 5, "tokens": 12, "tokens_per_object": 3})

    def test_unknown_task(self):
        """Only known task labels are allowed."""
        with pytest.raises(ConfigurationError):
            SceneSpec.from_dict({"task": "product"})

    @pytest.mark.parametrize("task,classes,label", [
        ("addition", (1, 4, 2), 7), ("addition", (), 0), ("count", (3, 3), 2),
        ("pair", (1, 2, 1), 1), ("pair", (0, 1, 2), 0),
    ])
    def test_labels(self, task, classes, label):
        """Task labels follow from the object classes."""
        assert SceneSpec(task=task).label(classes) == label

    def test_label_range(self):
        """K=5 with up to three objects labels 0..12."""
        spec = SceneSpec()

        labels = {spec.label(sig) for sig in signatures(spec, range(0, 4))}

        assert labels == set(range(13))


class TestGenerateDataset:
    """Test cases for generate_dataset."""

    def test_shapes_and_hidden_labels(self):
        """Scenes are (T, D) with hidden classes consistent with the label."""
        spec = SceneSpec(seed=1)

        examples = generate_dataset(spec, 50)

        assert len(examples) == 50
        for ex in examples:
            assert ex.x.shape == (12, 16)
            assert ex.y == sum(ex.hidden.classes)
            assert 0 <= ex.hidden.count <= 3

    def test_deterministic(self):
        """Same spec, split and part give identical data."""
        spec = SceneSpec(seed=2)

        a, b = generate_dataset(spec, 10), generate_dataset(spec, 10)

        np.testing.assert_array_equal(stack(a), stack(b))
        assert [ex.y for ex in a] == [ex.y for ex in b]

    def test_empty_scenes_label_zero(self):
        """Scenes without objects exist and are labelled 0."""
        examples = generate_dataset(SceneSpec(seed=3), 200)

        empty = [ex for ex in examples if ex.hidden.count == 0]
        assert empty
        assert all(ex.y == 0 for ex in empty)
        assert all(ex.hidden.objectness(3) == [0, 0, 0] for ex in empty)

    def test_class_appearances_balance(self):
        """Classes appear with roughly equal frequency."""
        examples = generate_dataset(SceneSpec(seed=4), 2000)

        counts = np.bincount([c for ex in examples for c in ex.hidden.classes], minlength=5)

        assert counts.min() / counts.max() > 0.7

    def test_object_tokens_cluster_near_prototypes(self):
        """A single-object scene holds tokens near its class prototype."""
        spec = SceneSpec(seed=5, min_objects=1, max_objects=1, noise=0.0, instance_scale=0.0)
        prototypes = spec.prototypes()

        ex = generate_dataset(spec, 1)[0]

        distances = np.linalg.norm(ex.x - prototypes[ex.hidden.classes[0]], axis=1)
        assert np.sum(distances < 1e-12) == spec.tokens_per_object

    def test_unknown_part(self):
        """Parts are train, val or test."""
        with pytest.raises(ConfigurationError):
            generate_dataset(SceneSpec(), 1, part="holdout")


class TestSplits:
    """Test cases for the out-of-distribution splits."""

    def test_compositional_partition(self):
        """Train and test signatures are disjoint and cover every combination."""
        spec = SceneSpec(seed=6)

        train, test = compositional_partition(spec, Split(kind="compositional"))

        assert set(train).isdisjoint(test)
        assert set(train) | set(test) == set(signatures(spec, range(0, 4)))
        assert {spec.label(s) for s in train} == set(range(13))

    def test_compositional_parts_respect_partition(self):
        """Generated scenes fall in their part's signature set."""
        spec = SceneSpec(seed=6)
        split = Split(kind="compositional")
        train_sigs, test_sigs = compositional_partition(spec, split)

        test = generate_dataset(spec, 40, split, "test")
        val = generate_dataset(spec, 40, split, "val")

        assert all(tuple(sorted(ex.hidden.classes)) in set(test_sigs) for ex in test)
        assert all(tuple(sorted(ex.hidden.classes)) in set(train_sigs) for ex in val)

    def test_interpolation(self):
        """The held-out count appears only in test."""
        spec = SceneSpec(seed=7)
        split = Split(kind="interpolation", held_out_count=2)

        train = generate_dataset(spec, 100, split, "train")
        test = generate_dataset(spec, 20, split, "test")

        assert all(ex.hidden.count != 2 for ex in train)
        assert all(ex.hidden.count == 2 for ex in test)

    def test_interpolation_unsatisfiable(self):
        """At most one object leaves nothing to hold out."""
        spec = SceneSpec(min_objects=1, max_objects=1)

        with pytest.raises(UnsatisfiableSplitError) as exc_info:
            generate_dataset(spec, 5, Split(kind="interpolation", held_out_count=2), "test")

        assert exc_info.value.exit_code == 7

    def test_extrapolation(self):
        """Test scenes hold more objects than training ever shows."""
        spec = SceneSpec(seed=8)
        split = Split(kind="extrapolation", extrapolation_count=4)

        test = generate_dataset(spec, 10, split, "test")

        assert all(ex.hidden.count == 4 for ex in test)
        assert all(ex.x.shape == (12, 16) for ex in test)

    def test_extrapolation_must_fit(self):
        """Extrapolated scenes still need enough tokens."""
        with pytest.raises(UnsatisfiableSplitError):
            generate_dataset(SceneSpec(), 5, Split(kind="extrapolation", extrapolation_count=5), "test")

    def test_unknown_split_kind(self):
        """Split kinds are validated."""
        with pytest.raises(ConfigurationError):
            Split.from_dict({"kind": "random"})


class TestHelpers:
    """Test cases for relabelling, baselines and files."""

    def test_relabel(self):
        """Relabelling uses the hidden classes."""
        examples = [Example(np.zeros((2, 2)), 4, Hidden((2, 2))), Example(np.zeros((2, 2)), 3, Hidden((1, 2)))]

        assert [ex.y for ex in relabel(examples, "pair")] == [1, 0]
        assert [ex.y for ex in relabel(examples, "count")] == [2, 2]

    def test_relabel_needs_hidden(self):
        """Stripped examples cannot be relabelled."""
        with pytest.raises(ConfigurationError):
            relabel(strip_hidden([Example(np.zeros((2, 2)), 0, Hidden(()))]), "count")

    def test_majority_baseline(self):
        """Frequency of the most common label."""
        examples = [Example(np.zeros(1), y) for y in (0, 1, 1, 2)]

        assert majority_baseline(examples) == 0.5
        assert majority_baseline([]) == 0.0

    def test_write_then_read(self, tmp_path):
        """Tokens, labels and hidden classes survive a file round trip."""
        spec = SceneSpec(seed=9)
        examples = generate_dataset(spec, 5)

        write_dataset(examples, str(tmp_path), spec, Split())
        loaded = read_dataset(str(tmp_path))

        np.testing.assert_array_equal(stack(loaded), stack(examples))
        assert [ex.hidden for ex in loaded] == [ex.hidden for ex in examples]
        assert (tmp_path / "spec.json").exists()

    def test_read_without_hidden(self, tmp_path):
        """Hidden labels can be left out when reading."""
        write_dataset(generate_dataset(SceneSpec(seed=9), 3), str(tmp_path))

        loaded = read_dataset(str(tmp_path), with_hidden=False)

        assert all(ex.hidden is None for ex in loaded)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
