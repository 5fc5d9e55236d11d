#!/usr/bin/env python3
"""
Synthetic token scenes with distant supervision.

A scene holds up to `max_objects` objects. Every object contributes
`tokens_per_object` tokens near its class prototype, shifted by an instance
code shared by the object's tokens; the remaining tokens are background noise
near the origin. Token order is shuffled. The task label is computed from the
object classes at generation time; the classes themselves are kept apart as
hidden labels for evaluation only.
"""

import hashlib
import itertools
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, UnsatisfiableSplitError
from logger import timed_operation

SPLIT_KINDS = ("iid", "compositional", "interpolation", "extrapolation")
PARTS = ("train", "val", "test")


def named_generator(seed: int, *names: str) -> np.random.Generator:
    """
    Independent generator for a named stream below `seed`.

    Streams are derived from the root seed and the name path only, so adding
    a new consumer never shifts the numbers another consumer draws.
    """
    path = "/".join(names).encode("utf-8")
    words = np.frombuffer(hashlib.sha256(path).digest()[:16], dtype=np.uint32)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(w) for w in words)))


def _pair_label(classes: Sequence[int]) -> int:
    return int(len(set(classes)) < len(classes))


TASKS: Dict[str, Callable[[Sequence[int]], int]] = {
    "addition": lambda classes: int(sum(classes)),
    "count": lambda classes: len(classes),
    "pair": _pair_label,
}


@dataclass(frozen=True)
class Hidden:
    """Ground-truth concepts of a scene: the class of every object present."""

    classes: Tuple[int, ...] = ()

    @property
    def count(self) -> int:
        return len(self.classes)

    def objectness(self, n_slots: int) -> List[int]:
        return [1] * self.count + [0] * (n_slots - self.count)


@dataclass
class Example:
    x: np.ndarray
    y: int
    hidden: Optional[Hidden] = None


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    min_objects: int = 0
    max_objects: int = 3
    n_classes: int = 5
    tokens: int = 12
    token_dim: int = 16
    tokens_per_object: int = 3
    prototype_scale: float = 2.0
    instance_scale: float = 0.5
    noise: float = 0.1
    background_scale: float = 0.1
    task: str = "addition"

    @property
    def background_tokens(self) -> int:
        return self.tokens - self.tokens_per_object * self.max_objects

    @classmethod
    def from_dict(cls, data: Dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown scene settings: {', '.join(sorted(unknown))}")
        spec = cls(**data)
        spec.check()
        return spec

    def check(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task '{self.task}' (known: {', '.join(TASKS)})")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigurationError("object count range must satisfy 0 <= min <= max")
        if self.n_classes < 1 or self.tokens_per_object < 1:
            raise ConfigurationError("scenes need at least one class and one token per object")
        if self.background_tokens < 0:
            raise ConfigurationError(
                f"{self.max_objects} objects of {self.tokens_per_object} tokens do not fit "
                f"in {self.tokens} tokens"
            )

    def prototypes(self) -> np.ndarray:
        rng = named_generator(self.seed, "prototypes")
        return rng.standard_normal((self.n_classes, self.token_dim)) * self.prototype_scale

    def label(self, classes: Sequence[int]) -> int:
        return TASKS[self.task](classes)


@dataclass(frozen=True)
class Split:
    kind: str = "iid"
    fraction: float = 0.75
    held_out_count: int = 2
    extrapolation_count: int = 4
    val_fraction: float = 0.1

    @classmethod
    def from_dict(cls, data: Dict) -> "Split":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown split settings: {', '.join(sorted(unknown))}")
        split = cls(**data)
        if split.kind not in SPLIT_KINDS:
            raise ConfigurationError(f"unknown split kind '{split.kind}'")
        if not 0.0 < split.fraction < 1.0 or not 0.0 <= split.val_fraction < 1.0:
            raise ConfigurationError("split fractions must lie in (0, 1)")
        return split


def signatures(spec: SceneSpec, counts: Iterable[int]) -> List[Tuple[int, ...]]:
    """Every sorted class multiset with an allowed object count."""
    return [sig for m in counts
            for sig in itertools.combinations_with_replacement(range(spec.n_classes), m)]


def compositional_partition(spec: SceneSpec, split: Split
                            ) -> Tuple[List[Tuple[int, ...]], List[Tuple[int, ...]]]:
    """
    Split the class multisets into train/test by `split.fraction`.

    Test signatures whose label no train signature reaches are moved back to
    train, so every achievable label is seen in training.
    """
    every = signatures(spec, range(spec.min_objects, spec.max_objects + 1))
    if len(every) < 2:
        raise UnsatisfiableSplitError("a compositional split needs at least two class combinations")
    rng = named_generator(spec.seed, "split", "compositional")
    order = [every[i] for i in rng.permutation(len(every))]
    cut = max(1, min(len(order) - 1, int(round(split.fraction * len(order)))))
    train, test = order[:cut], order[cut:]

    covered = {spec.label(sig) for sig in train}
    for sig in list(test):
        if spec.label(sig) not in covered:
            test.remove(sig)
            train.append(sig)
            covered.add(spec.label(sig))
    if not test:
        raise UnsatisfiableSplitError("label coverage left no combinations for the test part")
    return sorted(train), sorted(test)


def _counts_for(spec: SceneSpec, split: Split, part: str) -> List[int]:
    full = list(range(spec.min_objects, spec.max_objects + 1))
    if split.kind == "interpolation":
        if split.held_out_count not in full or len(full) < 2:
            raise UnsatisfiableSplitError(
                f"cannot hold out count {split.held_out_count} from counts {full}"
            )
        if part == "test":
            return [split.held_out_count]
        return [m for m in full if m != split.held_out_count]
    if split.kind == "extrapolation" and part == "test":
        m = split.extrapolation_count
        if m <= spec.max_objects or m * spec.tokens_per_object > spec.tokens:
            raise UnsatisfiableSplitError(
                f"cannot extrapolate to {m} objects from at most {spec.max_objects} "
                f"with {spec.tokens} tokens"
            )
        return [m]
    return full


def _scene(spec: SceneSpec, prototypes: np.ndarray, classes: Sequence[int],
           rng: np.random.Generator) -> np.ndarray:
    tokens = []
    for c in classes:
        code = rng.standard_normal(spec.token_dim) * spec.instance_scale
        for _ in range(spec.tokens_per_object):
            tokens.append(prototypes[c] + code + rng.standard_normal(spec.token_dim) * spec.noise)
    while len(tokens) < spec.tokens:
        tokens.append(rng.standard_normal(spec.token_dim) * spec.background_scale)
    return np.array(tokens)[rng.permutation(spec.tokens)]


@timed_operation("generate_dataset")
def generate_dataset(spec: SceneSpec, n: int, split: Optional[Split] = None,
                     part: str = "train") -> List[Example]:
    """
    `n` scenes of one part ("train", "val" or "test") of `split`.

    Object counts are uniform over the counts the part allows and classes are
    uniform, so class appearances balance. Compositional parts draw by
    rejection from their signature set; val follows train.

    Raises:
        UnsatisfiableSplitError: the split cannot be realised under `spec`
    """
    split = split or Split()
    if part not in PARTS:
        raise ConfigurationError(f"unknown dataset part '{part}'")
    spec.check()
    allowed = None
    if split.kind == "compositional":
        train_sigs, test_sigs = compositional_partition(spec, split)
        allowed = set(test_sigs if part == "test" else train_sigs)
    counts = _counts_for(spec, split, "train" if part == "val" else part)

    prototypes = spec.prototypes()
    rng = named_generator(spec.seed, "data", split.kind, part)
    examples = []
    while len(examples) < n:
        m = int(rng.choice(counts))
        classes = tuple(int(c) for c in rng.integers(0, spec.n_classes, size=m))
        if allowed is not None and tuple(sorted(classes)) not in allowed:
            continue
        x = _scene(spec, prototypes, classes, rng)
        examples.append(Example(x, spec.label(classes), Hidden(classes)))
    return examples


def relabel(examples: Sequence[Example], task: str) -> List[Example]:
    """Copies of `examples` labelled for another task from their hidden classes."""
    if task not in TASKS:
        raise ConfigurationError(f"unknown task '{task}'")
    out = []
    for ex in examples:
        if ex.hidden is None:
            raise ConfigurationError("relabelling needs hidden labels")
        out.append(replace(ex, y=TASKS[task](ex.hidden.classes)))
    return out


def strip_hidden(examples: Sequence[Example]) -> List[Example]:
    return [replace(ex, hidden=None) for ex in examples]


def majority_baseline(examples: Sequence[Example]) -> float:
    """Accuracy of always predicting the most frequent label."""
    if not examples:
        return 0.0
    _, counts = np.unique([ex.y for ex in examples], return_counts=True)
    return float(counts.max() / len(examples))


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

DATASET_FILE = "dataset.jsonl"
HIDDEN_FILE = "hidden.jsonl"
SPEC_FILE = "spec.json"


def write_dataset(examples: Sequence[Example], directory: str,
                  spec: Optional[SceneSpec] = None, split: Optional[Split] = None):
    """Tokens and labels to dataset.jsonl, hidden classes to hidden.jsonl."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, DATASET_FILE), "w", encoding="utf-8") as f:
        for ex in examples:
            rows = [[float(v) for v in row] for row in ex.x]
            f.write(json.dumps({"x": rows, "y": int(ex.y)}) + "\n")
    with open(os.path.join(directory, HIDDEN_FILE), "w", encoding="utf-8") as f:
        for ex in examples:
            classes = list(ex.hidden.classes) if ex.hidden is not None else None
            f.write(json.dumps({"classes": classes}) + "\n")
    if spec is not None:
        record = {"scene": asdict(spec), "split": asdict(split) if split else None}
        with open(os.path.join(directory, SPEC_FILE), "w", encoding="utf-8") as f:
            json.dump(record, f, indent=2, sort_keys=True)
            f.write("\n")


def read_dataset(directory: str, with_hidden: bool = True) -> List[Example]:
    with open(os.path.join(directory, DATASET_FILE), "r", encoding="utf-8") as f:
        records = [json.loads(line) for line in f if line.strip()]
    hidden: List[Optional[Hidden]] = [None] * len(records)
    hidden_path = os.path.join(directory, HIDDEN_FILE)
    if with_hidden and os.path.exists(hidden_path):
        with open(hidden_path, "r", encoding="utf-8") as f:
            rows = [json.loads(line) for line in f if line.strip()]
        if len(rows) != len(records):
            raise ConfigurationError(f"{hidden_path} does not match {DATASET_FILE}")
        hidden = [Hidden(tuple(r["classes"])) if r["classes"] is not None else None for r in rows]
    return [Example(np.array(r["x"], dtype=np.float64), int(r["y"]), h)
            for r, h in zip(records, hidden)]


def stack(examples: Sequence[Example]) -> np.ndarray:
    """Scene tokens of a batch as one (B, T, D) array."""
    return np.stack([ex.x for ex in examples])
