#!/usr/bin/env python3
"""
Distant-supervision training and evaluation.

The loss of a batch is

    −Σ_b [ λ_task · log p(y_b | heads) + λ_rec · log p(x_b | slots) + λ_prior · log p(z_b) ]

The reconstruction and prior terms are differentiated on the tape. The task
term is differentiated by circuit backprop with respect to the head outputs
and seeded into the tape with inject_external_gradient, so β receives
gradient both as a fact probability and through the gating of the class
head and decoder.
"""

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import tensor as tn
from circuit import CircuitCache, FactParamTable
from config import config
from datasets import Example, SceneSpec, Split, generate_dataset, named_generator, stack
from errors import ConfigurationError, DivergenceError, InterfaceError
from grounder import GroundAtom, ground_query
from logger import get_logger, timed_operation
from logic_lang import Program, ensure_valid, load_program, parse_program
from perception import PerceptionConfig, PerceptionModel, prior_logp, reconstruction_loglik
from programs import render_template
from tensor import Tape, Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lambda_task: float = 1.0
    lambda_rec: float = 1.0
    lambda_prior: float = 1.0
    seed: int = 0
    program: str = ""
    template: str = "addition"
    n_train: int = 6000
    n_val: int = 500
    n_test: int = 1000
    eval_capacity: int = 0
    scene: SceneSpec = field(default_factory=SceneSpec)
    split: Split = field(default_factory=Split)
    model: PerceptionConfig = field(default_factory=PerceptionConfig)

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        """
        Build from a JSON-shaped mapping.

        `scene`, `split` and `model` are nested mappings. The scene seed
        follows the top-level seed unless given explicitly.

        Raises:
            ConfigurationError: unknown keys or out-of-range values
        """
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown training settings: {', '.join(sorted(unknown))}")
        flat = {k: v for k, v in data.items() if k not in ("scene", "split", "model")}
        seed = int(flat.get("seed", 0))
        scene = SceneSpec.from_dict({"seed": seed, **data.get("scene", {})})
        split = Split.from_dict(data.get("split", {}))
        model = PerceptionConfig.from_dict(data.get("model", {}))
        if model.n_classes != scene.n_classes or model.tokens != scene.tokens \
                or model.token_dim != scene.token_dim:
            raise ConfigurationError("model and scene disagree on classes or token shape")
        cfg = cls(scene=scene, split=split, model=model, **flat)
        cfg.check()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Error parsing {path}: {e}") from None
        return cls.from_dict(data)

    def check(self):
        for name in ("batch_size", "lr", "n_train"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"'{name}' must be positive")
        for name in ("epochs", "weight_decay", "lambda_task", "lambda_rec", "lambda_prior",
                     "n_val", "n_test", "eval_capacity", "seed"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"'{name}' must not be negative")

    def with_seed(self, seed: int) -> "TrainConfig":
        data = self.to_dict()
        data["seed"] = seed
        data["scene"]["seed"] = seed
        return TrainConfig.from_dict(data)

    def to_dict(self) -> Dict:
        return asdict(self)

    @property
    def test_capacity(self) -> int:
        return self.eval_capacity or self.model.n_slots


# ---------------------------------------------------------------------------
# Task interface between heads and program
# ---------------------------------------------------------------------------

def head_params(betas: np.ndarray, class_probs: np.ndarray) -> FactParamTable:
    """Bind (B, N) betas and (B, N, K) class rows to `object/i` and `class/i/k`."""
    table = FactParamTable()
    for i in range(betas.shape[1]):
        table[f"object/{i + 1}"] = betas[:, i]
        for k in range(class_probs.shape[2]):
            table[f"class/{i + 1}/{k}"] = class_probs[:, i, k]
    return table


def hard_heads(hidden_rows: Sequence, n_slots: int, n_classes: int
               ) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic heads placing object j of every scene in slot j + 1."""
    betas = np.zeros((len(hidden_rows), n_slots))
    probs = np.full((len(hidden_rows), n_slots, n_classes), 0.0)
    probs[:, :, 0] = 1.0
    for b, hidden in enumerate(hidden_rows):
        for j, c in enumerate(hidden.classes):
            betas[b, j] = 1.0
            probs[b, j] = 0.0
            probs[b, j, c] = 1.0
    return betas, probs


class TaskProgram:
    """
    A validated program over the slot/class fact interface, grounded once.

    Query instances with an integer last argument are labelled by that
    argument. A program whose queries are all propositional is a binary task:
    label 1 when the query holds, 0 otherwise.
    """

    def __init__(self, program: Program, n_slots: int, n_classes: int,
                 cache: Optional[CircuitCache] = None):
        ensure_valid(program)
        check_interface(program, n_slots, n_classes)
        self.program = program
        self.n_slots = n_slots
        self.n_classes = n_classes
        self.ground = ground_query(program)
        self.family = (cache or CircuitCache()).family(self.ground)
        self.binary = all(q.arity == 0 for q in program.queries)
        if self.binary:
            self.labels = [0, 1]
            self.instances: Dict[int, GroundAtom] = {}
        else:
            self.instances = {}
            for q in self.ground.queries:
                if not q.args or not isinstance(q.args[-1], int):
                    raise InterfaceError(f"query instance '{q}' carries no integer label")
                self.instances[q.args[-1]] = q
            self.labels = sorted(self.instances)

    def probabilities(self, betas: np.ndarray, class_probs: np.ndarray) -> np.ndarray:
        """(B, L) matrix of p(label | heads), columns in `self.labels` order."""
        values = self.family.evaluate(head_params(betas, class_probs))
        batch = betas.shape[0]
        if self.binary:
            p = np.zeros(batch)
            for q in self.ground.queries:
                p = p + values[q]
            return np.stack([1.0 - p, p], axis=1)
        return np.stack([np.broadcast_to(values[self.instances[y]], (batch,))
                         for y in self.labels], axis=1)

    def task_gradient(self, betas: np.ndarray, class_probs: np.ndarray, labels: Sequence[int],
                      weight: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        −weight · Σ_b log p(y_b) with its gradients w.r.t. betas and class rows.

        Returns (per-example p(y_b), ∂/∂betas, ∂/∂class_probs).

        Raises:
            ConfigurationError: a label the program cannot produce
        """
        labels = np.asarray(labels)
        table = head_params(betas, class_probs)
        floor = config.probability_floor
        batch = betas.shape[0]
        seeds: Dict[GroundAtom, np.ndarray] = {}

        if self.binary:
            if not set(labels.tolist()) <= {0, 1}:
                raise ConfigurationError("binary task labels must be 0 or 1")
            values = self.family.evaluate(table)
            p_true = sum((values[q] for q in self.ground.queries), np.zeros(batch))
            p_y = np.where(labels == 1, p_true, 1.0 - p_true)
            sign = np.where(labels == 1, 1.0, -1.0)
            coeff = np.where(p_y > floor, -weight * sign / np.maximum(p_y, floor), 0.0)
            for q in self.ground.queries:
                seeds[q] = coeff
        else:
            unknown = set(labels.tolist()) - set(self.labels)
            if unknown:
                raise ConfigurationError(
                    f"labels {sorted(unknown)} are outside the grounded query family"
                )
            values = self.family.evaluate(table)
            p_y = np.zeros(batch)
            for y, q in self.instances.items():
                p_y = np.where(labels == y, values[q], p_y)
            coeff_all = np.where(p_y > floor, -weight / np.maximum(p_y, floor), 0.0)
            for y, q in self.instances.items():
                seeds[q] = np.where(labels == y, coeff_all, 0.0)

        _, grads = self.family.backprop(table, seeds)
        d_betas = np.zeros_like(betas)
        d_probs = np.zeros_like(class_probs)
        for i in range(self.n_slots):
            d_betas[:, i] = grads.get(f"object/{i + 1}", 0.0)
            for k in range(self.n_classes):
                d_probs[:, i, k] = grads.get(f"class/{i + 1}/{k}", 0.0)
        return p_y, d_betas, d_probs


def check_interface(program: Program, n_slots: int, n_classes: int):
    """
    The program's external keys must be exactly the keys the heads provide.

    Raises:
        InterfaceError: missing or unexpected keys
    """
    expected = {f"object/{i}" for i in range(1, n_slots + 1)}
    expected |= {f"class/{i}/{k}" for i in range(1, n_slots + 1) for k in range(n_classes)}
    keys = set(program.external_keys())
    if keys != expected:
        missing = sorted(expected - keys)[:5]
        extra = sorted(keys - expected)[:5]
        raise InterfaceError(
            f"program keys do not match {n_slots} slots x {n_classes} classes "
            f"(missing: {missing}, unexpected: {extra})"
        )


def task_program_for(cfg: TrainConfig, n_slots: int,
                     cache: Optional[CircuitCache] = None) -> TaskProgram:
    """The configured program at capacity `n_slots`; templates are re-rendered per capacity."""
    if cfg.program:
        program = load_program(cfg.program)
    else:
        program = parse_program(render_template(cfg.template, n_slots, cfg.model.n_classes))
    return TaskProgram(program, n_slots, cfg.model.n_classes, cache)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass
class LossValue:
    total: float
    task: float
    rec: float
    prior: float


def loss(batch: Sequence[Example], model: PerceptionModel, task: TaskProgram,
         lambda_task: float = 1.0, lambda_rec: float = 1.0, lambda_prior: float = 1.0
         ) -> LossValue:
    """
    Batch loss; leaves ∂loss/∂param in `.grad` of every model parameter.

    The reported task, rec and prior parts are unweighted sums over the batch.
    """
    with Tape() as tape:
        x = Tensor(stack(batch))
        out = model.forward(x)
        rec = reconstruction_loglik(x, out.decode)
        prior = prior_logp(out.latent)
        root = tn.scale(tn.sum(rec), -lambda_rec) + tn.scale(tn.sum(prior), -lambda_prior)

        labels = [ex.y for ex in batch]
        p_y, d_betas, d_probs = task.task_gradient(
            out.betas.data, out.class_probs.data, labels, lambda_task
        )
        tn.inject_external_gradient(out.betas, d_betas, tape)
        tn.inject_external_gradient(out.class_probs, d_probs, tape)
        tn.backward(tape, root)

    task_part = float(-np.sum(np.log(np.maximum(p_y, config.probability_floor))))
    rec_part = float(-np.sum(rec.data))
    prior_part = float(-np.sum(prior.data))
    total = lambda_task * task_part + lambda_rec * rec_part + lambda_prior * prior_part
    return LossValue(total, task_part, rec_part, prior_part)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    task_acc: float
    concept_acc: Optional[float] = None
    count_mae: Optional[float] = None
    balanced_acc: Optional[float] = None
    loss_task: Optional[float] = None
    loss_rec: Optional[float] = None
    loss_prior: Optional[float] = None
    epoch: Optional[int] = None
    n: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


def _heads(model: PerceptionModel, examples: Sequence[Example], batch_size: int = 256
           ) -> Tuple[np.ndarray, np.ndarray]:
    betas, probs = [], []
    for start in range(0, len(examples), batch_size):
        out = model.forward(Tensor(stack(examples[start:start + batch_size])))
        betas.append(out.betas.data)
        probs.append(out.class_probs.data)
    return np.concatenate(betas), np.concatenate(probs)


def predict(task: TaskProgram, betas: np.ndarray, class_probs: np.ndarray) -> np.ndarray:
    """argmax_y p(y | heads); ties go to the smallest label."""
    probs = task.probabilities(betas, class_probs)
    return np.asarray(task.labels)[np.argmax(probs, axis=1)]


def balanced_accuracy(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    """Mean recall over the labels present in `y_true`."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        return 0.0
    recalls = [np.mean(y_pred[y_true == y] == y) for y in np.unique(y_true)]
    return float(np.mean(recalls))


def concept_match(betas: np.ndarray, class_probs: np.ndarray, hidden) -> bool:
    """Exact slot-level match under the best slot-to-object assignment."""
    n_slots = betas.shape[0]
    present = betas > 0.5
    predicted = np.argmax(class_probs, axis=1)
    objects = list(hidden.classes)
    if len(objects) > n_slots:
        return False
    for perm in itertools.permutations(range(n_slots)):
        ok = True
        for j, slot in enumerate(perm):
            if j < len(objects):
                ok = present[slot] and predicted[slot] == objects[j]
            else:
                ok = not present[slot]
            if not ok:
                break
        if ok:
            return True
    return False


@timed_operation("eval_metrics")
def eval_metrics(model: PerceptionModel, examples: Sequence[Example], task: TaskProgram
                 ) -> Metrics:
    """Task, balanced and concept subset accuracy plus count MAE over `examples`."""
    if not examples:
        return Metrics(task_acc=0.0, n=0)
    betas, probs = _heads(model, examples)
    y_true = np.array([ex.y for ex in examples])
    y_pred = predict(task, betas, probs)

    concept_acc = count_mae = None
    if all(ex.hidden is not None for ex in examples):
        matches = [concept_match(betas[b], probs[b], ex.hidden) for b, ex in enumerate(examples)]
        concept_acc = float(np.mean(matches))
        counts = np.sum(betas > 0.5, axis=1)
        count_mae = float(np.mean(np.abs(counts - np.array([ex.hidden.count for ex in examples]))))

    return Metrics(
        task_acc=float(np.mean(y_pred == y_true)),
        concept_acc=concept_acc,
        count_mae=count_mae,
        balanced_acc=balanced_accuracy(y_true, y_pred),
        n=len(examples),
    )


def swap_program_eval(model: PerceptionModel, program: Program, examples: Sequence[Example],
                      cache: Optional[CircuitCache] = None) -> Metrics:
    """
    Score a frozen model under another program over the same fact interface.

    Raises:
        InterfaceError: the program's keys do not match the model's heads
    """
    task = TaskProgram(program, model.cfg.n_slots, model.cfg.n_classes, cache)
    return eval_metrics(model, examples, task)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: PerceptionModel
    history: List[Metrics]
    best_epoch: int


def make_datasets(cfg: TrainConfig) -> Dict[str, List[Example]]:
    return {
        "train": generate_dataset(cfg.scene, cfg.n_train, cfg.split, "train"),
        "val": generate_dataset(cfg.scene, cfg.n_val, cfg.split, "val"),
        "test": generate_dataset(cfg.scene, cfg.n_test, cfg.split, "test"),
    }


@timed_operation("train")
def train(cfg: TrainConfig, train_examples: Optional[Sequence[Example]] = None,
          val_examples: Optional[Sequence[Example]] = None,
          cache: Optional[CircuitCache] = None) -> TrainResult:
    """
    Optimise the perception model against task labels only.

    The returned model is the one with the best validation task accuracy
    (the initial model counts as epoch 0). Concept accuracy and count MAE
    enter the history when the validation examples carry hidden labels, but
    neither the updates nor the model selection read them.

    Raises:
        DivergenceError: a non-finite batch loss
    """
    log = get_logger()
    log.info("Resolved training configuration", config=cfg.to_dict(), engine=config.as_dict())
    cache = cache or CircuitCache()
    if train_examples is None:
        train_examples = generate_dataset(cfg.scene, cfg.n_train, cfg.split, "train")
    if val_examples is None:
        val_examples = generate_dataset(cfg.scene, cfg.n_val, cfg.split, "val")
    train_examples = list(train_examples)
    val_examples = list(val_examples)

    task = task_program_for(cfg, cfg.model.n_slots, cache)
    model = PerceptionModel.initialize(cfg.model, named_generator(cfg.seed, "init"))
    optimizer = tn.AdamW(model.params.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle = named_generator(cfg.seed, "shuffle")

    initial = replace(eval_metrics(model, val_examples, task), epoch=0)
    best_acc, best_params, best_epoch = initial.task_acc, model.params.copy(), 0
    history = [initial]

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        totals = np.zeros(3)
        order = shuffle.permutation(len(train_examples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_examples[i] for i in order[start:start + cfg.batch_size]]
            model.params.zero_grad()
            value = loss(batch, model, task, cfg.lambda_task, cfg.lambda_rec, cfg.lambda_prior)
            step += 1
            if not math.isfinite(value.total):
                log.divergence(step, value.total)
                raise DivergenceError(f"non-finite loss {value.total} at step {step}")
            optimizer.step()
            totals += (value.task, value.rec, value.prior)

        n = max(len(train_examples), 1)
        metrics = replace(eval_metrics(model, val_examples, task), loss_task=totals[0] / n,
                          loss_rec=totals[1] / n, loss_prior=totals[2] / n, epoch=epoch)
        val_acc = metrics.task_acc
        history.append(metrics)
        log.epoch_end(epoch, val_task_acc=val_acc, val_concept_acc=metrics.concept_acc,
                      val_count_mae=metrics.count_mae, loss_task=metrics.loss_task,
                      loss_rec=metrics.loss_rec, loss_prior=metrics.loss_prior)
        if val_acc > best_acc:
            best_acc, best_params, best_epoch = val_acc, model.params.copy(), epoch

    return TrainResult(PerceptionModel(cfg.model, best_params), history, best_epoch)
