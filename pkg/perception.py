#!/usr/bin/env python3
"""
Token-scale perception model.

Scenes are T feature tokens of width D. An amortised per-token encoder maps
them to latents z, slot attention binds the latents to N slots, and three
heads read the slots: objectness β (Bernoulli per slot), a class
distribution over K values fed with β·s, and a Gaussian-mixture decoder over
tokens fed with the same gated slots.

Every operation takes a leading batch axis: x is (B, T, D), slots (B, N, d_s),
betas (B, N), class probabilities (B, N, K).
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, NamedTuple, Optional

import numpy as np

import tensor as tn
from errors import ConfigurationError, ShapeError
from tensor import Tensor

CHECKPOINT_HEADER = "# slotlog-checkpoint v1"
ATTENTION_EPS = 1e-8


@dataclass(frozen=True)
class PerceptionConfig:
    tokens: int = 12
    token_dim: int = 16
    latent_dim: int = 32
    slot_dim: int = 32
    hidden_dim: int = 64
    n_classes: int = 5
    n_slots: int = 3
    iterations: int = 2
    tile_jitter: float = 0.05
    # initial value of the objectness readout bias; negative starts slots switched off
    objectness_bias: float = 0.0
    background_component: bool = False

    @classmethod
    def from_dict(cls, data: Dict) -> "PerceptionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model settings: {', '.join(sorted(unknown))}")
        cfg = cls(**data)
        for f in fields(cls):
            if f.type is int and getattr(cfg, f.name) <= 0:
                raise ConfigurationError(f"model setting '{f.name}' must be positive")
        if cfg.tile_jitter < 0:
            raise ConfigurationError("model setting 'tile_jitter' must not be negative")
        return cfg


def _shapes(cfg: PerceptionConfig) -> Dict[str, Dict[str, tuple]]:
    D, H, T = cfg.token_dim, cfg.hidden_dim, cfg.tokens
    dz, ds, K, N = cfg.latent_dim, cfg.slot_dim, cfg.n_classes, cfg.n_slots
    return {
        "encoder": {"enc_w1": (D, H), "enc_b1": (H,), "enc_w2": (H, dz), "enc_b2": (dz,)},
        "slots": {
            "slot_init": (N, ds), "attn_q": (ds, ds), "attn_k": (dz, ds), "attn_v": (dz, ds),
            "slot_w1": (ds, H), "slot_b1": (H,), "slot_w2": (H, ds), "slot_b2": (ds,),
        },
        "objectness": {"obj_w1": (ds, H), "obj_b1": (H,), "obj_w2": (H, 1), "obj_b2": (1,)},
        "classifier": {"cls_w1": (ds, H), "cls_b1": (H,), "cls_w2": (H, K), "cls_b2": (K,)},
        "decoder_x": {
            "dx_in": (ds, H), "dx_in_b": (H,), "dx_pos": (T, H), "dx_out": (H, D), "dx_out_b": (D,),
        },
        "decoder_w": {
            "dw_in": (ds, H), "dw_in_b": (H,), "dw_pos": (T, H), "dw_out": (H, 1), "dw_out_b": (1,),
        },
    }


class ModelParams:
    """Named parameter tensors grouped by the network part they belong to."""

    def __init__(self, tensors: Dict[str, Tensor], groups: Dict[str, List[str]]):
        self.tensors = tensors
        self.groups = groups

    @classmethod
    def initialize(cls, cfg: PerceptionConfig, rng: np.random.Generator) -> "ModelParams":
        """Scaled normal weights (1/sqrt(fan_in)), zero biases, unit-normal slot inits."""
        tensors: Dict[str, Tensor] = {}
        groups: Dict[str, List[str]] = {}
        for group, shapes in _shapes(cfg).items():
            groups[group] = list(shapes)
            for name, shape in shapes.items():
                if len(shape) == 1:
                    data = np.zeros(shape)
                elif name == "slot_init" or name.endswith("_pos"):
                    data = rng.standard_normal(shape)
                else:
                    data = rng.standard_normal(shape) / math.sqrt(shape[0])
                tensors[name] = Tensor(data, name=name)
        tensors["obj_b2"].data[:] = cfg.objectness_bias
        return cls(tensors, groups)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> List[Tensor]:
        return [self.tensors[name] for names in self.groups.values() for name in names]

    def group(self, group: str) -> List[Tensor]:
        return [self.tensors[name] for name in self.groups[group]]

    def copy(self) -> "ModelParams":
        return ModelParams(
            {name: Tensor(t.data.copy(), name=name) for name, t in self.tensors.items()},
            {g: list(names) for g, names in self.groups.items()},
        )

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()


class MixtureDecode(NamedTuple):
    means: Tensor       # (B, N, T, D), N + 1 components with a background
    mix_logits: Tensor  # (B, N, T)


class Forward(NamedTuple):
    latent: Tensor
    slots: Tensor
    betas: Tensor
    class_probs: Tensor
    decode: MixtureDecode


def _mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return tn.relu(x @ w1 + b1) @ w2 + b2


class PerceptionModel:
    def __init__(self, cfg: PerceptionConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialize(cls, cfg: PerceptionConfig, rng: np.random.Generator) -> "PerceptionModel":
        return cls(cfg, ModelParams.initialize(cfg, rng))

    def _check_tokens(self, x: Tensor):
        expected = (self.cfg.tokens, self.cfg.token_dim)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise ShapeError(f"expected scene tokens of shape (B, {expected[0]}, {expected[1]}), "
                             f"got {x.shape}")

    def encode(self, x: Tensor) -> Tensor:
        """Two-layer MLP applied to every token: (B, T, D) -> (B, T, d_z)."""
        self._check_tokens(x)
        p = self.params
        return _mlp(x, p["enc_w1"], p["enc_b1"], p["enc_w2"], p["enc_b2"])

    def slot_attention(self, latent: Tensor, iterations: Optional[int] = None) -> Tensor:
        """
        Bind latent tokens to N slots.

        Each iteration lets every token distribute one unit of attention over
        the slots (softmax across slots), takes the attention-weighted mean of
        the values per slot, adds it to the slot and applies a residual MLP.
        """
        iterations = self.cfg.iterations if iterations is None else iterations
        if iterations < 1:
            raise ConfigurationError("slot attention needs at least one iteration")
        p = self.params
        batch = latent.shape[0]
        slots = tn.repeat(p["slot_init"], batch, axis=0)
        keys = latent @ p["attn_k"]
        values = latent @ p["attn_v"]
        scale = 1.0 / math.sqrt(self.cfg.slot_dim)
        for _ in range(iterations):
            logits = tn.scale(tn.matmul(slots @ p["attn_q"], tn.swap_last(keys)), scale)
            attn = tn.softmax(logits, axis=1) + tn.constant(ATTENTION_EPS)
            attn = attn / tn.sum(attn, axis=2, keepdims=True)
            slots = slots + tn.matmul(attn, values)
            slots = slots + _mlp(slots, p["slot_w1"], p["slot_b1"], p["slot_w2"], p["slot_b2"])
        return slots

    def objectness_head(self, slots: Tensor) -> Tensor:
        p = self.params
        logits = _mlp(slots, p["obj_w1"], p["obj_b1"], p["obj_w2"], p["obj_b2"])
        return tn.reshape(tn.sigmoid(logits), slots.shape[:2])

    def _gate(self, slots: Tensor, betas: Tensor) -> Tensor:
        return slots * tn.reshape(betas, betas.shape + (1,))

    def class_head(self, slots: Tensor, betas: Tensor) -> Tensor:
        """Class distribution per slot from β·s; (B, N, K) rows on the simplex."""
        p = self.params
        logits = _mlp(self._gate(slots, betas), p["cls_w1"], p["cls_b1"], p["cls_w2"], p["cls_b2"])
        return tn.softmax(logits, axis=-1)

    def _decode_branch(self, gated: Tensor, prefix: str) -> Tensor:
        p = self.params
        hidden = gated @ p[f"{prefix}_in"] + p[f"{prefix}_in_b"]
        hidden = tn.repeat(hidden, self.cfg.tokens, axis=2) + p[f"{prefix}_pos"]
        return tn.relu(hidden) @ p[f"{prefix}_out"] + p[f"{prefix}_out_b"]

    def decode(self, slots: Tensor, betas: Tensor) -> MixtureDecode:
        """
        Per-slot Gaussian components over every token position.

        With `background_component` on, each slot's mixture weight is scaled by
        its β and one extra component, decoded from the zero vector, is appended
        at index N. Switched-off slots then hand their tokens to the background
        instead of sharing them, and a switched-on empty slot dilutes the weight
        of the slots that explain real objects.
        """
        gated = self._gate(slots, betas)
        means = self._decode_branch(gated, "dx")
        logits = self._decode_branch(gated, "dw")
        logits = tn.reshape(logits, logits.shape[:3])
        if not self.cfg.background_component:
            return MixtureDecode(means, logits)

        batch = slots.shape[0]
        blank = tn.constant(np.zeros((batch, 1, self.cfg.slot_dim)))
        bg_means = self._decode_branch(blank, "dx")
        bg_logits = self._decode_branch(blank, "dw")
        log_betas = tn.log(tn.reshape(betas, betas.shape + (1,)) + ATTENTION_EPS)
        return MixtureDecode(
            tn.concat([means, bg_means], axis=1),
            tn.concat([logits + log_betas, tn.reshape(bg_logits, (batch, 1, self.cfg.tokens))], axis=1),
        )

    def forward(self, x: Tensor) -> Forward:
        latent = self.encode(x)
        slots = self.slot_attention(latent)
        betas = self.objectness_head(slots)
        class_probs = self.class_head(slots, betas)
        return Forward(latent, slots, betas, class_probs, self.decode(slots, betas))

    def with_capacity(self, n_slots: int, seed: int = 0) -> "PerceptionModel":
        """
        Same weights at a different slot capacity.

        Slot-init rows are tiled; every copy beyond the first N rows gets a
        seeded jitter of scale `tile_jitter`, since identical slot inits stay
        identical through every attention iteration.
        """
        params = self.params.copy()
        init = params["slot_init"].data
        rows = [init[i % init.shape[0]] for i in range(n_slots)]
        tiled = np.array(rows)
        if n_slots > init.shape[0]:
            rng = np.random.default_rng(seed)
            extra = n_slots - init.shape[0]
            jitter = rng.standard_normal((extra, init.shape[1])) * self.cfg.tile_jitter
            tiled[init.shape[0]:] += jitter
        params.tensors["slot_init"] = Tensor(tiled, name="slot_init")
        cfg = PerceptionConfig(**{**asdict(self.cfg), "n_slots": n_slots})
        return PerceptionModel(cfg, params)


def reconstruction_loglik(x: Tensor, decode: MixtureDecode) -> Tensor:
    """
    log p(x | slots) per scene, shape (B,).

    Σ_t log Σ_i softmax_i(w)[i, t] · N(x_t; μ_{i,t}, I), Gaussian constants kept.
    """
    n_slots = decode.means.shape[1]
    dim = x.shape[-1]
    log_weights = tn.log_softmax(decode.mix_logits, axis=1)
    residual = tn.repeat(x, n_slots, axis=1) - decode.means
    sq = tn.sum(residual * residual, axis=-1)
    log_density = tn.scale(sq, -0.5) + tn.constant(-0.5 * dim * math.log(2.0 * math.pi))
    per_token = tn.logsumexp(log_weights + log_density, axis=1)
    return tn.sum(per_token, axis=-1)


def prior_logp(latent: Tensor) -> Tensor:
    """−½ Σ z² per scene over the last two axes; the normalising constant is dropped."""
    return tn.scale(tn.sum(tn.sum(latent * latent, axis=-1), axis=-1), -0.5)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: PerceptionModel, path: str):
    """Write every named tensor as a header line plus one line of row-major values."""
    dims = " ".join(f"{k}={v}" for k, v in asdict(model.cfg).items())
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{CHECKPOINT_HEADER}\n# dims {dims}\n")
        for group, names in model.params.groups.items():
            for name in names:
                data = model.params[name].data
                shape = " ".join(str(s) for s in data.shape)
                f.write(f"tensor {group} {name} {shape}\n")
                f.write(" ".join(repr(float(v)) for v in data.reshape(-1)) + "\n")


def load_checkpoint(path: str) -> PerceptionModel:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise ConfigurationError(f"{path} is not a slotlog checkpoint")
    if len(lines) < 2 or not lines[1].startswith("# dims "):
        raise ConfigurationError(f"{path} has no dimension record")

    kinds = {f.name: f.type for f in fields(PerceptionConfig)}
    dims = {}
    for item in lines[1][len("# dims "):].split():
        key, value = item.split("=", 1)
        kind = kinds.get(key, int)
        dims[key] = value == "True" if kind is bool else kind(value)
    cfg = PerceptionConfig.from_dict(dims)

    tensors: Dict[str, Tensor] = {}
    groups: Dict[str, List[str]] = {}
    body = lines[2:]
    for header, values in zip(body[0::2], body[1::2]):
        _, group, name, *shape = header.split()
        shape = tuple(int(s) for s in shape)
        data = np.array([float(v) for v in values.split()], dtype=np.float64)
        if data.size != math.prod(shape):
            raise ConfigurationError(f"tensor {name} in {path} has {data.size} values for {shape}")
        tensors[name] = Tensor(data.reshape(shape), name=name)
        groups.setdefault(group, []).append(name)

    expected = _shapes(cfg)
    for group, shapes in expected.items():
        for name, shape in shapes.items():
            if name not in tensors or tensors[name].shape != shape:
                raise ConfigurationError(f"checkpoint {path} lacks tensor {name} of shape {shape}")
    return PerceptionModel(cfg, ModelParams(tensors, groups))
