"""Edge-popup subnetworks over a frozen random backbone.

Every weight matrix carries a trainable score of the same shape. A
binarization strategy turns scores into a {0, 1} mask; the straight-through
primitive passes gradients to the scores as if binarization were absent.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .model import ModelConfig

COMPONENTS = ("enc", "gen", "dec")


@dataclass(frozen=True)
class Strategy:
    """``fast`` keeps positive scores; ``topk`` keeps the largest ``ratio`` per layer."""

    kind: str = "fast"
    ratio: float = 0.5

    def __post_init__(self):
        if self.kind not in ("fast", "topk"):
            raise ValueError(f"unknown binarization strategy {self.kind!r}")
        if self.kind == "topk" and not 0 < self.ratio <= 1:
            raise ValueError(f"top-k ratio must lie in (0, 1], got {self.ratio}")

    def __call__(self, scores: np.ndarray) -> np.ndarray:
        if self.kind == "fast":
            return binarize_fast(scores)
        return binarize_topk(scores, self.ratio)

    def label(self) -> str:
        return "fast" if self.kind == "fast" else f"topk-{self.ratio:g}"


def binarize_fast(scores: np.ndarray) -> np.ndarray:
    return np.asarray(scores) > 0


def binarize_topk(scores: np.ndarray, ratio: float) -> np.ndarray:
    """Exactly ``ceil(ratio * n)`` ones at the largest scores; ties go to the lowest flat index."""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    scores = np.asarray(scores)
    flat = scores.ravel()
    k = math.ceil(ratio * flat.size)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(scores.shape)


@dataclass
class Backbone:
    """Frozen signed-constant weights, regenerable from ``(config, seed)``."""

    config: ModelConfig
    seed: int
    weights: dict[str, np.ndarray]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(self.weights[name].tobytes())
        return h.hexdigest()


def init_backbone(config: ModelConfig, seed: int) -> tuple[Backbone, dict[str, np.ndarray]]:
    """Signed-constant Kaiming weights plus a fresh score set."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, (fan_in, fan_out) in config.shapes().items():
        std = math.sqrt(2.0 / fan_in)
        w = np.where(rng.random((fan_in, fan_out)) < 0.5, -std, std)
        w.flags.writeable = False
        weights[name] = w
    backbone = Backbone(config, seed, weights)
    return backbone, init_scores(config, rng)


def init_scores(config: ModelConfig, rng: np.random.Generator | int) -> dict[str, np.ndarray]:
    """Kaiming-uniform scores, bound ``1/sqrt(fan_in)``."""
    rng = np.random.default_rng(rng)
    scores = {}
    for name, (fan_in, fan_out) in config.shapes().items():
        bound = 1.0 / math.sqrt(fan_in)
        scores[name] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return scores


def masked_forward(x, weight: np.ndarray, scores, strategy: Strategy) -> ad.Node:
    """``x @ (weight * h(scores))`` with straight-through gradients into ``scores``."""
    mask = ad.straight_through(scores, strategy)
    return ad.matmul(x, ad.mul(ad.const(weight), mask))


def apply_dropout(activations, rate: float, rng: np.random.Generator | None, training: bool) -> ad.Node:
    return ad.dropout(activations, rate, rng, training)


# ---------------------------------------------------------------------------
# masks


@dataclass
class MaskTriple:
    """Binary masks for the encoder, generator and decoder weights."""

    encoder: dict[str, np.ndarray]
    generator: dict[str, np.ndarray]
    decoder: dict[str, np.ndarray]

    @classmethod
    def from_flat(cls, masks: dict[str, np.ndarray]) -> "MaskTriple":
        parts: dict[str, dict[str, np.ndarray]] = {c: {} for c in COMPONENTS}
        for name, m in masks.items():
            parts[name.split(".", 1)[0]][name] = np.asarray(m, dtype=bool)
        return cls(parts["enc"], parts["gen"], parts["dec"])

    @classmethod
    def from_scores(cls, scores: dict[str, np.ndarray], strategy: Strategy) -> "MaskTriple":
        return cls.from_flat({name: strategy(s) for name, s in scores.items()})

    @classmethod
    def full(cls, config: ModelConfig, value: bool) -> "MaskTriple":
        return cls.from_flat(
            {name: np.full(shape, value) for name, shape in config.shapes().items()}
        )

    def flat(self) -> dict[str, np.ndarray]:
        return {**self.encoder, **self.generator, **self.decoder}

    def density(self) -> float:
        masks = list(self.flat().values())
        return float(sum(m.sum() for m in masks) / sum(m.size for m in masks))

    def frozen(self) -> "MaskTriple":
        out = copy.deepcopy(self)
        for m in out.flat().values():
            m.flags.writeable = False
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskTriple):
            return NotImplemented
        a, b = self.flat(), other.flat()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@dataclass
class MaskPool:
    """Append-only ``(system index, masks)`` entries; stored masks are read-only copies."""

    entries: list[tuple[int, MaskTriple]] = field(default_factory=list)

    def append(self, system: int, masks: MaskTriple) -> None:
        self.entries.append((system, masks.frozen()))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[int, MaskTriple]]:
        return iter(self.entries)

    def __getitem__(self, i: int) -> tuple[int, MaskTriple]:
        return self.entries[i]

    def masks_for(self, system: int) -> MaskTriple:
        for idx, masks in self.entries:
            if idx == system:
                return masks
        raise KeyError(f"no mask stored for system {system}")


# ---------------------------------------------------------------------------
# effective weights handed to the model


def weights_from_scores(
    backbone: Backbone, score_nodes: dict[str, ad.Node], strategy: Strategy
) -> dict[str, ad.Node]:
    """Trainable view: ``w * h(s)`` with straight-through gradients."""
    return {
        name: ad.mul(ad.const(w), ad.straight_through(score_nodes[name], strategy))
        for name, w in backbone.weights.items()
    }


def weights_from_masks(backbone: Backbone, masks: MaskTriple | dict[str, np.ndarray]) -> dict[str, ad.Node]:
    """Frozen view for evaluation. Masks may also be continuous (relaxed) values."""
    flat = masks.flat() if isinstance(masks, MaskTriple) else masks
    return {name: ad.const(w * flat[name]) for name, w in backbone.weights.items()}
