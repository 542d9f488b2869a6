"""Model checkpoints: backbone identity, score tensors and the mask pool.

Backbone weights are not stored; they are regenerated from the recorded
seed and model config, and verified against the recorded checksum.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .model import ModelConfig
from .subnet import Backbone, MaskPool, MaskTriple, init_backbone

CHECKPOINT_VERSION = 1


def model_hash(config: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()[:16]


@dataclass
class Checkpoint:
    backbone: Backbone
    scores: dict[str, np.ndarray]
    pool: MaskPool
    info: dict  # free-form run description (method, systems, ...)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.backbone.config == other.backbone.config
            and self.backbone.seed == other.backbone.seed
            and self.scores.keys() == other.scores.keys()
            and all(np.array_equal(self.scores[k], other.scores[k]) for k in self.scores)
            and [i for i, _ in self.pool] == [i for i, _ in other.pool]
            and all(a == b for (_, a), (_, b) in zip(self.pool, other.pool))
            and self.info == other.info
        )


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, s in ckpt.scores.items():
        arrays[f"scores/{name}"] = s
    for k, (_, masks) in enumerate(ckpt.pool):
        for name, m in masks.flat().items():
            arrays[f"pool/{k}/{name}"] = m
    meta = {
        "content": "checkpoint",
        "model": ckpt.backbone.config.to_dict(),
        "model_hash": model_hash(ckpt.backbone.config),
        "backbone_seed": ckpt.backbone.seed,
        "backbone_checksum": ckpt.backbone.checksum(),
        "pool_systems": [i for i, _ in ckpt.pool],
        "info": ckpt.info,
    }
    container.write(path, CHECKPOINT_VERSION, meta, arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    meta, arrays = container.read(path, CHECKPOINT_VERSION)
    if meta.get("content") != "checkpoint":
        raise container.ContainerFormatError(f"{path} does not hold a checkpoint")
    config = ModelConfig(**meta["model"])
    if model_hash(config) != meta["model_hash"]:
        raise container.ContainerFormatError("model config does not match its recorded hash")
    backbone, _ = init_backbone(config, meta["backbone_seed"])
    if backbone.checksum() != meta["backbone_checksum"]:
        raise container.ContainerFormatError(
            "regenerated backbone does not match the recorded checksum"
        )
    scores = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("scores/")}
    pool = MaskPool()
    for k, system in enumerate(meta["pool_systems"]):
        prefix = f"pool/{k}/"
        pool.append(system, MaskTriple.from_flat(
            {name[len(prefix):]: v for name, v in arrays.items() if name.startswith(prefix)}
        ))
    return Checkpoint(backbone, scores, pool, meta["info"])
