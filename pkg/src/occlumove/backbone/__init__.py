"""Backbone adapters: the deterministic toy and the pretrained checkpoint shim."""
from __future__ import annotations

from typing import Optional

from ..errors import ConfigError
from .base import (
    EMPTY_HOOKS,
    Backbone,
    Codec,
    HookSet,
    IdentityCodec,
    LoRAAdapter,
    NoisePrediction,
    TextEmbedding,
)
from .toy import ToyBackbone, make_toy_backbone


def make_backbone(kind: str = "toy", seed: int = 0,
                  checkpoint: Optional[str] = None) -> Backbone:
    if kind == "toy":
        return ToyBackbone(seed=seed)
    if kind == "pretrained":
        if checkpoint is None:
            raise ConfigError("pretrained backbone needs a checkpoint path")
        from .pretrained import PretrainedBackbone

        return PretrainedBackbone(checkpoint, seed=seed)
    raise ConfigError(f"unknown backbone kind {kind!r} (expected 'toy' or 'pretrained')")


__all__ = [
    "Backbone",
    "Codec",
    "EMPTY_HOOKS",
    "HookSet",
    "IdentityCodec",
    "LoRAAdapter",
    "NoisePrediction",
    "TextEmbedding",
    "ToyBackbone",
    "make_backbone",
    "make_toy_backbone",
]
