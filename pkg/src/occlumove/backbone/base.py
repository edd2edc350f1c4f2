"""Uniform interface over a latent-diffusion backbone.

A backbone bundles the image codec, the text encoder and the noise
predictor with attention hooks and LoRA injection. Everything downstream
(inversion, both branches, the pipeline) talks to this surface only, so the
deterministic toy backbone and a pretrained checkpoint are interchangeable.
"""
from __future__ import annotations

import abc
import contextlib
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..attention import AttentionSnapshot, InjectionDirective
from ..errors import ContractError, ShapeError
from ..schedule import NoiseSchedule


@dataclass
class TextEmbedding:
    """Tokenized prompt with one embedding row per token.

    ``token_spans[i]`` is the half-open token range produced by the i-th
    prompt word; together the spans cover every token exactly once.
    """

    tokens: tuple[int, ...]
    words: tuple[str, ...]
    embedding: np.ndarray
    token_spans: tuple[tuple[int, int], ...]
    truncated: bool = False
    lost_words: tuple[str, ...] = ()

    def __post_init__(self):
        if self.embedding.shape[0] != len(self.tokens):
            raise ShapeError("embedding row count must equal token count")
        covered = []
        for lo, hi in self.token_spans:
            covered.extend(range(lo, hi))
        if covered != list(range(len(self.tokens))):
            raise ContractError("token spans must cover every token exactly once")

    def __len__(self) -> int:
        return len(self.tokens)

    def span_for(self, phrase: str) -> Optional[tuple[int, int]]:
        """Token range of the first occurrence of ``phrase`` (word sequence)."""
        want = [w.lower() for w in re.findall(r"\w+", phrase)]
        if not want:
            return None
        words = [w.lower() for w in self.words]
        for i in range(len(words) - len(want) + 1):
            if words[i:i + len(want)] == want:
                return self.token_spans[i][0], self.token_spans[i + len(want) - 1][1]
        return None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(" ".join(self.words).encode())
        h.update(np.ascontiguousarray(self.embedding).tobytes())
        return h.hexdigest()[:16]


@dataclass
class NoisePrediction:
    epsilon: np.ndarray
    snapshot: Optional[AttentionSnapshot] = None
    self_kv: Optional[dict[str, tuple[np.ndarray, np.ndarray]]] = None


@dataclass(frozen=True)
class HookSet:
    """Per-call hook state: what to capture and which directives to apply."""

    capture_maps: bool = False
    capture_kv: bool = False
    directives: tuple[InjectionDirective, ...] = ()


EMPTY_HOOKS = HookSet()


@dataclass
class LoRAAdapter:
    """Low-rank additive deltas for attention projections.

    ``deltas[target] = (down, up)`` with ``down @ up`` matching the target
    weight's shape; the effective weight is ``W + scale * down @ up``.
    Detaching (or scale 0) restores baseline predictions bit-exactly because
    base weights are never mutated.
    """

    rank: int
    scale: float
    target_layers: tuple[str, ...]
    deltas: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        for name, (down, up) in self.deltas.items():
            if down.shape[1] != self.rank or up.shape[0] != self.rank:
                raise ShapeError(f"delta pair for {name} does not match rank {self.rank}")

    def delta(self, target: str) -> Optional[np.ndarray]:
        pair = self.deltas.get(target)
        if pair is None:
            return None
        down, up = pair
        return self.scale * (down @ up)

    def is_zero(self) -> bool:
        return self.scale == 0.0 or all(
            not np.any(down @ up) for down, up in self.deltas.values()
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {"rank": np.int64(self.rank), "scale": np.float64(self.scale)}
        for i, target in enumerate(self.target_layers):
            payload[f"target_{i}"] = np.frombuffer(target.encode(), dtype=np.uint8)
            if target in self.deltas:
                down, up = self.deltas[target]
                payload[f"down_{i}"] = down
                payload[f"up_{i}"] = up
        np.savez(path, **payload)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "LoRAAdapter":
        data = np.load(path)
        rank = int(data["rank"])
        scale = float(data["scale"])
        targets, deltas = [], {}
        i = 0
        while f"target_{i}" in data:
            target = bytes(data[f"target_{i}"]).decode()
            targets.append(target)
            if f"down_{i}" in data:
                deltas[target] = (data[f"down_{i}"], data[f"up_{i}"])
            i += 1
        return cls(rank=rank, scale=scale, target_layers=tuple(targets), deltas=deltas)


class Codec:
    """Encode/decode view used by latent resizing; pixel_factor is the
    spatial ratio between pixel and latent grids."""

    pixel_factor: int = 8

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, latent: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class IdentityCodec(Codec):
    """Pixel space == latent space; used by tests and ablation oracles."""

    pixel_factor = 1

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        return pixels

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return latent


class _BackboneCodec(Codec):
    def __init__(self, backbone: "Backbone"):
        self._backbone = backbone
        self.pixel_factor = backbone.latent_downsample

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        return self._backbone.encode_image(pixels)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return self._backbone.decode_latent(latent)


class Backbone(abc.ABC):
    """Handle over one loaded diffusion backbone.

    Reentrant for read-only inference; hook state is per call. LoRA
    attach/detach is exclusive: no inference may run concurrently with it.
    """

    latent_channels: int = 4
    latent_downsample: int = 8
    native_side: int = 512
    text_token_limit: int = 77

    @property
    def native_latent_side(self) -> int:
        return self.native_side // self.latent_downsample

    @property
    def codec(self) -> Codec:
        return _BackboneCodec(self)

    @abc.abstractmethod
    def fingerprint(self) -> str: ...

    @abc.abstractmethod
    def make_schedule(self, steps: int) -> NoiseSchedule: ...

    @abc.abstractmethod
    def encode_image(self, image: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def decode_latent(self, z: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def embed_prompt(self, prompt: str) -> TextEmbedding: ...

    @abc.abstractmethod
    def predict_noise(self, z: np.ndarray, t: int,
                      cond: Optional[TextEmbedding] = None,
                      hooks: HookSet = EMPTY_HOOKS) -> NoisePrediction: ...

    @abc.abstractmethod
    def self_attention_layers(self) -> tuple[str, ...]: ...

    # --- LoRA surface -----------------------------------------------------

    supports_lora: bool = False

    def init_lora(self, rank: int, scale: float, seed: int,
                  targets: Optional[tuple[str, ...]] = None) -> LoRAAdapter:
        raise NotImplementedError("backbone does not support LoRA injection")

    def attach_lora(self, adapter: LoRAAdapter) -> None:
        raise NotImplementedError("backbone does not support LoRA injection")

    def detach_lora(self) -> None:
        raise NotImplementedError("backbone does not support LoRA injection")

    @contextlib.contextmanager
    def lora(self, adapter: Optional[LoRAAdapter]):
        if adapter is None:
            yield self
            return
        self.attach_lora(adapter)
        try:
            yield self
        finally:
            self.detach_lora()

    def masked_denoise_loss_grads(
        self, z_t: np.ndarray, t: int, cond: Optional[TextEmbedding],
        eps_target: np.ndarray, mask: np.ndarray, adapter: LoRAAdapter,
    ) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
        """Masked denoising loss and its gradients w.r.t. adapter deltas."""
        raise NotImplementedError("backbone does not support LoRA tuning")
