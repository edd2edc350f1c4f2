"""Embedding backends behind a uniform handle.

The deterministic stub keeps CI fully offline; DINOv2 / CLIP wrappers load
lazily and are only exercised when their model weights are installed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..errors import ConfigError

IMAGE_KIND = "image-embedder"
IMAGE_TEXT_KIND = "image-text-embedder"


@dataclass
class StubEmbedder:
    """Seeded projection of downsampled image statistics; deterministic."""

    dim: int = 64
    seed: int = 0
    kind: str = IMAGE_TEXT_KIND
    _patch: int = 16

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self._proj = rng.standard_normal((3 * self._patch * self._patch, self.dim))
        self._proj /= np.sqrt(self._proj.shape[0])

    @property
    def fingerprint(self) -> str:
        return f"stub-{self.kind}-d{self.dim}-s{self.seed}"

    def embed_images(self, images: list[np.ndarray]) -> np.ndarray:
        rows = []
        for img in images:
            chw = np.ascontiguousarray(np.asarray(img, dtype=np.float64).transpose(2, 0, 1))
            small = kernels.bilinear_resize(chw, self._patch, self._patch)
            rows.append(small.reshape(-1) @ self._proj)
        return np.stack(rows)

    def embed_texts(self, texts: list[str]) -> np.ndarray:
        rows = []
        for text in texts:
            words = [w for w in text.lower().split() if w]
            if not words:
                rows.append(np.zeros(self.dim))
                continue
            vecs = []
            for w in words:
                h = int.from_bytes(hashlib.blake2b(w.encode(), digest_size=8).digest(),
                                   "little")
                vecs.append(np.random.default_rng(h).standard_normal(self.dim))
            rows.append(np.mean(vecs, axis=0))
        return np.stack(rows)


class ConstantEmbedder:
    """Test double: every input maps to a fixed vector."""

    def __init__(self, vector: np.ndarray, kind: str = IMAGE_TEXT_KIND):
        self.vector = np.asarray(vector, dtype=np.float64)
        self.dim = len(self.vector)
        self.kind = kind

    @property
    def fingerprint(self) -> str:
        return "constant-" + hashlib.sha256(self.vector.tobytes()).hexdigest()[:8]

    def embed_images(self, images):
        return np.stack([self.vector] * len(images))

    def embed_texts(self, texts):
        return np.stack([self.vector] * len(texts))


def make_embedder(kind: str, seed: int = 0, dim: int = 64):
    if kind == "stub":
        return StubEmbedder(dim=dim, seed=seed)
    if kind == "clip":
        return _TransformersClipEmbedder()
    if kind == "dinov2":
        return _DinoV2Embedder()
    raise ConfigError(f"unknown embedder kind {kind!r}")


class _TransformersClipEmbedder:  # pragma: no cover - needs model weights
    kind = IMAGE_TEXT_KIND

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self.model = CLIPModel.from_pretrained(model_name).eval()
        self.processor = CLIPProcessor.from_pretrained(model_name)
        self.model_name = model_name
        self.dim = self.model.config.projection_dim

    @property
    def fingerprint(self) -> str:
        return f"clip-{self.model_name}"

    def embed_images(self, images):
        from PIL import Image

        pils = [Image.fromarray((np.clip(i, 0, 1) * 255).astype(np.uint8)) for i in images]
        inputs = self.processor(images=pils, return_tensors="pt")
        with self._torch.no_grad():
            feats = self.model.get_image_features(**inputs)
        return feats.cpu().numpy().astype(np.float64)

    def embed_texts(self, texts):
        inputs = self.processor(text=texts, return_tensors="pt", padding=True)
        with self._torch.no_grad():
            feats = self.model.get_text_features(**inputs)
        return feats.cpu().numpy().astype(np.float64)


class _DinoV2Embedder:  # pragma: no cover - needs model weights
    kind = IMAGE_KIND

    def __init__(self, model_name: str = "facebook/dinov2-base"):
        import torch
        from transformers import AutoImageProcessor, AutoModel

        self._torch = torch
        self.model = AutoModel.from_pretrained(model_name).eval()
        self.processor = AutoImageProcessor.from_pretrained(model_name)
        self.model_name = model_name
        self.dim = self.model.config.hidden_size

    @property
    def fingerprint(self) -> str:
        return f"dinov2-{self.model_name}"

    def embed_images(self, images):
        from PIL import Image

        pils = [Image.fromarray((np.clip(i, 0, 1) * 255).astype(np.uint8)) for i in images]
        inputs = self.processor(images=pils, return_tensors="pt")
        with self._torch.no_grad():
            out = self.model(**inputs)
        return out.pooler_output.cpu().numpy().astype(np.float64)
