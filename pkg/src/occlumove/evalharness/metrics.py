"""Evaluation metrics: KID, CLIP-T and the crop-similarity family.

KID uses the fully unbiased same-size MMD^2 estimator (diagonal excluded in
the cross term as well), so identical sets score exactly zero; inputs are
canonically ordered by content hash before block pairing, making the score
symmetric bit-for-bit.
"""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError

log = logging.getLogger(__name__)

KID_BLOCK_SIZE = 50
KID_KERNEL_DEGREE = 3


def composite_on_white(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Object pixels kept, everything else white (fair-comparison convention)."""
    m = mask.astype(bool)[:, :, None]
    return np.where(m, image, 1.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = KID_KERNEL_DEGREE
                      ) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** degree


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased MMD^2; the cross term skips exactly-equal vector pairs.

    Treating coincident samples as the "same draw" keeps the estimator a
    pure function of the two sets (no row pairing), makes identical sets
    score exactly zero, and reduces to the all-pairs estimator on disjoint
    data.
    """
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ContractError("need at least 2 samples per set")
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    distinct = ~np.all(x[:, None, :] == y[None, :, :], axis=2)
    n_cross = int(distinct.sum())
    if n_cross == 0:
        raise ContractError("cross term empty: the sets share every sample")
    xx = kxx[~np.eye(m, dtype=bool)].sum() / (m * (m - 1))
    yy = kyy[~np.eye(n, dtype=bool)].sum() / (n * (n - 1))
    xy = kxy[distinct].sum() / n_cross
    return float(xx + yy - 2.0 * xy)


def _canonical_rows(emb: np.ndarray) -> np.ndarray:
    order = np.lexsort(emb.T[::-1])
    return emb[order]


def kid(set_a: list[np.ndarray], set_b: list[np.ndarray], embedder,
        block_size: int = KID_BLOCK_SIZE) -> float:
    """Block-averaged unbiased MMD^2 between image-set embeddings."""
    if not set_a or not set_b:
        raise ContractError("KID needs two non-empty sets")
    ea = embedder.embed_images(set_a)
    eb = embedder.embed_images(set_b)
    return kid_from_embeddings(ea, eb, block_size=block_size)


def kid_from_embeddings(ea: np.ndarray, eb: np.ndarray,
                        block_size: int = KID_BLOCK_SIZE) -> float:
    # canonical argument order and canonical row order: the score is a pure
    # function of the two sets, bit-for-bit symmetric and reorder-invariant
    ea = _canonical_rows(np.asarray(ea, dtype=np.float64))
    eb = _canonical_rows(np.asarray(eb, dtype=np.float64))
    fa = hashlib.sha256(np.ascontiguousarray(ea).tobytes()).hexdigest()
    fb = hashlib.sha256(np.ascontiguousarray(eb).tobytes()).hexdigest()
    if fb < fa:
        ea, eb = eb, ea
    b = min(block_size, ea.shape[0], eb.shape[0])
    if b < 2:
        raise ContractError("KID needs at least 2 samples per set")
    if b < block_size:
        warnings.warn(
            f"sets smaller than the KID block size; single-block fallback with b={b}")
    n_blocks = max(min(ea.shape[0], eb.shape[0]) // b, 1)
    scores = []
    for k in range(n_blocks):
        scores.append(mmd2_unbiased(ea[k * b:(k + 1) * b], eb[k * b:(k + 1) * b]))
    return float(np.mean(scores))


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def clip_t(images: list[np.ndarray], prompts: list[str], embedder) -> float:
    """Mean image/text cosine similarity, reported x100."""
    if len(images) != len(prompts):
        raise ContractError("images and prompts must pair up")
    ei = embedder.embed_images(images)
    et = embedder.embed_texts(prompts)
    sims = [cosine(a, b) for a, b in zip(ei, et)]
    return float(np.mean(sims) * 100.0)


Box = tuple[int, int, int]  # (row0, col0, side)


def crop_box(image: np.ndarray, box: Box) -> np.ndarray:
    r0, c0, side = box
    h, w = image.shape[:2]
    if side <= 0 or r0 < 0 or c0 < 0 or r0 + side > h or c0 + side > w:
        raise ContractError(f"degenerate or out-of-bounds box {box} for {h}x{w}")
    return image[r0:r0 + side, c0:c0 + side]


def _crop_cosine(img_a, box_a, img_b, box_b, embedder) -> float:
    ea, eb = embedder.embed_images([crop_box(img_a, box_a), crop_box(img_b, box_b)])
    return cosine(ea, eb)


def dino_op(source: np.ndarray, edited: np.ndarray, original_box: Box, embedder) -> float:
    """Original-position residual: high means the object never moved."""
    return _crop_cosine(source, original_box, edited, original_box, embedder)


def dino_tp(source: np.ndarray, edited: np.ndarray, original_box: Box,
            target_box: Box, embedder) -> float:
    """Relocation fidelity: source object crop vs edited target crop."""
    return _crop_cosine(source, original_box, edited, target_box, embedder)


def clip_tp(source: np.ndarray, edited: np.ndarray, original_box: Box,
            target_box: Box, embedder) -> float:
    """Same crops through the image-text embedder's image tower."""
    return _crop_cosine(source, original_box, edited, target_box, embedder)


@dataclass
class MetricReport:
    """Per-sample metric values plus aggregates and config fingerprints."""

    embedder_fingerprints: dict[str, str]
    config_fingerprint: str
    per_sample: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def add(self, sample_id: str, values: dict) -> None:
        self.per_sample.append({"sample_id": sample_id, **values})

    def aggregates(self) -> dict:
        keys = sorted({k for row in self.per_sample for k in row if k != "sample_id"})
        out = {}
        for k in keys:
            vals = [row[k] for row in self.per_sample if k in row]
            out[k] = float(np.mean(vals)) if vals else float("nan")
        out.update(self.extra)
        return out

    def comparable_with(self, other: "MetricReport") -> bool:
        return self.embedder_fingerprints == other.embedder_fingerprints

    def to_dict(self) -> dict:
        return {
            "embedders": self.embedder_fingerprints,
            "config_fingerprint": self.config_fingerprint,
            "aggregates": self.aggregates(),
            "per_sample": self.per_sample,
        }

    def write(self, out_dir) -> None:
        import csv
        import json
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        keys = sorted({k for row in self.per_sample for k in row})
        with open(out / "report.csv", "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=keys)
            wr.writeheader()
            wr.writerows(self.per_sample)
