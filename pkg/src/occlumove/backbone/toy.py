"""Deterministic toy backbone for full-pipeline runs without pretrained weights.

The codec is an 8x8 block-mean encoder with nearest-neighbor decode (exactly
invertible on block-constant images). The noise predictor is a seeded smooth
field plus a small genuine attention stack (two self+cross attention layers
over a 32x32 feature grid), so hook capture, restriction, key/value
replacement and LoRA all exercise real attention math at toy scale.

The gain constants below are tuned together: the attention path must be
z-sensitive enough that guidance toggles change decoded outputs, yet weak
enough that DDIM invert-then-sample round trips stay inside the acceptance
tolerances (1e-4 at T=2, 1e-3 at T=10).
"""
from __future__ import annotations

import hashlib
import re
import warnings
from typing import Optional

import numpy as np

from .. import kernels
from ..attention import (
    REPLACE_KV,
    RESTRICT_SELF,
    AttentionSnapshot,
    background_query_masks,
    restriction_masks,
)
from ..errors import ConfigError, ContractError, DimensionError, ShapeError
from ..schedule import NoiseSchedule, ladder_indices
from ..seeding import derive_seed, rng_for
from .base import EMPTY_HOOKS, Backbone, HookSet, LoRAAdapter, NoisePrediction, TextEmbedding

FIELD_GAIN = 0.3      # magnitude of the z-independent seeded field
ATTN_GAIN = 1e-3      # magnitude of the attention contribution
PROJ_SCALE = 0.15     # std of v/o projection entries
QK_SCALE = 0.06       # std of q/k entries; keeps logit z-sensitivity low
CROSS_KEY_SCALE = 0.03  # std of the cross key projection (same rationale)
VALUE_SCALE = 0.02    # std of the latent-side self value projection; the
                      # constant pattern carries the bulk of the values, so
                      # trajectory drift feeds back into epsilon only weakly
TEXT_DIM = 16
HEAD_DIM = 8
ATTN_RES = 32
NATIVE_STEPS = 1000
ALPHA_END = 0.2       # cumulative signal left at the noisiest native step

LORA_PROJECTIONS = ("wq", "wk", "wv", "wo")


def _token_id(word: str) -> int:
    h = hashlib.blake2b(word.encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") & (2**63 - 1)


class ToyBackbone(Backbone):
    supports_lora = True

    def __init__(self, seed: int = 0, native_side: int = 512, n_layers: int = 2):
        self.seed = int(seed)
        self.native_side = int(native_side)
        self.layer_ids = tuple(f"dec.{i}" for i in range(n_layers))
        self._weights: dict[str, dict[str, np.ndarray]] = {}
        for lid in self.layer_ids:
            rng = rng_for(self.seed, "weights", lid)
            # spatially smooth value pattern: restricting attention to a mask
            # region shifts the retrieved values by O(1), so guidance toggles
            # stay visible after uint8 quantization
            coarse = rng.standard_normal((HEAD_DIM, 4, 4))
            pattern = kernels.bilinear_resize(coarse, ATTN_RES, ATTN_RES)
            self._weights[lid] = {
                "wq": rng.normal(0.0, QK_SCALE, (self.latent_channels, HEAD_DIM)),
                "wk": rng.normal(0.0, QK_SCALE, (self.latent_channels, HEAD_DIM)),
                "wv": rng.normal(0.0, VALUE_SCALE, (self.latent_channels, HEAD_DIM)),
                "wo": rng.normal(0.0, PROJ_SCALE, (HEAD_DIM, self.latent_channels)),
                "wc": rng.normal(0.0, CROSS_KEY_SCALE, (TEXT_DIM, HEAD_DIM)),
                "wvc": rng.normal(0.0, PROJ_SCALE, (TEXT_DIM, HEAD_DIM)),
                "pattern": pattern.reshape(HEAD_DIM, ATTN_RES * ATTN_RES).T.copy(),
            }
        self._null_embedding = rng_for(self.seed, "null-token").standard_normal((1, TEXT_DIM))
        self._lora: Optional[LoRAAdapter] = None

    # --- identity / schedule ------------------------------------------------

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"toy/{self.seed}/{self.native_side}/{len(self.layer_ids)}".encode())
        for lid in self.layer_ids:
            for name in sorted(self._weights[lid]):
                h.update(self._weights[lid][name].tobytes())
        return "toy-" + h.hexdigest()[:16]

    def make_schedule(self, steps: int) -> NoiseSchedule:
        ladder = ladder_indices(steps, NATIVE_STEPS)
        native = 1.0 - (np.arange(NATIVE_STEPS) + 1.0) * (1.0 - ALPHA_END) / NATIVE_STEPS
        alpha_bars = np.concatenate([[1.0], native[ladder]])
        step_indices = np.concatenate([[0], ladder + 1])
        return NoiseSchedule(alpha_bars, step_indices)

    def self_attention_layers(self) -> tuple[str, ...]:
        return self.layer_ids

    # --- codec ----------------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
        h, w = image.shape[:2]
        f = self.latent_downsample
        if h % f or w % f:
            raise DimensionError(f"image dims {h}x{w} not divisible by {f}")
        rgb = np.ascontiguousarray(image.transpose(2, 0, 1))
        means = kernels.block_mean(rgb, f)
        luma = means.mean(axis=0, keepdims=True)
        return np.concatenate([means, luma], axis=0)

    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != self.latent_channels:
            raise ShapeError(f"expected ({self.latent_channels}, h, w) latent, got {z.shape}")
        up = kernels.nearest_upsample(np.ascontiguousarray(z[:3]), self.latent_downsample)
        return np.clip(up.transpose(1, 2, 0), 0.0, 1.0)

    # --- text ----------------------------------------------------------------

    def embed_prompt(self, prompt: str) -> TextEmbedding:
        words = [w.lower() for w in re.findall(r"\w+", prompt)]
        if not words:
            raise ContractError("prompt must contain at least one word")
        truncated = False
        lost: tuple[str, ...] = ()
        if len(words) > self.text_token_limit:
            lost = tuple(words[self.text_token_limit:])
            words = words[: self.text_token_limit]
            truncated = True
            warnings.warn(
                f"prompt truncated to {self.text_token_limit} tokens; lost: {' '.join(lost)}"
            )
        tokens = tuple(_token_id(w) for w in words)
        rows = [np.random.default_rng(tid).standard_normal(TEXT_DIM) for tid in tokens]
        spans = tuple((i, i + 1) for i in range(len(tokens)))
        return TextEmbedding(
            tokens=tokens,
            words=tuple(words),
            embedding=np.stack(rows),
            token_spans=spans,
            truncated=truncated,
            lost_words=lost,
        )

    # --- LoRA ----------------------------------------------------------------

    def lora_targets(self) -> tuple[str, ...]:
        return tuple(f"{lid}:{proj}" for lid in self.layer_ids for proj in LORA_PROJECTIONS)

    def init_lora(self, rank: int, scale: float, seed: int,
                  targets: Optional[tuple[str, ...]] = None) -> LoRAAdapter:
        """Fresh adapter: seeded down-projection, zero up-projection (zero delta)."""
        targets = targets or self.lora_targets()
        deltas = {}
        for target in targets:
            lid, proj = target.split(":")
            shape = self._weights[lid][proj].shape
            rng = rng_for(seed, "lora", target)
            down = rng.normal(0.0, 0.02, (shape[0], rank))
            up = np.zeros((rank, shape[1]))
            deltas[target] = (down, up)
        return LoRAAdapter(rank=rank, scale=scale, target_layers=targets, deltas=deltas)

    def attach_lora(self, adapter: LoRAAdapter) -> None:
        for target in adapter.target_layers:
            lid, _, proj = target.partition(":")
            if lid not in self._weights or proj not in LORA_PROJECTIONS:
                raise ConfigError(f"LoRA target {target!r} does not exist on this backbone")
        self._lora = adapter

    def detach_lora(self) -> None:
        self._lora = None

    def _weight(self, lid: str, proj: str) -> np.ndarray:
        w = self._weights[lid][proj]
        if self._lora is not None:
            d = self._lora.delta(f"{lid}:{proj}")
            if d is not None:
                return w + d
        return w

    # --- noise prediction ------------------------------------------------------

    def _field(self, t: int, shape: tuple[int, int, int]) -> np.ndarray:
        c, h, w = shape
        rng = rng_for(self.seed, "field", t)
        base = rng.standard_normal((c, max(h // 4, 1), max(w // 4, 1)))
        return kernels.bilinear_resize(base, h, w)

    def _check_t(self, t: int) -> None:
        if not (0 <= int(t) <= NATIVE_STEPS):
            raise ConfigError(f"timestep {t} outside native range [0, {NATIVE_STEPS}]")

    def predict_noise(self, z: np.ndarray, t: int,
                      cond: Optional[TextEmbedding] = None,
                      hooks: HookSet = EMPTY_HOOKS) -> NoisePrediction:
        self._check_t(t)
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != self.latent_channels or z.shape[1] != z.shape[2]:
            raise ShapeError(f"expected square ({self.latent_channels}, s, s) latent, got {z.shape}")
        for d in hooks.directives:
            if d.layers is not None:
                unknown = set(d.layers) - set(self.layer_ids)
                if unknown:
                    raise ConfigError(f"directive references unknown layers {sorted(unknown)}")

        side = z.shape[1]
        n_side = min(ATTN_RES, side)
        n = n_side * n_side
        feats = kernels.bilinear_resize(np.ascontiguousarray(z), n_side, n_side)
        F = feats.reshape(self.latent_channels, n).T.copy()
        emb = cond.embedding if cond is not None else self._null_embedding
        scale = 1.0 / np.sqrt(HEAD_DIM)

        snapshot = AttentionSnapshot(head_dim=HEAD_DIM) if hooks.capture_maps else None
        kv_out: Optional[dict] = {} if hooks.capture_kv else None
        attn_eps = np.zeros_like(z)

        for lid in self.layer_ids:
            Q = F @ self._weight(lid, "wq")
            K = F @ self._weight(lid, "wk")
            V = self._weights[lid]["pattern"][:n] + F @ self._weight(lid, "wv")
            if kv_out is not None:
                kv_out[lid] = (K.copy(), V.copy())

            mask_pairs = []
            for d in hooks.directives:
                if not d.applies_to(lid):
                    continue
                if d.kind == REPLACE_KV:
                    K, V = d.kv_source.get_kv(d.step, lid)
                    if K.shape[0] != n:
                        raise ShapeError(
                            f"cached K/V for {lid} has {K.shape[0]} rows, expected {n}")
                    if d.mask is not None and not d.mask.is_empty():
                        mask_pairs.append(background_query_masks(d.mask, n_side))
                elif d.kind == RESTRICT_SELF:
                    pair = restriction_masks(d, n_side)
                    if pair is not None:
                        mask_pairs.append(pair)

            logits = (Q @ K.T) * scale
            if len(mask_pairs) == 1:
                rows, cols = mask_pairs[0]
                a_self = kernels.masked_softmax_rows(logits, rows, cols)
            else:
                for rows, cols in mask_pairs:
                    logits[np.ix_(rows.astype(bool), ~cols.astype(bool))] += kernels.NEG_BIAS
                a_self = kernels.softmax_rows(logits)
            self_out = a_self @ V

            Kc = emb @ self._weights[lid]["wc"]
            Vc = emb @ self._weights[lid]["wvc"]
            a_cross = kernels.softmax_rows((Q @ Kc.T) * scale)
            cross_out = a_cross @ Vc

            layer_out = (self_out + cross_out) @ self._weight(lid, "wo")
            spatial = np.ascontiguousarray(layer_out.T.reshape(self.latent_channels, n_side, n_side))
            attn_eps += kernels.bilinear_resize(spatial, side, side)

            if snapshot is not None:
                snapshot.cross[lid] = a_cross.copy()
                snapshot.self_attn[lid] = a_self.copy()
                snapshot.resolutions[lid] = n_side

        eps = FIELD_GAIN * self._field(int(t), z.shape) + ATTN_GAIN * attn_eps
        return NoisePrediction(epsilon=eps, snapshot=snapshot, self_kv=kv_out)

    # --- LoRA tuning: forward with tape + manual backprop ----------------------

    def masked_denoise_loss_grads(
        self, z_t: np.ndarray, t: int, cond: Optional[TextEmbedding],
        eps_target: np.ndarray, mask: np.ndarray, adapter: LoRAAdapter,
    ) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
        """Sum-of-squares denoising loss restricted to ``mask`` and its
        gradients w.r.t. the adapter's down/up matrices.

        The forward pass runs with the adapter attached and no directives;
        the backward pass is hand-rolled through the attention stack.
        """
        self._check_t(t)
        prev = self._lora
        self.attach_lora(adapter)
        try:
            z = np.asarray(z_t, dtype=np.float64)
            side = z.shape[1]
            n_side = min(ATTN_RES, side)
            n = n_side * n_side
            feats = kernels.bilinear_resize(np.ascontiguousarray(z), n_side, n_side)
            F = feats.reshape(self.latent_channels, n).T.copy()
            emb = cond.embedding if cond is not None else self._null_embedding
            scale = 1.0 / np.sqrt(HEAD_DIM)

            tape = {}
            attn_eps = np.zeros_like(z)
            for lid in self.layer_ids:
                Q = F @ self._weight(lid, "wq")
                K = F @ self._weight(lid, "wk")
                V = self._weights[lid]["pattern"][:n] + F @ self._weight(lid, "wv")
                a_self = kernels.softmax_rows((Q @ K.T) * scale)
                self_out = a_self @ V
                Kc = emb @ self._weights[lid]["wc"]
                Vc = emb @ self._weights[lid]["wvc"]
                a_cross = kernels.softmax_rows((Q @ Kc.T) * scale)
                cross_out = a_cross @ Vc
                pre_o = self_out + cross_out
                layer_out = pre_o @ self._weight(lid, "wo")
                spatial = np.ascontiguousarray(
                    layer_out.T.reshape(self.latent_channels, n_side, n_side))
                attn_eps += kernels.bilinear_resize(spatial, side, side)
                tape[lid] = (Q, K, V, a_self, a_cross, Kc, Vc, pre_o)

            eps_pred = FIELD_GAIN * self._field(int(t), z.shape) + ATTN_GAIN * attn_eps
            resid = (eps_target - eps_pred) * mask[None, :, :]
            loss = float(np.sum(resid * resid))

            d_eps = -2.0 * resid
            d_spatial = kernels.bilinear_resize_adjoint(
                ATTN_GAIN * d_eps, n_side, n_side)
            d_layer_out = d_spatial.reshape(self.latent_channels, n).T.copy()

            grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
            for lid in self.layer_ids:
                Q, K, V, a_self, a_cross, Kc, Vc, pre_o = tape[lid]
                w_o = self._weight(lid, "wo")
                d_pre_o = d_layer_out @ w_o.T
                d_wo = pre_o.T @ d_layer_out

                d_a_self = d_pre_o @ V.T
                d_v = a_self.T @ d_pre_o
                d_logits_s = a_self * (d_a_self - np.sum(d_a_self * a_self, axis=1, keepdims=True))
                d_q = (d_logits_s @ K) * scale
                d_k = (d_logits_s.T @ Q) * scale

                d_a_cross = d_pre_o @ Vc.T
                d_logits_c = a_cross * (d_a_cross - np.sum(d_a_cross * a_cross, axis=1, keepdims=True))
                d_q += (d_logits_c @ Kc) * scale

                d_wq = F.T @ d_q
                d_wk = F.T @ d_k
                d_wv = F.T @ d_v
                for proj, dw in (("wq", d_wq), ("wk", d_wk), ("wv", d_wv), ("wo", d_wo)):
                    target = f"{lid}:{proj}"
                    if target in adapter.deltas:
                        down, up = adapter.deltas[target]
                        grads[target] = (
                            adapter.scale * (dw @ up.T),
                            adapter.scale * (down.T @ dw),
                        )
            return loss, grads
        finally:
            self._lora = prev


def make_toy_backbone(seed: int = 0, native_side: int = 512) -> ToyBackbone:
    return ToyBackbone(seed=seed, native_side=native_side)
