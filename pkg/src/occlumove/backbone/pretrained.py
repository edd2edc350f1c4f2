"""Adapter over a pretrained latent-diffusion checkpoint (diffusers layout).

Loads lazily so torch/diffusers stay optional. A capability probe at load
time verifies the checkpoint exposes the pieces this package hooks into:
a VAE with encode/decode, a CLIP text encoder with offset mapping, and a
UNet whose attention processors can be swapped.

Everything here mirrors the toy backbone's semantics: posterior-mean
encoding (deterministic), per-call hook state, additive-bias restriction,
K/V substitution on self-attention layers, and LoRA as non-destructive
activation-side deltas.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from typing import Optional

import numpy as np

from ..attention import REPLACE_KV, RESTRICT_SELF, AttentionSnapshot, restriction_masks
from ..errors import ConfigError, ContractError, DimensionError, ShapeError
from ..schedule import NoiseSchedule, ladder_indices
from ..seeding import rng_for
from .base import EMPTY_HOOKS, Backbone, HookSet, LoRAAdapter, NoisePrediction, TextEmbedding

RESTRICTION_MIN_RES = 32  # restriction applies to decoder self-attention >= this


def _require_torch():
    try:
        import torch  # noqa: F401
        from diffusers import AutoencoderKL, UNet2DConditionModel  # noqa: F401
    except ImportError as exc:  # pragma: no cover
        raise ConfigError(
            "pretrained backbone needs the 'pretrained' extra "
            "(pip install occlumove[pretrained])") from exc


class PretrainedBackbone(Backbone):  # pragma: no cover - needs checkpoint weights
    supports_lora = True

    def __init__(self, checkpoint: str, seed: int = 0, device: str = "cpu",
                 dtype=None):
        _require_torch()
        import torch
        from diffusers import StableDiffusionPipeline

        self._torch = torch
        self.seed = int(seed)
        self.checkpoint = checkpoint
        self.device = device
        pipe = StableDiffusionPipeline.from_pretrained(
            checkpoint, torch_dtype=dtype or torch.float32, safety_checker=None,
            requires_safety_checker=False)
        self.vae = pipe.vae.to(device).eval()
        self.unet = pipe.unet.to(device).eval()
        self.text_encoder = pipe.text_encoder.to(device).eval()
        self.tokenizer = pipe.tokenizer
        self.scaling = float(self.vae.config.scaling_factor)
        self.native_side = int(self.unet.config.sample_size * self.latent_downsample)
        self.text_token_limit = int(self.tokenizer.model_max_length)
        self._betas = pipe.scheduler.config
        self._lora: Optional[LoRAAdapter] = None
        self._probe()

    # --- capability probe -------------------------------------------------

    def _probe(self) -> None:
        missing = []
        if not callable(getattr(self.vae, "encode", None)):
            missing.append("vae.encode")
        if not callable(getattr(self.vae, "decode", None)):
            missing.append("vae.decode")
        if not hasattr(self.unet, "attn_processors"):
            missing.append("unet.attn_processors")
        if not self.self_attention_layers():
            missing.append("self-attention layers")
        if missing:
            raise ConfigError(f"checkpoint not hookable; missing: {', '.join(missing)}")

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"pretrained/{self.checkpoint}/{self.seed}".encode())
        return "sd-" + h.hexdigest()[:16]

    def make_schedule(self, steps: int) -> NoiseSchedule:
        cfg = self._betas
        native = int(cfg.num_train_timesteps)
        betas = np.linspace(cfg.beta_start**0.5, cfg.beta_end**0.5, native) ** 2
        alpha_bar = np.cumprod(1.0 - betas)
        ladder = ladder_indices(steps, native)
        return NoiseSchedule(np.concatenate([[1.0], alpha_bar[ladder]]),
                             np.concatenate([[0], ladder + 1]))

    def self_attention_layers(self) -> tuple[str, ...]:
        return tuple(name[: -len(".processor")]
                     for name in self.unet.attn_processors
                     if ".attn1." in name)

    # --- codec -------------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape[:2]
        if h % self.latent_downsample or w % self.latent_downsample:
            raise DimensionError(f"image dims {h}x{w} not divisible by 8")
        x = torch.from_numpy(image.transpose(2, 0, 1)[None]).float().to(self.device)
        x = x * 2.0 - 1.0
        with torch.no_grad():
            posterior = self.vae.encode(x).latent_dist
        # posterior mean keeps the pipeline deterministic end to end
        return (posterior.mean[0] * self.scaling).cpu().double().numpy()

    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        torch = self._torch
        if z.ndim != 3 or z.shape[0] != self.latent_channels:
            raise ShapeError(f"expected ({self.latent_channels}, h, w) latent")
        zt = torch.from_numpy(np.asarray(z) / self.scaling).float()[None].to(self.device)
        with torch.no_grad():
            img = self.vae.decode(zt).sample[0]
        img = ((img + 1.0) / 2.0).clamp(0, 1)
        return img.permute(1, 2, 0).cpu().double().numpy()

    # --- text ----------------------------------------------------------------

    def embed_prompt(self, prompt: str) -> TextEmbedding:
        torch = self._torch
        if not prompt.strip():
            raise ContractError("prompt must be non-empty")
        words = prompt.split()
        ids: list[int] = []
        spans: list[tuple[int, int]] = []
        kept_words: list[str] = []
        lost: list[str] = []
        truncated = False
        budget = self.text_token_limit - 2  # BOS/EOS
        for word in words:
            piece = self.tokenizer(word, add_special_tokens=False).input_ids
            if len(ids) + len(piece) > budget:
                truncated = True
                lost.append(word)
                continue
            spans.append((1 + len(ids), 1 + len(ids) + len(piece)))
            ids.extend(piece)
            kept_words.append(word)
        if truncated:
            warnings.warn(f"prompt truncated; lost: {' '.join(lost)}")
        full = [self.tokenizer.bos_token_id, *ids, self.tokenizer.eos_token_id]
        pad = [self.tokenizer.eos_token_id] * (self.text_token_limit - len(full))
        input_ids = torch.tensor([full + pad], device=self.device)
        with torch.no_grad():
            emb = self.text_encoder(input_ids)[0][0]
        # spans cover every embedding row exactly once: BOS + word pieces + tail
        return TextEmbedding(
            tokens=tuple(full + pad),
            words=("<bos>", *kept_words, "<eos+pad>"),
            embedding=emb.cpu().double().numpy(),
            token_spans=((0, 1), *spans, (1 + len(ids), self.text_token_limit)),
            truncated=truncated,
            lost_words=tuple(lost),
        )

    # --- LoRA ------------------------------------------------------------------

    def lora_targets(self) -> tuple[str, ...]:
        out = []
        for layer in self.self_attention_layers():
            for proj in ("to_q", "to_k", "to_v", "to_out.0"):
                out.append(f"{layer}:{proj}")
        return tuple(out)

    def init_lora(self, rank: int, scale: float, seed: int,
                  targets: Optional[tuple[str, ...]] = None) -> LoRAAdapter:
        targets = targets or self.lora_targets()
        deltas = {}
        for target in targets:
            lin = self._target_module(target)
            d_in = lin.in_features
            d_out = lin.out_features
            rng = rng_for(seed, "lora", target)
            deltas[target] = (rng.normal(0.0, 0.02, (d_in, rank)),
                              np.zeros((rank, d_out)))
        return LoRAAdapter(rank=rank, scale=scale, target_layers=targets, deltas=deltas)

    def _target_module(self, target: str):
        layer, _, proj = target.partition(":")
        module = self.unet.get_submodule(layer)
        return module.get_submodule(proj)

    def attach_lora(self, adapter: LoRAAdapter) -> None:
        for target in adapter.target_layers:
            self._target_module(target)  # existence check
        self._lora = adapter

    def detach_lora(self) -> None:
        self._lora = None

    def _lora_delta(self, layer: str, proj: str):
        if self._lora is None:
            return None
        return self._lora.delta(f"{layer}:{proj}")

    # --- prediction ---------------------------------------------------------------

    def predict_noise(self, z: np.ndarray, t: int,
                      cond: Optional[TextEmbedding] = None,
                      hooks: HookSet = EMPTY_HOOKS) -> NoisePrediction:
        torch = self._torch
        known = set(self.self_attention_layers())
        for d in hooks.directives:
            if d.layers is not None and set(d.layers) - known:
                raise ConfigError(
                    f"directive references unknown layers {sorted(set(d.layers) - known)}")
        if cond is None:
            cond = self.embed_prompt("")
        emb = torch.from_numpy(cond.embedding).float()[None].to(self.device)
        zt = torch.from_numpy(np.asarray(z, dtype=np.float64)).float()[None].to(self.device)

        state = _HookState(self, hooks)
        originals = self.unet.attn_processors
        procs = {}
        for name in originals:
            layer = name[: -len(".processor")]
            procs[name] = _HookedProcessor(self, state, layer, ".attn1." in name)
        self.unet.set_attn_processor(procs)
        try:
            with torch.no_grad():
                eps = self.unet(zt, int(t) - 1 if t > 0 else 0,
                                encoder_hidden_states=emb).sample[0]
        finally:
            self.unet.set_attn_processor(originals)
        return NoisePrediction(
            epsilon=eps.cpu().double().numpy(),
            snapshot=state.snapshot,
            self_kv=state.kv if hooks.capture_kv else None,
        )

    def masked_denoise_loss_grads(self, z_t, t, cond, eps_target, mask, adapter):
        torch = self._torch
        params = {}
        for target, (down, up) in adapter.deltas.items():
            params[target] = (torch.tensor(down, dtype=torch.float32, requires_grad=True),
                              torch.tensor(up, dtype=torch.float32, requires_grad=True))
        prev = self._lora
        self._lora = _TorchLoRAView(adapter, params)
        try:
            emb = torch.from_numpy(cond.embedding).float()[None].to(self.device)
            zt = torch.from_numpy(np.asarray(z_t)).float()[None].to(self.device)
            state = _HookState(self, EMPTY_HOOKS)
            originals = self.unet.attn_processors
            procs = {name: _HookedProcessor(self, state, name[: -len(".processor")],
                                            ".attn1." in name)
                     for name in originals}
            self.unet.set_attn_processor(procs)
            try:
                eps = self.unet(zt, int(t) - 1 if t > 0 else 0,
                                encoder_hidden_states=emb).sample[0]
            finally:
                self.unet.set_attn_processor(originals)
            m = torch.from_numpy(np.asarray(mask)).float().to(self.device)
            target = torch.from_numpy(np.asarray(eps_target)).float().to(self.device)
            loss = torch.sum(((target - eps) * m[None]) ** 2)
            loss.backward()
            grads = {tgt: (p[0].grad.double().numpy(), p[1].grad.double().numpy())
                     for tgt, p in params.items()}
            return float(loss.item()), grads
        finally:
            self._lora = prev


class _TorchLoRAView:
    """Adapter view whose deltas are live torch tensors (for autograd)."""

    def __init__(self, base: LoRAAdapter, params: dict):
        self.scale = base.scale
        self.target_layers = base.target_layers
        self._params = params

    def delta(self, target: str):
        pair = self._params.get(target)
        if pair is None:
            return None
        down, up = pair
        return self.scale * (down @ up)


class _HookState:  # pragma: no cover
    def __init__(self, backbone: "PretrainedBackbone", hooks: HookSet):
        self.backbone = backbone
        self.hooks = hooks
        self.snapshot = AttentionSnapshot(head_dim=0) if hooks.capture_maps else None
        self.kv: dict = {}


class _HookedProcessor:  # pragma: no cover - exercised only with weights
    """Manual attention with capture/injection, one instance per layer."""

    def __init__(self, backbone, state: _HookState, layer: str, is_self: bool):
        self.backbone = backbone
        self.state = state
        self.layer = layer
        self.is_self = is_self

    def __call__(self, attn, hidden_states, encoder_hidden_states=None,
                 attention_mask=None, **kwargs):
        torch = self.backbone._torch
        residual = hidden_states
        context = hidden_states if encoder_hidden_states is None else encoder_hidden_states

        def linear(name, x):
            lin = attn.get_submodule(name) if "." in name else getattr(attn, name)
            y = lin(x)
            delta = self.backbone._lora_delta(self.layer, name) \
                if self.backbone._lora is not None else None
            if delta is not None:
                d = delta if torch.is_tensor(delta) else torch.tensor(
                    delta, dtype=x.dtype, device=x.device)
                y = y + x @ d.to(x.dtype)
            return y

        q = linear("to_q", hidden_states)
        k = linear("to_k", context)
        v = linear("to_v", context)
        heads = attn.heads
        q = attn.head_to_batch_dim(q)
        k = attn.head_to_batch_dim(k)
        v = attn.head_to_batch_dim(v)

        n = hidden_states.shape[1]
        res = int(math.isqrt(n))
        directives = [d for d in self.state.hooks.directives if d.applies_to(self.layer)]
        bias = None
        if self.is_self and directives:
            for d in directives:
                if d.kind == REPLACE_KV:
                    ck, cv = d.kv_source.get_kv(d.step, self.layer)
                    k = torch.tensor(ck, dtype=q.dtype, device=q.device)
                    v = torch.tensor(cv, dtype=q.dtype, device=q.device)
                    if d.mask is not None and not d.mask.is_empty():
                        from ..attention import background_query_masks

                        rows, cols = background_query_masks(d.mask, res)
                        bias = _additive_bias(torch, rows, cols, q)
                elif d.kind == RESTRICT_SELF and res >= RESTRICTION_MIN_RES:
                    pair = restriction_masks(d, res)
                    if pair is not None:
                        bias = _additive_bias(torch, pair[0], pair[1], q)

        scale = 1.0 / math.sqrt(q.shape[-1])
        logits = q @ k.transpose(-1, -2) * scale
        if bias is not None:
            logits = logits + bias
        probs = logits.softmax(dim=-1)

        if self.state.snapshot is not None:
            mean_probs = probs.reshape(-1, heads, *probs.shape[1:]).mean(dim=1)[0]
            maps = mean_probs.detach().cpu().double().numpy()
            if self.is_self:
                self.state.snapshot.self_attn[self.layer] = maps
                self.state.snapshot.resolutions[self.layer] = res
            else:
                self.state.snapshot.cross[self.layer] = maps
        if self.is_self and self.state.hooks.capture_kv:
            self.state.kv[self.layer] = (k.detach().cpu().double().numpy(),
                                         v.detach().cpu().double().numpy())

        out = probs @ v
        out = attn.batch_to_head_dim(out)
        out = linear("to_out.0", out)
        out = attn.to_out[1](out)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


def _additive_bias(torch, rows, cols, q):  # pragma: no cover
    from .. import kernels

    bias = torch.zeros((q.shape[1], q.shape[1]), dtype=q.dtype, device=q.device)
    r = torch.tensor(rows.astype(bool), device=q.device)
    c = torch.tensor(~cols.astype(bool), device=q.device)
    bias[r.unsqueeze(1) & c.unsqueeze(0)] = kernels.NEG_BIAS
    return bias
