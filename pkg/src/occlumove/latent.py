"""Latent-space mechanics shared by both branches.

DDIM inversion with key/value caching, the deterministic sampler update,
masked compositing (latent hold / color fill / noise fill), forward noising
and the pixel-route latent resize. All operations are pure functions of
their arguments; anything stochastic takes an explicit seed.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .arrayio import load_array_dir, save_array_dir
from .backbone.base import Backbone, Codec, HookSet, TextEmbedding
from .errors import ConfigError, ContractError, MissingCacheEntryError, ShapeError
from .masks import LATENT, Mask
from .schedule import NoiseSchedule
from .seeding import derive_seed


@dataclass
class InversionCache:
    """Inverted latents for every ladder index plus optional per-layer K/V.

    Immutable after construction; safe to share across concurrent readers.
    """

    latents: np.ndarray  # (T+1, C, s, s)
    schedule: NoiseSchedule
    prompt_fingerprint: str
    keys: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    values: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)

    @property
    def has_kv(self) -> bool:
        return bool(self.keys)

    def latent(self, t: int) -> np.ndarray:
        return self.latents[t]

    def get_kv(self, t: int, layer: str) -> tuple[np.ndarray, np.ndarray]:
        key = (t, layer)
        if key not in self.keys:
            raise MissingCacheEntryError(
                f"no cached keys/values for step {t} layer {layer!r}")
        return self.keys[key], self.values[key]

    def save(self, out_dir: str | Path) -> Path:
        arrays = {"latents": self.latents}
        kv_index = []
        for i, ((t, layer), k) in enumerate(sorted(self.keys.items())):
            arrays[f"k_{i}"] = k
            arrays[f"v_{i}"] = self.values[(t, layer)]
            kv_index.append([t, layer])
        meta = {
            "schedule": self.schedule.to_dict(),
            "prompt_fingerprint": self.prompt_fingerprint,
            "kv_index": kv_index,
        }
        return save_array_dir(out_dir, arrays, meta)

    @classmethod
    def load(cls, in_dir: str | Path) -> "InversionCache":
        arrays, meta = load_array_dir(in_dir)
        keys, values = {}, {}
        for i, (t, layer) in enumerate(meta["kv_index"]):
            keys[(int(t), layer)] = arrays[f"k_{i}"]
            values[(int(t), layer)] = arrays[f"v_{i}"]
        return cls(
            latents=arrays["latents"],
            schedule=NoiseSchedule.from_dict(meta["schedule"]),
            prompt_fingerprint=meta["prompt_fingerprint"],
            keys=keys,
            values=values,
        )


def _eps_array(eps) -> np.ndarray:
    return getattr(eps, "epsilon", eps)


def ddim_step(z_next: np.ndarray, eps, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic sampler update: latent at ladder index ``t`` down to ``t-1``."""
    if not (1 <= t <= schedule.total_steps):
        raise ConfigError(f"ddim_step needs 1 <= t <= {schedule.total_steps}, got {t}")
    e = _eps_array(eps)
    a_t = schedule.alpha_bars[t]
    a_prev = schedule.alpha_bars[t - 1]
    x0 = (z_next - np.sqrt(1.0 - a_t) * e) / np.sqrt(a_t)
    return np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * e


def ddim_invert_step(z: np.ndarray, eps, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """First-order inversion update: latent at ladder index ``t`` up to ``t+1``."""
    if not (0 <= t <= schedule.total_steps - 1):
        raise ConfigError(f"ddim_invert_step needs 0 <= t < {schedule.total_steps}, got {t}")
    e = _eps_array(eps)
    a_t = schedule.alpha_bars[t]
    a_next = schedule.alpha_bars[t + 1]
    x0 = (z - np.sqrt(1.0 - a_t) * e) / np.sqrt(a_t)
    return np.sqrt(a_next) * x0 + np.sqrt(1.0 - a_next) * e


def ddim_invert(
    backbone: Backbone,
    z0: np.ndarray,
    cond: Optional[TextEmbedding],
    schedule: NoiseSchedule,
    capture_kv: bool = False,
) -> InversionCache:
    """Invert a clean latent along the ladder, optionally caching self-attention K/V.

    Each inversion step evaluates the predictor at the target (noisier)
    timestep label, so cached K/V line up with the labels sampling will
    request on the way back down.
    """
    if schedule.total_steps < 2:
        raise ConfigError("inversion needs a schedule with T >= 2")
    z0 = np.asarray(z0, dtype=np.float64)
    T = schedule.total_steps
    latents = np.empty((T + 1,) + z0.shape, dtype=np.float64)
    latents[0] = z0
    keys: dict[tuple[int, str], np.ndarray] = {}
    values: dict[tuple[int, str], np.ndarray] = {}
    hooks = HookSet(capture_kv=capture_kv)

    if capture_kv:  # paper stores K/V for t = 0 as well; one extra capture pass
        pred0 = backbone.predict_noise(z0, int(schedule.step_indices[0]), cond, hooks)
        for layer, (k, v) in pred0.self_kv.items():
            keys[(0, layer)] = k
            values[(0, layer)] = v

    z = z0
    for i in range(T):
        t_native = int(schedule.step_indices[i + 1])
        pred = backbone.predict_noise(z, t_native, cond, hooks)
        if capture_kv:
            for layer, (k, v) in pred.self_kv.items():
                keys[(i + 1, layer)] = k
                values[(i + 1, layer)] = v
        z = ddim_invert_step(z, pred.epsilon, i, schedule)
        latents[i + 1] = z

    fp = cond.fingerprint() if cond is not None else "uncond"
    return InversionCache(
        latents=latents,
        schedule=schedule,
        prompt_fingerprint=fp,
        keys=keys,
        values=values,
    )


def latent_hold(z_prime: np.ndarray, z_inv: np.ndarray, mv: Mask) -> np.ndarray:
    """Replace the visible region of a sampled latent with the inverted one."""
    if mv.space != LATENT:
        raise ContractError("latent_hold expects a latent-space mask")
    if z_prime.shape != z_inv.shape:
        raise ShapeError("latents must share a shape")
    if z_prime.shape[1:] != mv.grid.shape:
        raise ShapeError("mask side must match latent spatial dims")
    return kernels.blend_masked(
        np.ascontiguousarray(z_prime, dtype=np.float64),
        np.ascontiguousarray(z_inv, dtype=np.float64),
        mv.grid,
    )


def forward_noise(z: np.ndarray, t: int, seed: int, schedule: NoiseSchedule) -> np.ndarray:
    """Variance-preserving forward noising to ladder index ``t``."""
    if not (0 <= t <= schedule.total_steps):
        raise ConfigError(f"t={t} outside schedule range")
    if t == 0:
        return np.array(z, dtype=np.float64, copy=True)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(z.shape)
    a = schedule.alpha_bars[t]
    return np.sqrt(a) * z + np.sqrt(1.0 - a) * eps


def noise_fill_init(z_inv: np.ndarray, mv: Mask, seed: int) -> np.ndarray:
    """Seeded unit Gaussian inside the mask, inverted latent outside."""
    if mv.space != LATENT:
        raise ContractError("noise_fill_init expects a latent-space mask")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(z_inv.shape)
    return kernels.blend_masked(
        np.ascontiguousarray(z_inv, dtype=np.float64), eps, mv.grid)


def color_fill_init(
    backbone: Backbone,
    z_inv_tm: np.ndarray,
    mv: Mask,
    seed: int,
    t_m: int,
    schedule: NoiseSchedule,
) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Noised flat-color latent outside the visible region at step ``t_m``.

    Returns the composited latent and the flat RGB color (recorded in the
    run manifest).
    """
    if not (0 <= t_m <= schedule.total_steps):
        raise ConfigError(f"t_m={t_m} outside schedule range")
    if mv.space != LATENT:
        raise ContractError("color_fill_init expects a latent-space mask")
    rng = np.random.default_rng(derive_seed(seed, "fill-color"))
    color = rng.uniform(0.0, 1.0, 3)
    side = z_inv_tm.shape[1] * backbone.latent_downsample
    flat = np.broadcast_to(color, (side, side, 3)).copy()
    j0 = backbone.encode_image(flat)
    j_tm = forward_noise(j0, t_m, derive_seed(seed, "fill-noise"), schedule)
    out = kernels.blend_masked(
        j_tm, np.ascontiguousarray(z_inv_tm, dtype=np.float64), mv.grid)
    return out, tuple(float(c) for c in color)


def l_resize(z: np.ndarray, r_prime: int, codec: Codec) -> np.ndarray:
    """Resize a latent through pixel space: decode, bilinear resize, re-encode."""
    if r_prime < 1:
        raise ContractError("target side must be >= 1")
    pixels = codec.decode(z)
    target = r_prime * codec.pixel_factor
    if pixels.ndim == 3 and pixels.shape[2] == 3 and pixels.shape[0] == pixels.shape[1]:
        # channels-last image route (real codec)
        chw = np.ascontiguousarray(pixels.transpose(2, 0, 1))
        resized = kernels.bilinear_resize(chw, target, target).transpose(1, 2, 0)
    else:
        # identity-codec route: values are already channels-first
        resized = kernels.bilinear_resize(np.ascontiguousarray(pixels), target, target)
    return codec.encode(resized)


def latent_bilinear_resize(z: np.ndarray, r_prime: int) -> np.ndarray:
    """Raw latent-space bilinear resize (the degraded route; ablation LR off)."""
    return kernels.bilinear_resize(np.ascontiguousarray(z, dtype=np.float64), r_prime, r_prime)


def cache_fingerprint(cache: InversionCache) -> str:
    h = hashlib.sha256()
    h.update(cache.prompt_fingerprint.encode())
    h.update(json.dumps(cache.schedule.to_dict()).encode())
    h.update(cache.latents.tobytes())
    return h.hexdigest()[:16]
