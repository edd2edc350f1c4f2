"""De-occlusion branch: complete the hidden portion of the target object.

Input preparation crops a relaxed square around the visible mask and resizes
it to the backbone's native resolution. The sampling loop starts from a
noised flat-color composite, holds the visible region to the inversion
trajectory at every step, restricts self-attention by the previous step's
refined map, and hands each step's latent + map to the movement branch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from . import kernels
from .attention import (
    RESTRICT_SELF,
    InjectionDirective,
    RefinedMap,
    average_maps,
    refine,
    select_token_map,
)
from .backbone.base import Backbone, HookSet, LoRAAdapter, TextEmbedding
from .errors import ContractError, DivergenceError
from .latent import InversionCache, color_fill_init, ddim_step, latent_hold, noise_fill_init
from .masks import LATENT, PIXEL, Mask, resize_mask_grid
from .schedule import NoiseSchedule
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CropFrame:
    """Square crop geometry with enough state to invert the transform."""

    center: tuple[int, int]          # (row, col) in the source image
    tight_side: int
    relax: float
    side: int
    source_dims: tuple[int, int]
    window: tuple[int, int]          # top-left (row, col); may be negative
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)  # top, bottom, left, right

    def __post_init__(self):
        if self.side < self.tight_side:
            raise ContractError("relaxed side must cover the tight box")

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "tight_side": self.tight_side,
            "relax": self.relax,
            "side": self.side,
            "source_dims": list(self.source_dims),
            "window": list(self.window),
            "padding": list(self.padding),
        }


@dataclass
class DeoccStepOutput:
    """Per-step product handed to the movement branch (lockstep contract)."""

    z_bar: np.ndarray
    refined: RefinedMap
    timestep: int


@dataclass
class CompletedObject:
    image: np.ndarray            # native-side RGB, flat-color background
    amodal_mask: Mask            # pixel space, always covers the visible mask
    frame: CropFrame


@dataclass
class DeoccConfig:
    t_m: int
    refine_power: int = 2
    color_fill: bool = True
    attention_guidance: bool = True
    seed: int = 0
    restrict_layers: Optional[tuple[str, ...]] = None


def prepare_input(image: np.ndarray, visible: Mask, relax: float,
                  native_side: int = 512, latent_downsample: int = 8,
                  ) -> tuple[np.ndarray, Mask, CropFrame]:
    """Crop a relaxed square around the visible mask and resize to native scale.

    Returns the native-resolution crop, the visible mask at latent
    resolution, and the frame holding the inverse transform. Windows that
    overflow the image are reflect-padded so the object stays centered.
    """
    if visible.space != PIXEL:
        raise ContractError("prepare_input expects a pixel-space mask")
    if visible.is_empty():
        raise ContractError("visible mask is empty")
    if image.shape[:2] != visible.grid.shape:
        raise ContractError("mask dims must equal image dims")

    r0, r1, c0, c1 = visible.bbox()
    tight = max(r1 - r0, c1 - c0)
    center = ((r0 + r1) // 2, (c0 + c1) // 2)
    side = max(int(round(relax * tight)), tight, 8)
    row0 = center[0] - side // 2
    col0 = center[1] - side // 2

    h, w = image.shape[:2]
    top = max(0, -row0)
    left = max(0, -col0)
    bottom = max(0, row0 + side - h)
    right = max(0, col0 + side - w)
    if top or left or bottom or right:
        image = np.pad(image, ((top, bottom), (left, right), (0, 0)), mode="reflect")
        grid = np.pad(visible.grid, ((top, bottom), (left, right)), mode="constant")
    else:
        grid = visible.grid
    crop_img = image[row0 + top: row0 + top + side, col0 + left: col0 + left + side]
    crop_mask = grid[row0 + top: row0 + top + side, col0 + left: col0 + left + side]

    native = native_side
    latent_side = native_side // latent_downsample
    chw = np.ascontiguousarray(crop_img.transpose(2, 0, 1))
    img512 = kernels.bilinear_resize(chw, native, native).transpose(1, 2, 0)
    mv64 = Mask(resize_mask_grid(crop_mask, latent_side), LATENT)
    frame = CropFrame(
        center=center,
        tight_side=tight,
        relax=relax,
        side=side,
        source_dims=(h, w),
        window=(row0, col0),
        padding=(top, bottom, left, right),
    )
    return np.clip(img512, 0.0, 1.0), mv64, frame


def finetune_lora(
    backbone: Backbone,
    z0_bar: np.ndarray,
    mv: Mask,
    cond: TextEmbedding,
    schedule: NoiseSchedule,
    steps: int,
    rank: int,
    lr: float,
    seed: int = 0,
    scale: float = 1.0,
) -> LoRAAdapter:
    """Fit LoRA deltas with the denoising loss restricted to the visible region.

    Plain SGD on the adapter's down/up matrices; base weights are untouched.
    Aborts with diagnostics if the loss exceeds 10x its initial value.
    """
    if not backbone.supports_lora:
        raise ContractError("backbone does not support LoRA injection")
    adapter = backbone.init_lora(rank, scale, derive_seed(seed, "lora-init"))
    if steps == 0:
        return adapter
    mask_grid = mv.grid.astype(np.float64)
    T = schedule.total_steps
    initial = None
    for k in range(steps):
        rng = rng_for(seed, "lora-step", k)
        t_idx = int(rng.integers(1, T + 1))
        eps = rng.standard_normal(z0_bar.shape)
        a = schedule.alpha_bars[t_idx]
        z_t = np.sqrt(a) * z0_bar + np.sqrt(1.0 - a) * eps
        t_native = int(schedule.step_indices[t_idx])
        loss, grads = backbone.masked_denoise_loss_grads(
            z_t, t_native, cond, eps, mask_grid, adapter)
        if initial is None:
            initial = loss
        if initial > 0 and loss > 10.0 * initial:
            raise DivergenceError(
                f"LoRA tuning diverged at step {k}: loss {loss:.4g} > 10x initial {initial:.4g} "
                f"(lr={lr}, rank={rank})")
        for target, (d_down, d_up) in grads.items():
            down, up = adapter.deltas[target]
            adapter.deltas[target] = (down - lr * d_down, up - lr * d_up)
    return adapter


class DeoccBranch:
    """One de-occlusion run as a resumable step iterator.

    ``steps()`` yields one ``DeoccStepOutput`` per timestep from the start
    index down to 0 (the first yield is the initialization composite), which
    realizes the ordered, in-order handoff the movement branch consumes.
    """

    def __init__(
        self,
        backbone: Backbone,
        cache: InversionCache,
        mv: Mask,
        cond: TextEmbedding,
        token_span: tuple[int, int],
        schedule: NoiseSchedule,
        cfg: DeoccConfig,
        adapter: Optional[LoRAAdapter] = None,
    ):
        if mv.space != LATENT:
            raise ContractError("de-occlusion branch expects the latent visible mask")
        if not (0 < cfg.t_m <= schedule.total_steps):
            raise ContractError(f"t_m={cfg.t_m} outside (0, T={schedule.total_steps}]")
        self.backbone = backbone
        self.cache = cache
        self.mv = mv
        self.cond = cond
        self.token_span = token_span
        self.schedule = schedule
        self.cfg = cfg
        self.adapter = adapter
        self.start = cfg.t_m if cfg.color_fill else schedule.total_steps
        self.meta: dict = {
            "start_step": self.start,
            "color_fill": cfg.color_fill,
            "attention_guidance": cfg.attention_guidance,
            "lora_attached": adapter is not None,
            "refine_power": cfg.refine_power,
            "fill_color": None,
        }
        self._last: Optional[DeoccStepOutput] = None

    def _initial(self) -> tuple[np.ndarray, RefinedMap]:
        if self.cfg.color_fill:
            z, color = color_fill_init(
                self.backbone, self.cache.latent(self.start), self.mv,
                derive_seed(self.cfg.seed, "color-fill"), self.start, self.schedule)
            self.meta["fill_color"] = list(color)
        else:
            z = noise_fill_init(
                self.cache.latent(self.start), self.mv.invert(),
                derive_seed(self.cfg.seed, "deocc-noise-fill"))
        res = min(32, z.shape[1])
        initial_map = RefinedMap.from_mask(self.mv, res, self.start, self.token_span)
        return z, initial_map

    def steps(self) -> Iterator[DeoccStepOutput]:
        z, current_map = self._initial()
        self._last = DeoccStepOutput(z, current_map, self.start)
        yield self._last
        for tau in range(self.start, 0, -1):
            directives: tuple[InjectionDirective, ...] = ()
            if self.cfg.attention_guidance:
                directives = (InjectionDirective(
                    RESTRICT_SELF, map=current_map, mask=self.mv,
                    layers=self.cfg.restrict_layers),)
            hooks = HookSet(capture_maps=True, directives=directives)
            with self.backbone.lora(self.adapter):
                pred = self.backbone.predict_noise(
                    z, int(self.schedule.step_indices[tau]), self.cond, hooks)
            z_prime = ddim_step(z, pred.epsilon, tau, self.schedule)
            z = latent_hold(z_prime, self.cache.latent(tau - 1), self.mv)
            res = min(32, z.shape[1])
            avg_cross, avg_self = average_maps(pred.snapshot, resolution=res)
            token_map = select_token_map(avg_cross, self.token_span)
            current_map = refine(avg_self, token_map, self.cfg.refine_power,
                                 token_span=self.token_span, timestep=tau - 1)
            self._last = DeoccStepOutput(z, current_map, tau - 1)
            yield self._last

    def complete(self, frame: CropFrame) -> CompletedObject:
        if self._last is None or self._last.timestep != 0:
            raise ContractError("branch has not reached timestep 0")
        image = self.backbone.decode_latent(self._last.z_bar)
        amodal = extract_amodal_mask(self._last.refined, self.mv,
                                     pixel_side=image.shape[0])
        return CompletedObject(image=image, amodal_mask=amodal, frame=frame)


def run_branch(
    backbone: Backbone,
    cache: InversionCache,
    mv: Mask,
    cond: TextEmbedding,
    token_span: tuple[int, int],
    schedule: NoiseSchedule,
    cfg: DeoccConfig,
    frame: CropFrame,
    adapter: Optional[LoRAAdapter] = None,
    on_step: Optional[Callable[[DeoccStepOutput], None]] = None,
) -> CompletedObject:
    """Run the branch to completion, invoking ``on_step`` per yielded step."""
    branch = DeoccBranch(backbone, cache, mv, cond, token_span, schedule, cfg, adapter)
    for out in branch.steps():
        if on_step is not None:
            on_step(out)
    return branch.complete(frame)


def extract_amodal_mask(final_map: RefinedMap, visible: Mask,
                        pixel_side: int = 512, threshold: float = 0.5) -> Mask:
    """Binarize the final refined map, lift to pixels, union with the visible mask."""
    binary = final_map.binarize(threshold=threshold, dilate=0)
    up = resize_mask_grid(binary, pixel_side)
    vis_up = resize_mask_grid(visible.grid, pixel_side)
    return Mask(np.maximum(up, vis_up), PIXEL)
