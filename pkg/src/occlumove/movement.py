"""Movement branch: place the completed object and repair the vacated region.

Each step runs locally text-guided prediction with background key/value
replacement, one deterministic sampler update, then a few gradient-descent
iterations on the latent pulling the target-region crop toward the resized
completed object.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .attention import REPLACE_KV, InjectionDirective
from .backbone.base import Backbone, Codec, HookSet, TextEmbedding
from .deocclusion import DeoccStepOutput
from .errors import ContractError, LockstepError
from .latent import (
    InversionCache,
    ddim_step,
    l_resize,
    latent_bilinear_resize,
    noise_fill_init,
)
from .masks import LATENT, Mask
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class TargetBox:
    """Square latent-space box; construction shifts it fully inside bounds."""

    row0: int
    col0: int
    side: int
    latent_side: int
    shifted: bool = False

    def mask(self) -> Mask:
        grid = np.zeros((self.latent_side, self.latent_side), dtype=np.uint8)
        grid[self.row0:self.row0 + self.side, self.col0:self.col0 + self.side] = 1
        return Mask(grid, LATENT)

    def crop(self, z: np.ndarray) -> np.ndarray:
        return z[:, self.row0:self.row0 + self.side, self.col0:self.col0 + self.side]

    def to_dict(self) -> dict:
        return {"row0": self.row0, "col0": self.col0, "side": self.side,
                "latent_side": self.latent_side, "shifted": self.shifted}


def make_target_box(g_rowcol: tuple[int, int], crop_side_pixels: int,
                    latent_side: int, downsample: int = 8) -> TargetBox:
    """Latent box centered at the target point; overflowing boxes are shifted
    inside bounds (not shrunk) so the object keeps its scale."""
    side = int(np.ceil(crop_side_pixels / downsample))
    if side > latent_side:
        side = latent_side
    gr = int(round(g_rowcol[0] / downsample))
    gc = int(round(g_rowcol[1] / downsample))
    row0 = gr - side // 2
    col0 = gc - side // 2
    row0_c = min(max(row0, 0), latent_side - side)
    col0_c = min(max(col0, 0), latent_side - side)
    shifted = (row0_c != row0) or (col0_c != col0)
    if shifted:
        log.warning("target box shifted inside bounds: (%d,%d) -> (%d,%d)",
                    row0, col0, row0_c, col0_c)
    return TargetBox(row0_c, col0_c, side, latent_side, shifted)


@dataclass
class MoveConfig:
    target: tuple[int, int]            # (row, col) in pixels
    crop_side_latent: int              # r' = ceil(r / downsample)
    gamma: float = 0.1
    omega: float = 7.5
    opt_iters: int = 3
    opt_window: tuple[float, float] = (0.2, 0.8)
    local_text_guidance: bool = True   # LTG
    latent_resize: bool = True         # LR
    background_guidance: bool = True   # movement half of AG
    masked_l2: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractError("step size must be >= 0")
        if self.crop_side_latent < 1:
            raise ContractError("crop side must be >= 1")


def init_state(cache: InversionCache, mv: Mask, seed: int) -> np.ndarray:
    """Movement starting latent: inversion endpoint with the vacated region noised."""
    return noise_fill_init(cache.latent(cache.schedule.total_steps), mv, seed)


def upsample_map(grid: np.ndarray, latent_side: int) -> np.ndarray:
    """Bilinearly lift an attention-resolution map onto the latent grid."""
    if grid.shape[0] == latent_side:
        return grid.astype(np.float64)
    return kernels.bilinear_resize(
        np.ascontiguousarray(grid[None], dtype=np.float64), latent_side, latent_side)[0]


def object_target(deocc: DeoccStepOutput, r_prime: int, codec: Codec,
                  latent_resize: bool = True) -> np.ndarray:
    """Masked completed-object latent resized to the target crop side."""
    z = deocc.z_bar
    up = upsample_map(deocc.refined.grid, z.shape[1])
    obj = z * up[None, :, :]
    if latent_resize:
        return l_resize(obj, r_prime, codec)
    return latent_bilinear_resize(obj, r_prime)


def make_movement_loss(deocc: DeoccStepOutput, box: TargetBox, codec: Codec,
                       latent_resize: bool = True, masked_l2: bool = False) -> LossFn:
    """Value-and-gradient of the L2 distance between the target-region crop
    and the resized masked object. The object term is constant w.r.t. the
    optimized latent, so the gradient flows through the crop selection only."""
    target = object_target(deocc, box.side, codec, latent_resize)
    weight = None
    if masked_l2:
        up = upsample_map(deocc.refined.grid, deocc.z_bar.shape[1])
        wfield = latent_bilinear_resize(up[None], box.side)[0]
        weight = (wfield > 0.05).astype(np.float64)

    def loss_fn(z: np.ndarray) -> tuple[float, np.ndarray]:
        diff = box.crop(z) - target
        if weight is not None:
            diff = diff * weight[None, :, :]
        value = float(np.sqrt(np.sum(diff * diff)))
        grad = np.zeros_like(z)
        if value > 0.0:
            grad[:, box.row0:box.row0 + box.side,
                 box.col0:box.col0 + box.side] = diff / value
        return value, grad

    return loss_fn


def movement_loss(z_prime: np.ndarray, deocc: DeoccStepOutput,
                  g_rowcol: tuple[int, int], r_prime: int, codec: Codec,
                  latent_resize: bool = True) -> float:
    """Loss value at ``z_prime`` for a box centered at the target point."""
    box = make_target_box(
        g_rowcol, r_prime * codec.pixel_factor, z_prime.shape[1], codec.pixel_factor)
    return make_movement_loss(deocc, box, codec, latent_resize)(z_prime)[0]


def latent_optimize(z: np.ndarray, loss_fn: LossFn, gamma: float, iters: int
                    ) -> tuple[np.ndarray, list[float]]:
    """Plain gradient descent; non-finite gradients abort the step, keeping
    the incoming latent."""
    trace: list[float] = []
    for _ in range(iters):
        value, grad = loss_fn(z)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            log.warning("non-finite movement loss/gradient; keeping latent unchanged")
            break
        trace.append(value)
        z = z - gamma * grad
    return z, trace


def local_cfg(backbone: Backbone, z: np.ndarray, t_native: int,
              cond: TextEmbedding, q: Mask, omega: float,
              directives: tuple[InjectionDirective, ...] = ()) -> np.ndarray:
    """Classifier-free guidance applied only inside the target-region mask.

    Computed in the factored form (1 - w*Q) * eps_u + w*Q * eps_c so the
    w=0, Q=0 and (Q=1, w=1) limits are exact in floating point.
    """
    if q.space != LATENT:
        raise ContractError("target mask must be in latent space")
    hooks = HookSet(directives=directives)
    eps_u = backbone.predict_noise(z, t_native, None, hooks).epsilon
    eps_c = backbone.predict_noise(z, t_native, cond, hooks).epsilon
    wq = omega * q.grid.astype(np.float64)[None, :, :]
    return (1.0 - wq) * eps_u + wq * eps_c


@dataclass
class MovementContext:
    """Everything a movement step needs besides the evolving latent."""

    backbone: Backbone
    cache: InversionCache
    cond: TextEmbedding
    schedule: NoiseSchedule
    codec: Codec
    cfg: MoveConfig
    box: TargetBox
    q_mask: Mask
    visible: Mask                      # latent-space vacated-region mask
    loss_rows: list[tuple[int, int, float]] = field(default_factory=list)

    def opt_active(self, t_out: int) -> bool:
        if self.cfg.gamma <= 0 or self.cfg.opt_iters <= 0:
            return False
        lo, hi = self.cfg.opt_window
        T = self.schedule.total_steps
        return lo * T <= t_out <= hi * T


def run_step(ctx: MovementContext, t_out: int, z_next: np.ndarray,
             deocc: DeoccStepOutput) -> np.ndarray:
    """One movement step: guided prediction, sampler update, latent optimization."""
    if deocc.timestep != t_out:
        raise LockstepError(
            f"movement step {t_out} received de-occlusion output for {deocc.timestep}")
    t_next = t_out + 1
    t_native = int(ctx.schedule.step_indices[t_next])
    directive = InjectionDirective(
        REPLACE_KV,
        kv_source=ctx.cache,
        step=t_next,
        mask=ctx.visible if (ctx.cfg.background_guidance and not ctx.visible.is_empty()) else None,
    )
    directives = (directive,)
    if ctx.cfg.local_text_guidance:
        eps = local_cfg(ctx.backbone, z_next, t_native, ctx.cond,
                        ctx.q_mask, ctx.cfg.omega, directives)
    else:
        eps = ctx.backbone.predict_noise(
            z_next, t_native, ctx.cond, HookSet(directives=directives)).epsilon
    z_prime = ddim_step(z_next, eps, t_next, ctx.schedule)
    if ctx.opt_active(t_out):
        loss_fn = make_movement_loss(deocc, ctx.box, ctx.codec,
                                     ctx.cfg.latent_resize, ctx.cfg.masked_l2)
        z_t, trace = latent_optimize(z_prime, loss_fn, ctx.cfg.gamma, ctx.cfg.opt_iters)
        for i, v in enumerate(trace):
            ctx.loss_rows.append((t_out, i, v))
        return z_t
    return z_prime
