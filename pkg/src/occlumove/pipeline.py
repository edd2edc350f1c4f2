"""Full-edit orchestration: validate, invert, tune, run both branches in
lockstep, decode and persist artifacts.

"Parallel" branches are realized as interleaved lockstep: the orchestrator
advances the de-occlusion branch one step, hands the output through the
ordered channel (a generator), then advances the movement branch one step.
Movement steps above the de-occlusion start index consume the
initialization latent and the visible-mask map as stand-ins.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__ as _pkg_version
from . import kernels
from .arrayio import sha256_file
from .attention import export_refined_series
from .backbone import make_backbone
from .backbone.base import Backbone, LoRAAdapter, TextEmbedding
from .deocclusion import (
    CompletedObject,
    DeoccBranch,
    DeoccConfig,
    finetune_lora,
    prepare_input,
)
from .errors import ConfigError, ContractError, StageError
from .imgio import save_image, save_mask
from .latent import InversionCache, ddim_invert, ddim_step, noise_fill_init
from .masks import LATENT, PIXEL, Mask, resize_mask_grid
from .movement import MoveConfig, MovementContext, make_target_box, run_step
from .schedule import NoiseSchedule
from .seeding import derive_seed

log = logging.getLogger(__name__)

ProgressSink = Callable[[str, int, int], None]

PROMPT_TEMPLATE = "A photo of {category}"


@dataclass
class PipelineConfig:
    """Every free hyperparameter plus the ablation flags."""

    steps: int = 50                      # T
    t_m: Optional[int] = None            # default: ceil(0.8 * T)
    refine_power: int = 2                # lambda
    relax: float = 1.3                   # eta
    gamma: float = 0.1
    omega: float = 7.5
    opt_iters: int = 3
    opt_window: tuple[float, float] = (0.2, 0.8)
    lora_rank: int = 16
    lora_steps: int = 80
    lora_lr: float = 2e-4
    lora_scale: float = 1.0
    seed: int = 0
    color_fill: bool = True              # CF
    attention_guidance: bool = True      # AG
    lora: bool = True                    # LoRA
    latent_resize: bool = True           # LR
    local_text_guidance: bool = True     # LTG
    noise_fill: bool = True              # movement vacated-region fill
    masked_l2: bool = False
    backbone: str = "toy"
    backbone_seed: int = 0
    checkpoint: Optional[str] = None
    codec_recon_tol: float = 0.05

    def __post_init__(self):
        if self.steps < 2:
            raise ConfigError("steps must be >= 2")
        if self.t_m is not None and not (0 < self.t_m <= self.steps):
            raise ConfigError(f"t_m={self.t_m} outside (0, steps={self.steps}]")
        for name in ("relax", "omega", "lora_lr", "lora_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")

    @property
    def resolved_t_m(self) -> int:
        """Start index of the de-occlusion branch; defaults to ceil(0.8 * T)."""
        return self.t_m if self.t_m is not None else int(np.ceil(0.8 * self.steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["opt_window"] = list(self.opt_window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "opt_window" in d:
            d = dict(d)
            d["opt_window"] = tuple(d["opt_window"])
        return cls(**d)

    def merged(self, overrides: dict) -> "PipelineConfig":
        base = self.to_dict()
        base.update({k: v for k, v in overrides.items() if v is not None})
        return PipelineConfig.from_dict(base)

    @property
    def flags(self) -> dict:
        return {
            "CF": self.color_fill,
            "AG": self.attention_guidance,
            "LoRA": self.lora,
            "LR": self.latent_resize,
            "LTG": self.local_text_guidance,
            "noise_fill": self.noise_fill,
            "masked_l2": self.masked_l2,
        }


@dataclass
class EditRequest:
    source_image: np.ndarray              # (H, W, 3) float in [0, 1]
    visible_mask: np.ndarray              # (H, W) binary
    target_xy: tuple[int, int]            # pixel point, x right / y down
    category: str
    prompt_override: Optional[str] = None

    def validate(self) -> None:
        img = self.source_image
        m = self.visible_mask
        if img.ndim != 3 or img.shape[2] != 3:
            raise ContractError(f"source image must be (H, W, 3), got {img.shape}")
        if m.shape != img.shape[:2]:
            raise ContractError("mask dims must equal image dims")
        if not np.all(np.isin(np.unique(m), (0, 1))):
            raise ContractError("mask must be binary")
        if m.sum() == 0:
            raise ContractError("mask is empty")
        x, y = self.target_xy
        if not (0 <= x < img.shape[1] and 0 <= y < img.shape[0]):
            raise ContractError(f"target point {self.target_xy} outside image")
        if not self.category.strip():
            raise ContractError("category must be non-empty")

    def prompt(self) -> str:
        return self.prompt_override or PROMPT_TEMPLATE.format(category=self.category)


@dataclass
class EditResult:
    edited_image: np.ndarray
    completed_object: CompletedObject
    manifest: dict
    artifact_dir: Optional[Path]


@dataclass
class _Normalization:
    original_dims: tuple[int, int]
    scaled_dims: tuple[int, int]
    identity: bool

    def to_dict(self) -> dict:
        return {
            "original_dims": list(self.original_dims),
            "scaled_dims": list(self.scaled_dims),
            "identity": self.identity,
        }


def _normalize_inputs(image: np.ndarray, mask: np.ndarray, target_xy: tuple[int, int],
                      native: int) -> tuple[np.ndarray, Mask, tuple[int, int], _Normalization]:
    """Long side to native, edge-pad to square; the inverse is applied on output."""
    h, w = image.shape[:2]
    if (h, w) == (native, native):
        return image, Mask(mask, PIXEL), (target_xy[1], target_xy[0]), _Normalization(
            (h, w), (native, native), True)
    scale = native / max(h, w)
    nh = max(8, int(round(h * scale)))
    nw = max(8, int(round(w * scale)))
    chw = np.ascontiguousarray(image.transpose(2, 0, 1))
    scaled = kernels.bilinear_resize(chw, nh, nw).transpose(1, 2, 0)
    mfield = kernels.bilinear_resize(
        np.ascontiguousarray(mask[None].astype(np.float64)), nh, nw)[0]
    mgrid = (mfield >= 0.5).astype(np.uint8)
    img = np.pad(scaled, ((0, native - nh), (0, native - nw), (0, 0)), mode="edge")
    grid = np.pad(mgrid, ((0, native - nh), (0, native - nw)), mode="constant")
    gx = min(int(round(target_xy[0] * scale)), nw - 1)
    gy = min(int(round(target_xy[1] * scale)), nh - 1)
    return np.clip(img, 0.0, 1.0), Mask(grid, PIXEL), (gy, gx), _Normalization(
        (h, w), (nh, nw), False)


def _denormalize_image(img: np.ndarray, norm: _Normalization) -> np.ndarray:
    if norm.identity:
        return img
    nh, nw = norm.scaled_dims
    oh, ow = norm.original_dims
    cropped = img[:nh, :nw]
    chw = np.ascontiguousarray(cropped.transpose(2, 0, 1))
    return np.clip(kernels.bilinear_resize(chw, oh, ow).transpose(1, 2, 0), 0.0, 1.0)


def ddim_reconstruct(backbone: Backbone, cache: InversionCache,
                     cond: Optional[TextEmbedding]) -> np.ndarray:
    """Plain conditional DDIM sampling from the inversion endpoint."""
    schedule = cache.schedule
    z = cache.latent(schedule.total_steps).copy()
    for t in range(schedule.total_steps, 0, -1):
        pred = backbone.predict_noise(z, int(schedule.step_indices[t]), cond)
        z = ddim_step(z, pred.epsilon, t, schedule)
    return z


class _Progress:
    def __init__(self, sink: Optional[ProgressSink], total: int):
        self.sink = sink
        self.total = total
        self.done = 0

    def step(self, label: str) -> None:
        self.done += 1
        if self.sink is not None:
            self.sink(label, self.done, self.total)


def run_edit(
    request: EditRequest,
    config: PipelineConfig,
    progress_sink: Optional[ProgressSink] = None,
    out_dir: Optional[str | Path] = None,
    backbone: Optional[Backbone] = None,
) -> EditResult:
    """Execute the full edit and persist the artifact directory.

    Every sub-error is re-raised as a StageError naming the failing stage;
    partial artifacts already written stay on disk for debugging.
    """
    t_start = time.time()
    stage = "validate"
    seeds = {
        "root": config.seed,
        "noise_fill": derive_seed(config.seed, "noise-fill"),
        "deocc": derive_seed(config.seed, "deocc"),
        "lora": derive_seed(config.seed, "lora"),
    }
    stages_done: list[str] = []
    artifact_dir: Optional[Path] = None
    try:
        request.validate()
        # snap to PNG precision so the persisted source is the canonical input
        # and a replay from the manifest reproduces the run exactly
        request = EditRequest(
            source_image=np.rint(np.clip(request.source_image, 0.0, 1.0) * 255.0) / 255.0,
            visible_mask=request.visible_mask,
            target_xy=request.target_xy,
            category=request.category,
            prompt_override=request.prompt_override,
        )
        if out_dir is not None:
            # inputs go down first so failed runs keep debuggable artifacts
            artifact_dir = Path(out_dir)
            artifact_dir.mkdir(parents=True, exist_ok=True)
            save_image(np.asarray(request.source_image, dtype=np.float64),
                       artifact_dir / "source.png")
            save_mask(np.asarray(request.visible_mask, dtype=np.uint8),
                      artifact_dir / "mask.png")
        stages_done.append(stage)

        stage = "backbone"
        bb = backbone or make_backbone(config.backbone, seed=config.backbone_seed,
                                       checkpoint=config.checkpoint)
        stages_done.append(stage)

        stage = "normalize"
        image, mask512, g_rowcol, norm = _normalize_inputs(
            np.asarray(request.source_image, dtype=np.float64),
            np.asarray(request.visible_mask),
            request.target_xy, bb.native_side)
        stages_done.append(stage)

        stage = "prompt"
        prompt = request.prompt()
        cond = bb.embed_prompt(prompt)
        span = cond.span_for(request.category)
        if span is None:
            raise ConfigError(
                f"category {request.category!r} not found in prompt {prompt!r}")
        stages_done.append(stage)

        stage = "schedule"
        schedule = bb.make_schedule(config.steps)
        T = schedule.total_steps
        stages_done.append(stage)

        stage = "prepare_input"
        crop_img, mv_crop, frame = prepare_input(
            image, mask512, config.relax, bb.native_side, bb.latent_downsample)
        stages_done.append(stage)

        stage = "lora"
        adapter: Optional[LoRAAdapter] = None
        z_bar_s = bb.encode_image(crop_img)
        if config.lora and config.lora_steps > 0:
            adapter = finetune_lora(
                bb, z_bar_s, mv_crop, cond, schedule,
                steps=config.lora_steps, rank=config.lora_rank,
                lr=config.lora_lr, seed=seeds["lora"], scale=config.lora_scale)
        stages_done.append(stage)

        stage = "invert_crop"
        with bb.lora(adapter):
            cache_crop = ddim_invert(bb, z_bar_s, cond, schedule, capture_kv=False)
        stages_done.append(stage)

        stage = "invert_full"
        z0_full = bb.encode_image(image)
        cache_full = ddim_invert(bb, z0_full, cond, schedule, capture_kv=True)
        stages_done.append(stage)

        stage = "branches"
        mv_lat = mask512.to_latent(bb.latent_downsample)
        box = make_target_box(g_rowcol, frame.side, bb.native_latent_side,
                              bb.latent_downsample)
        q_mask = box.mask()
        deocc_cfg = DeoccConfig(
            t_m=config.resolved_t_m, refine_power=config.refine_power,
            color_fill=config.color_fill,
            attention_guidance=config.attention_guidance,
            seed=seeds["deocc"])
        branch = DeoccBranch(bb, cache_crop, mv_crop, cond, span, schedule,
                             deocc_cfg, adapter)
        move_cfg = MoveConfig(
            target=g_rowcol, crop_side_latent=box.side,
            gamma=config.gamma, omega=config.omega, opt_iters=config.opt_iters,
            opt_window=config.opt_window,
            local_text_guidance=config.local_text_guidance,
            latent_resize=config.latent_resize,
            background_guidance=config.attention_guidance,
            masked_l2=config.masked_l2)
        ctx = MovementContext(
            backbone=bb, cache=cache_full, cond=cond, schedule=schedule,
            codec=bb.codec, cfg=move_cfg, box=box, q_mask=q_mask, visible=mv_lat)

        if config.noise_fill:
            z = noise_fill_init(cache_full.latent(T), mv_lat, seeds["noise_fill"])
        else:
            z = cache_full.latent(T).copy()

        deocc_iter = branch.steps()
        first = next(deocc_iter)          # init output at the de-occlusion start index
        refined_maps = [first.refined]
        progress = _Progress(progress_sink, total=(branch.start + 1) + T)
        progress.step("deocc")
        for t_out in range(T - 1, -1, -1):
            if t_out > branch.start:
                deocc_out = replace(first, timestep=t_out)  # stand-in above start
            elif t_out == branch.start:
                deocc_out = first
            else:
                deocc_out = next(deocc_iter)
                refined_maps.append(deocc_out.refined)
                progress.step("deocc")
            z = run_step(ctx, t_out, z, deocc_out)
            progress.step("move")
        completed = branch.complete(frame)
        stages_done.append(stage)

        stage = "decode"
        edited512 = bb.decode_latent(z)
        edited = _denormalize_image(edited512, norm)
        stages_done.append(stage)

        stage = "persist"
        manifest = {
            "package": "occlumove",
            "version": _pkg_version,
            "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "backbone": {
                "kind": config.backbone,
                "fingerprint": bb.fingerprint(),
                "seed": config.backbone_seed,
                "checkpoint": config.checkpoint,
            },
            "config": config.to_dict(),
            "flags": config.flags,
            "request": {
                "target_xy": list(request.target_xy),
                "category": request.category,
                "prompt": prompt,
                "prompt_override": request.prompt_override,
                "image": "source.png",
                "mask": "mask.png",
            },
            "seeds": seeds,
            "schedule": schedule.to_dict(),
            "normalize": norm.to_dict(),
            "frame": frame.to_dict(),
            "target_box": box.to_dict(),
            "deocc": branch.meta,
            "kernel_backend": kernels.active_backend(),
            "stages": stages_done + [stage],
            "wall_seconds": None,
            "artifacts": {},
        }
        if artifact_dir is not None:
            save_image(edited, artifact_dir / "edited.png")
            np.save(artifact_dir / "edited_latent.npy", z)
            save_image(completed.image, artifact_dir / "completed_object.png")
            save_mask(completed.amodal_mask, artifact_dir / "amodal_mask.png")
            save_image(crop_img, artifact_dir / "crop_input.png")
            save_mask(Mask(resize_mask_grid(q_mask.grid, bb.native_side), PIXEL),
                      artifact_dir / "q_mask.png")
            export_refined_series(refined_maps, artifact_dir / "refined_maps")
            if adapter is not None:
                adapter.save(artifact_dir / "lora.npz")
            with open(artifact_dir / "loss_trace.csv", "w", newline="") as f:
                wr = csv.writer(f)
                wr.writerow(["timestep", "iter", "loss"])
                wr.writerows(ctx.loss_rows)
            manifest["wall_seconds"] = time.time() - t_start
            for name in ("source.png", "mask.png", "edited.png", "edited_latent.npy",
                         "completed_object.png", "amodal_mask.png", "crop_input.png",
                         "q_mask.png", "loss_trace.csv"):
                manifest["artifacts"][name] = {
                    "file": name, "sha256": sha256_file(artifact_dir / name)}
            if adapter is not None:
                manifest["artifacts"]["lora.npz"] = {
                    "file": "lora.npz", "sha256": sha256_file(artifact_dir / "lora.npz")}
            (artifact_dir / "manifest.json").write_text(
                json.dumps(manifest, indent=2, sort_keys=True))
        else:
            manifest["wall_seconds"] = time.time() - t_start

        return EditResult(
            edited_image=edited,
            completed_object=completed,
            manifest=manifest,
            artifact_dir=artifact_dir,
        )
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc


def replay_manifest(manifest_path: str | Path,
                    out_dir: Optional[str | Path] = None) -> EditResult:
    """Re-run an edit from its persisted manifest + input artifacts."""
    from .imgio import load_image, load_mask

    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    req = manifest["request"]
    request = EditRequest(
        source_image=load_image(base / req["image"]),
        visible_mask=load_mask(base / req["mask"]).grid,
        target_xy=tuple(req["target_xy"]),
        category=req["category"],
        prompt_override=req.get("prompt_override"),
    )
    config = PipelineConfig.from_dict(manifest["config"])
    return run_edit(request, config, out_dir=out_dir)
