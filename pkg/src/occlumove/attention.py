"""Attention map capture, aggregation, refinement and injection directives.

The refinement chain: average the per-layer maps at a common resolution,
pull out the target token's column(s), then propagate activations through
powers of the averaged self-attention matrix. The resulting map doubles as
the progressive shape estimate of the de-occlusion branch and as the soft
object weight in the movement loss.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy.ndimage import binary_dilation

from . import kernels
from .errors import ContractError, ShapeError
from .masks import Mask

if TYPE_CHECKING:  # pragma: no cover
    from .latent import InversionCache

log = logging.getLogger(__name__)

RESTRICT_SELF = "restrict_self_attention"
REPLACE_KV = "replace_kv"

STOCHASTIC_TOL = 1e-5


@dataclass
class AttentionSnapshot:
    """Per-layer softmaxed attention maps captured during one forward pass."""

    cross: dict[str, np.ndarray] = field(default_factory=dict)
    self_attn: dict[str, np.ndarray] = field(default_factory=dict)
    resolutions: dict[str, int] = field(default_factory=dict)
    head_dim: int = 0

    def layers(self) -> tuple[str, ...]:
        return tuple(self.self_attn.keys())

    def validate(self, tol: float = STOCHASTIC_TOL) -> None:
        for name, maps in (("cross", self.cross), ("self", self.self_attn)):
            for layer, m in maps.items():
                if np.any(m < 0):
                    raise ContractError(f"{name} map {layer} has negative entries")
                rs = m.sum(axis=1)
                if np.max(np.abs(rs - 1.0)) > tol:
                    raise ContractError(f"{name} map {layer} rows do not sum to 1")


@dataclass
class RefinedMap:
    """Max-normalized object-activation map at the attention resolution."""

    grid: np.ndarray
    token_span: tuple[int, int]
    timestep: int

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ShapeError(f"refined map must be square, got {g.shape}")
        if np.any(g < 0) or np.any(g > 1.0 + 1e-12):
            raise ContractError("refined map values must lie in [0, 1]")
        object.__setattr__(self, "grid", g)

    @property
    def resolution(self) -> int:
        return self.grid.shape[0]

    def binarize(self, threshold: float = 0.5, dilate: int = 1) -> np.ndarray:
        """Threshold against the map maximum, then dilate to stabilize ragged
        early-step estimates."""
        peak = self.grid.max()
        if peak <= 0:
            return np.zeros_like(self.grid, dtype=np.uint8)
        binary = self.grid >= threshold * peak
        if dilate > 0:
            binary = binary_dilation(binary, iterations=dilate)
        return binary.astype(np.uint8)

    @classmethod
    def from_mask(cls, mask: Mask, resolution: int, timestep: int,
                  token_span: tuple[int, int] = (0, 0)) -> "RefinedMap":
        grid = mask.resize(resolution).grid.astype(np.float64)
        return cls(grid, token_span, timestep)


@dataclass
class InjectionDirective:
    """One attention-injection instruction, consumed inside predict_noise."""

    kind: str
    map: Optional[RefinedMap] = None
    mask: Optional[Mask] = None
    kv_source: Optional["InversionCache"] = None
    step: Optional[int] = None
    layers: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.kind == RESTRICT_SELF:
            if self.map is None or self.kv_source is not None:
                raise ContractError("restriction directive carries a map and no kv source")
        elif self.kind == REPLACE_KV:
            if self.kv_source is None or self.step is None or self.map is not None:
                raise ContractError("replace_kv directive carries a cache+step and no map")
        else:
            raise ContractError(f"unknown directive kind {self.kind!r}")

    def applies_to(self, layer_id: str) -> bool:
        return self.layers is None or layer_id in self.layers


def restriction_masks(directive: InjectionDirective, resolution: int
                      ) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Row/column masks for self-attention restriction at ``resolution``.

    Rows in the generation region (outside the visible mask) may only attend
    to columns where the binarized map is on. Returns None for a degenerate
    (all-zero) map, which callers skip with a warning.
    """
    binary = directive.map.binarize()
    if binary.shape[0] != resolution:
        binary = Mask(binary, "latent").resize(resolution).grid
    if binary.sum() == 0:
        warnings.warn("restriction map binarized to all-zero; directive skipped")
        return None
    cols_allowed = binary.reshape(-1).astype(np.uint8)
    if directive.mask is not None:
        visible = directive.mask.resize(resolution).grid.reshape(-1)
        rows_restricted = (visible == 0).astype(np.uint8)
    else:
        rows_restricted = np.ones(resolution * resolution, dtype=np.uint8)
    return rows_restricted, cols_allowed


def background_query_masks(visible: Mask, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column masks steering vacated-region queries toward background keys."""
    grid = visible.resize(resolution).grid.reshape(-1)
    rows_restricted = (grid == 1).astype(np.uint8)
    cols_allowed = (grid == 0).astype(np.uint8)
    return rows_restricted, cols_allowed


def _resample_cross(m: np.ndarray, src_res: int, dst_res: int) -> np.ndarray:
    n_tok = m.shape[1]
    spatial = m.reshape(src_res, src_res, n_tok).transpose(2, 0, 1)
    out = kernels.bilinear_resize(np.ascontiguousarray(spatial), dst_res, dst_res)
    out = out.transpose(1, 2, 0).reshape(dst_res * dst_res, n_tok)
    return _renormalize_rows(out)


def _resample_self(m: np.ndarray, src_res: int, dst_res: int) -> np.ndarray:
    # resample the key axis, then the query axis
    n = src_res * src_res
    keys = m.reshape(n, src_res, src_res)
    keys = kernels.bilinear_resize(np.ascontiguousarray(keys), dst_res, dst_res)
    keys = keys.reshape(n, dst_res * dst_res).T.reshape(dst_res * dst_res, src_res, src_res)
    out = kernels.bilinear_resize(np.ascontiguousarray(keys), dst_res, dst_res)
    out = out.reshape(dst_res * dst_res, dst_res * dst_res).T
    return _renormalize_rows(out)


def _renormalize_rows(m: np.ndarray) -> np.ndarray:
    sums = m.sum(axis=1, keepdims=True)
    sums[sums == 0] = 1.0
    return m / sums


def average_maps(snapshot: AttentionSnapshot, resolution: int = 32
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Arithmetic mean of cross and self maps over layers at one resolution.

    Layers captured at other resolutions are bilinearly resampled (both axes
    for self-attention) and row-renormalized before averaging.
    """
    if not snapshot.self_attn:
        raise ContractError("snapshot holds no attention maps")
    crosses, selfs = [], []
    for layer in snapshot.layers():
        res = snapshot.resolutions[layer]
        c = snapshot.cross[layer]
        s = snapshot.self_attn[layer]
        if res != resolution:
            c = _resample_cross(c, res, resolution)
            s = _resample_self(s, res, resolution)
        crosses.append(c)
        selfs.append(s)
    return np.mean(crosses, axis=0), np.mean(selfs, axis=0)


def select_token_map(avg_cross: np.ndarray, span: tuple[int, int]) -> np.ndarray:
    """Mean of the cross-attention columns covering the target token span."""
    lo, hi = span
    if not (0 <= lo < hi <= avg_cross.shape[1]):
        raise IndexError(f"token span {span} outside column range {avg_cross.shape[1]}")
    return avg_cross[:, lo:hi].mean(axis=1)


def refine(avg_self: np.ndarray, token_map: np.ndarray, power: int, *,
           token_span: tuple[int, int] = (0, 0), timestep: int = 0) -> RefinedMap:
    """Propagate token activations through ``power`` self-attention hops,
    then max-normalize to [0, 1]."""
    if power < 0 or int(power) != power:
        raise ContractError("refinement power must be a non-negative integer")
    v = kernels.matpow_vec(avg_self, token_map.astype(np.float64), int(power))
    res = int(round(np.sqrt(v.shape[0])))
    grid = v.reshape(res, res)
    peak = grid.max()
    if peak > 0:
        grid = grid / peak
    return RefinedMap(np.clip(grid, 0.0, 1.0), token_span, timestep)


def export_snapshot(snapshot: AttentionSnapshot, out_dir: str | Path) -> Path:
    """Persist per-layer maps as an array directory with a JSON index."""
    from .arrayio import save_array_dir

    arrays = {}
    for layer, m in snapshot.cross.items():
        arrays[f"cross/{layer}"] = m
    for layer, m in snapshot.self_attn.items():
        arrays[f"self/{layer}"] = m
    meta = {"resolutions": snapshot.resolutions, "head_dim": snapshot.head_dim}
    return save_array_dir(out_dir, arrays, meta)


def load_snapshot(in_dir: str | Path) -> AttentionSnapshot:
    from .arrayio import load_array_dir

    arrays, meta = load_array_dir(in_dir)
    snap = AttentionSnapshot(head_dim=meta["head_dim"])
    snap.resolutions = {k: int(v) for k, v in meta["resolutions"].items()}
    for name, arr in arrays.items():
        kind, _, layer = name.partition("/")
        if kind == "cross":
            snap.cross[layer] = arr
        else:
            snap.self_attn[layer] = arr
    return snap


def export_refined_series(maps: list[RefinedMap], out_dir: str | Path) -> Path:
    """Write per-step grayscale PNGs plus a JSON time-series manifest."""
    from .imgio import save_gray  # local import; imgio pulls in PIL

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for m in maps:
        name = f"refined_t{m.timestep:04d}.png"
        save_gray(m.grid, out / name)
        entries.append({
            "timestep": m.timestep,
            "file": name,
            "resolution": m.resolution,
            "token_span": list(m.token_span),
            "mean": float(m.grid.mean()),
            "active_fraction": float((m.grid >= 0.5).mean()),
        })
    index = out / "series.json"
    index.write_text(json.dumps({"maps": entries}, indent=2))
    return index
