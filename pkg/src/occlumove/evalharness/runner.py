"""Dataset -> pipeline -> metrics wiring for the `eval` subcommand."""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from ..imgio import load_image, load_mask
from ..pipeline import EditRequest, PipelineConfig, run_edit
from .dataset import SampleRecord, decode_rle, load_manifest
from .embedders import make_embedder
from .metrics import (
    MetricReport,
    clip_t,
    clip_tp,
    composite_on_white,
    dino_op,
    dino_tp,
    kid,
)

log = logging.getLogger(__name__)


def _record_mask(record_path: Optional[str], rle: Optional[dict]) -> Optional[np.ndarray]:
    if record_path:
        return load_mask(record_path).grid
    if rle:
        return decode_rle(rle)
    return None


def _clamped_box(center_rc: tuple[int, int], side: int, h: int, w: int):
    side = min(side, h, w)
    r0 = min(max(center_rc[0] - side // 2, 0), h - side)
    c0 = min(max(center_rc[1] - side // 2, 0), w - side)
    return (r0, c0, side)


def _mask_center(grid: np.ndarray) -> tuple[int, int]:
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    return (int((rows[0] + rows[-1] + 1) // 2), int((cols[0] + cols[-1] + 1) // 2))


def run_evaluation(dataset_path: str | Path, out_dir: str | Path,
                   config: PipelineConfig, embedder_kind: str = "stub",
                   embedder_seed: int = 0, limit: Optional[int] = None) -> MetricReport:
    """Run the edit pipeline over every (sample, target) case and score it."""
    records = load_manifest(dataset_path)
    embedder = make_embedder(embedder_kind, seed=embedder_seed)
    cfg_fp = hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    report = MetricReport(
        embedder_fingerprints={"image": embedder.fingerprint,
                               "image_text": embedder.fingerprint},
        config_fingerprint=cfg_fp,
    )
    out = Path(out_dir)

    completed_objects: list[np.ndarray] = []
    gt_objects: list[np.ndarray] = []
    completed_prompts: list[str] = []

    n_cases = 0
    for record in records:
        image = load_image(record.image_path)
        visible = _record_mask(record.visible_mask_path, record.visible_rle)
        amodal = _record_mask(record.amodal_mask_path, record.amodal_rle)
        h, w = image.shape[:2]
        orig_box = _clamped_box(_mask_center(visible), record.box_side, h, w)
        for t_idx, (gx, gy) in enumerate(record.target_points):
            if limit is not None and n_cases >= limit:
                break
            n_cases += 1
            case_id = f"{record.sample_id}/t{t_idx}"
            request = EditRequest(source_image=image, visible_mask=visible,
                                  target_xy=(gx, gy), category=record.category)
            result = run_edit(request, config, out_dir=out / "runs" / case_id.replace("/", "_"))
            edited = result.edited_image
            target_box = _clamped_box((gy, gx), record.box_side, h, w)
            values = {
                "dino_op": dino_op(image, edited, orig_box, embedder),
                "dino_tp": dino_tp(image, edited, orig_box, target_box, embedder),
                "clip_tp": clip_tp(image, edited, orig_box, target_box, embedder),
            }
            report.add(case_id, values)
            if t_idx == 0:
                comp = result.completed_object
                completed_objects.append(
                    composite_on_white(comp.image, comp.amodal_mask.grid))
                completed_prompts.append(record.prompt)
                if amodal is not None:
                    gt_objects.append(composite_on_white(image, amodal))
        if limit is not None and n_cases >= limit:
            break

    if completed_objects:
        report.extra["clip_t"] = clip_t(completed_objects, completed_prompts, embedder)
        if len(gt_objects) >= 2 and len(completed_objects) >= 2:
            report.extra["kid"] = kid(completed_objects, gt_objects, embedder)
    report.write(out)
    return report
