"""Evaluation dataset: filter occluded objects, draw seeded target positions.

Annotation input is a COCOA-style JSON dict: ``images`` (id, file_name,
width, height) and ``annotations`` (image_id, category, ``visible`` and
optional ``amodal`` mask specs). Mask specs may be file paths, COCO RLE
(uncompressed counts list or compressed counts string, column-major) or
polygon lists.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import ContractError
from ..pipeline import PROMPT_TEMPLATE
from ..seeding import rng_for

log = logging.getLogger(__name__)

TARGETS_PER_SAMPLE = 8


@dataclass
class FilterConfig:
    """"Considerable size" thresholds; the source protocol leaves them free."""

    min_visible_frac: float = 0.01    # visible area / image area
    min_occluded_frac: float = 0.10   # 1 - visible / amodal
    relax: float = 1.3                # crop-box relax ratio for the target box side
    max_draw_attempts: int = 200


@dataclass
class SampleRecord:
    sample_id: str
    image_path: str
    category: str
    prompt: str
    visible_mask_path: Optional[str] = None
    visible_rle: Optional[dict] = None
    amodal_mask_path: Optional[str] = None
    amodal_rle: Optional[dict] = None
    box_side: int = 0
    target_points: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.target_points and len(self.target_points) != TARGETS_PER_SAMPLE:
            raise ContractError(
                f"sample {self.sample_id} must carry exactly {TARGETS_PER_SAMPLE} targets")

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["target_points"] = [list(p) for p in self.target_points]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        d = json.loads(line)
        d["target_points"] = [tuple(p) for p in d["target_points"]]
        return cls(**d)


def decode_rle(rle: dict) -> np.ndarray:
    """COCO run-length mask (column-major), counts list or compressed string."""
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, str):
        counts = _decompress_rle_string(counts)
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    val = 0
    for run in counts:
        if val:
            flat[pos:pos + run] = 1
        pos += run
        val ^= 1
    return flat.reshape((w, h)).T


def _decompress_rle_string(s: str) -> list[int]:
    """The LEB128-style char encoding used for compressed COCO counts."""
    counts: list[int] = []
    i = 0
    while i < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[i]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            i += 1
            k += 1
        if x & (1 << (5 * k - 1)):
            x -= 1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def polygon_to_mask(polygons: list[list[float]], height: int, width: int) -> np.ndarray:
    from PIL import Image, ImageDraw

    img = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(img)
    for poly in polygons:
        pts = [(poly[i], poly[i + 1]) for i in range(0, len(poly), 2)]
        draw.polygon(pts, outline=1, fill=1)
    return np.asarray(img, dtype=np.uint8)


def _mask_from_spec(spec, height: int, width: int, base: Path) -> Optional[np.ndarray]:
    if spec is None:
        return None
    if isinstance(spec, str) or "png" in spec:
        path = base / (spec if isinstance(spec, str) else spec["png"])
        from ..imgio import load_mask

        return load_mask(path).grid
    if "rle" in spec:
        return decode_rle(spec["rle"])
    if "polygon" in spec:
        return polygon_to_mask(spec["polygon"], height, width)
    raise ContractError(f"unknown mask spec {sorted(spec)}")


def _tight_square_side(grid: np.ndarray) -> int:
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    return int(max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1))


def build_dataset(annotations: dict, filters: FilterConfig, seed: int,
                  base_dir: str | Path = ".") -> list[SampleRecord]:
    """Filter to occluded objects of considerable size and draw 8 seeded
    target positions per retained sample whose boxes fit inside the image."""
    base = Path(base_dir)
    images = {img["id"]: img for img in annotations["images"]}
    records: list[SampleRecord] = []
    for ann in annotations["annotations"]:
        img = images[ann["image_id"]]
        h, w = img["height"], img["width"]
        visible = _mask_from_spec(ann.get("visible"), h, w, base)
        if visible is None or visible.sum() == 0:
            log.info("annotation %s dropped: no visible mask", ann.get("id"))
            continue
        amodal = _mask_from_spec(ann.get("amodal"), h, w, base)
        vis_area = float(visible.sum())
        if vis_area < filters.min_visible_frac * h * w:
            log.info("annotation %s dropped: visible area too small", ann.get("id"))
            continue
        occluded_frac = 0.0
        if amodal is not None and amodal.sum() > 0:
            occluded_frac = 1.0 - vis_area / float(np.maximum(amodal, visible).sum())
        if occluded_frac < filters.min_occluded_frac:
            log.info("annotation %s dropped: occlusion %0.3f below threshold",
                     ann.get("id"), occluded_frac)
            continue

        side = int(round(filters.relax * _tight_square_side(visible)))
        rng = rng_for(seed, "targets", img["id"], ann.get("id", 0))
        points: list[tuple[int, int]] = []
        attempts = 0
        while len(points) < TARGETS_PER_SAMPLE and attempts < filters.max_draw_attempts:
            attempts += 1
            x = int(rng.integers(0, w))
            y = int(rng.integers(0, h))
            if (x - side // 2 >= 0 and x - side // 2 + side <= w
                    and y - side // 2 >= 0 and y - side // 2 + side <= h):
                points.append((x, y))
        if len(points) < TARGETS_PER_SAMPLE:
            log.warning("annotation %s dropped: no valid target positions (side %d)",
                        ann.get("id"), side)
            continue

        category = ann["category"]
        vspec = ann.get("visible")
        aspec = ann.get("amodal")
        records.append(SampleRecord(
            sample_id=f"{img['id']}-{ann.get('id', len(records))}",
            image_path=str(base / img["file_name"]),
            category=category,
            prompt=PROMPT_TEMPLATE.format(category=category),
            visible_mask_path=(str(base / (vspec if isinstance(vspec, str) else vspec.get("png")))
                               if (isinstance(vspec, str) or "png" in vspec) else None),
            visible_rle=vspec.get("rle") if isinstance(vspec, dict) else None,
            amodal_mask_path=(str(base / (aspec if isinstance(aspec, str) else aspec.get("png")))
                              if aspec is not None and (isinstance(aspec, str) or "png" in aspec)
                              else None),
            amodal_rle=aspec.get("rle") if isinstance(aspec, dict) else None,
            box_side=side,
            target_points=points,
        ))
    return records


def save_manifest(records: list[SampleRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(r.to_json() for r in records) + "\n")
    return path


def load_manifest(path: str | Path) -> list[SampleRecord]:
    lines = Path(path).read_text().strip().splitlines()
    return [SampleRecord.from_json(line) for line in lines if line.strip()]
