"""PNG load/save helpers; images are float64 (H, W, 3) in [0, 1] in memory."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError
from .masks import Mask, PIXEL


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_image(img: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path)
    return path


def save_gray(field: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(field), mode="L").save(path)
    return path


def load_mask(path: str | Path) -> Mask:
    """Single-channel PNG with {0, 255}; anything >= 128 counts as on."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return Mask((arr >= 128).astype(np.uint8), PIXEL)


def save_mask(mask: Mask | np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = mask.grid if isinstance(mask, Mask) else np.asarray(mask)
    Image.fromarray((grid * 255).astype(np.uint8), mode="L").save(path)
    return path


def image_from_bytes(data: bytes) -> np.ndarray:
    import io

    with Image.open(io.BytesIO(data)) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def mask_from_bytes(data: bytes) -> Mask:
    import io

    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("L"))
    return Mask((arr >= 128).astype(np.uint8), PIXEL)


def png_bytes(img: np.ndarray, mode: str = "RGB") -> bytes:
    import io

    buf = io.BytesIO()
    if mode == "L":
        if img.ndim != 2:
            raise ContractError("grayscale export expects a 2D array")
        Image.fromarray(to_uint8(img), mode="L").save(buf, format="PNG")
    else:
        Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()
