"""File helpers: atomic writes, PNG encoding of images, masks and heatmaps."""
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _png_bytes(pil_img) -> bytes:
    buf = io.BytesIO()
    # fixed settings and no metadata so encodes are byte-stable
    pil_img.save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray):
    """Write an RGB image with values in [0, 1] as an 8-bit PNG."""
    atomic_write_bytes(path, _png_bytes(PILImage.fromarray(to_uint8(img), mode="RGB")))


def read_image(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def write_mask(path, mask: np.ndarray):
    """Binary mask as 1-bit PNG (nonzero = 1)."""
    pil = PILImage.fromarray(np.asarray(mask).astype(bool))
    atomic_write_bytes(path, _png_bytes(pil))


def read_mask(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from exc
    return (arr > 127).astype(np.uint8)


def write_level_map(path, levels: np.ndarray):
    atomic_write_bytes(path, _png_bytes(PILImage.fromarray(np.asarray(levels, dtype=np.uint8), mode="L")))


def read_level_map(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im).astype(np.int64)


def write_heatmap(path, values: np.ndarray, meta: dict):
    """16-bit grayscale PNG plus a JSON sidecar next to it."""
    q = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 65535.0), 0, 65535).astype(np.uint16)
    pil = PILImage.fromarray(q)
    atomic_write_bytes(path, _png_bytes(pil))
    write_json(Path(path).with_suffix(".json"), meta)


def read_heatmap(path):
    with PILImage.open(path) as im:
        values = np.asarray(im).astype(np.float64) / 65535.0
    return values, read_json(Path(path).with_suffix(".json"))
