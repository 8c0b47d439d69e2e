"""Image files and resampling.

The canonical on-disk format is binary netpbm: ``P6`` for RGB (``.ppm``) and
``P5`` for single-channel images and edge maps (``.pgm``), maxval 255::

    P6\\n<width> <height>\\n255\\n<height*width*3 bytes, row-major RGB>

Pixels are stored as ``round(v * 255)`` and read back as ``byte / 255``.
PNG/JPEG input is accepted through Pillow when it is installed.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pnm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot encode image of shape {image.shape}")
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + to_bytes(image).tobytes()


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    toks, pos = [], 0
    while len(toks) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        toks.append(data[start:pos])
    return toks, pos + 1  # one whitespace byte ends the header


def decode_pnm(data: bytes) -> np.ndarray:
    toks, pos = _tokens(data, 4)
    magic, w, h, maxval = toks[0], int(toks[1]), int(toks[2]), int(toks[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ImageFormatError(f"unsupported netpbm variant {magic!r} maxval {maxval}")
    c = 3 if magic == b"P6" else 1
    body = data[pos : pos + w * h * c]
    if len(body) != w * h * c:
        raise ImageFormatError("truncated pixel data")
    return (np.frombuffer(body, np.uint8).reshape(h, w, c).astype(np.float32) / 255.0)


def load_image(path) -> np.ndarray:
    """Read an image as float32 HWC in [0, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ImageFormatError(f"{path}: {e.strerror or e}") from e
    try:
        if data[:2] in (b"P5", b"P6"):
            return decode_pnm(data)
        return _load_with_pillow(path)
    except (ImageFormatError, ValueError, OSError) as e:
        raise ImageFormatError(f"{path}: {e}") from e


def _load_with_pillow(path: Path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as e:  # pragma: no cover - Pillow is optional
        raise ImageFormatError("not a netpbm file and Pillow is not installed") from e
    with Image.open(path) as im:
        im = im.convert("L" if im.mode in ("1", "L", "I", "F") else "RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[:, :, None] if arr.ndim == 2 else arr


def save_image(image: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_pnm(image))
    os.replace(tmp, path)


def resize(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resample to ``target x target`` (half-pixel centres, edge clamp)."""
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    image = np.asarray(image, dtype=np.float32)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    h, w = image.shape[:2]
    if (h, w) == (target, target):
        return image[:, :, 0].copy() if squeeze else image.copy()

    def axis(n_in):
        src = (np.arange(target) + 0.5) * (n_in / target) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    rows = image[y0] * (1 - fy)[:, None, None] + image[y1] * fy[:, None, None]
    out = rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return out[:, :, 0] if squeeze else out
