"""8-bit image I/O. Arrays are float64 [C, H, W] in [0, 1].

Binary PGM (P5) and PPM (P6) are parsed directly; PNG goes through Pillow.
"""

from __future__ import annotations

import io
import os
import re

import numpy as np


class ImageFormatError(ValueError):
    pass


NETPBM_EXT = {".pgm", ".ppm", ".pnm"}
SUPPORTED_EXT = NETPBM_EXT | {".png"}

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                     rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def quantize(img: np.ndarray) -> np.ndarray:
    """[0,1] floats -> uint8 with round-half-up and clamping."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _read_netpbm(raw: bytes, path: str) -> np.ndarray:
    m = _HEADER.match(raw)
    if not m:
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit (maxval 255) supported, got {maxval}")
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    body = raw[m.end():]
    if len(body) < need:
        raise ImageFormatError(f"{path}: truncated ({len(body)} of {need} pixel bytes)")
    arr = np.frombuffer(body[:need], dtype=np.uint8).reshape(h, w, c)
    return arr.transpose(2, 0, 1)


def load_image(path: str | os.PathLike) -> np.ndarray:
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext not in SUPPORTED_EXT:
        raise ImageFormatError(f"{path}: unsupported image format {ext!r}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if ext in NETPBM_EXT:
        arr = _read_netpbm(raw, path)
    else:
        from PIL import Image
        try:
            im = Image.open(io.BytesIO(raw))
            im.load()
        except Exception as e:  # Pillow raises a variety of types on corrupt data
            raise ImageFormatError(f"{path}: cannot decode PNG ({e})") from e
        if im.mode in ("1", "LA"):
            im = im.convert("L")
        elif im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        a = np.asarray(im, dtype=np.uint8)
        arr = a[None] if a.ndim == 2 else a.transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    path = os.fspath(path)
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected [C,H,W] with C in (1,3), got {img.shape}")
    q = quantize(img)
    c, h, w = q.shape
    ext = os.path.splitext(path)[1].lower()
    if ext in NETPBM_EXT:
        magic = b"P5" if c == 1 else b"P6"
        if ext == ".pgm" and c != 1 or ext == ".ppm" and c != 3:
            raise ImageFormatError(f"{path}: {c}-channel image does not fit {ext}")
        with open(path, "wb") as fh:
            fh.write(magic + b"\n%d %d\n255\n" % (w, h))
            fh.write(q.transpose(1, 2, 0).tobytes())
    elif ext == ".png":
        from PIL import Image
        Image.fromarray(q[0] if c == 1 else q.transpose(1, 2, 0)).save(path)
    else:
        raise ImageFormatError(f"{path}: unsupported image format {ext!r}")
