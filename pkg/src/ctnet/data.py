"""Patch extraction, dihedral augmentation, AWGN synthesis and manifests.

All randomness comes from Philox generators keyed by integer tuples such as
(seed, image id, patch id), so results do not depend on iteration order.
Gaussian samples use Box-Muller on the generator's uniform stream.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import NoiseSpec
from .imageio import SUPPORTED_EXT, ImageFormatError, load_image

log = logging.getLogger(__name__)


def keyed_rng(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:n].reshape(shape)


def add_awgn(patch: np.ndarray, spec: NoiseSpec, rng: np.random.Generator):
    """Return (noisy, sigma_used); sigma is in 8-bit units."""
    if spec.mode == "blind":
        sigma = float(rng.uniform(spec.sigma_min, spec.sigma_max))
    else:
        sigma = float(spec.sigma)
    if sigma == 0:
        noisy = np.array(patch, dtype=np.float64, copy=True)
    else:
        noisy = patch + box_muller(rng, patch.shape) * (sigma / 255.0)
    if spec.clip:
        noisy = np.clip(noisy, 0.0, 1.0)
    return noisy, sigma


def noisy_batch(clean: np.ndarray, spec: NoiseSpec, *keys: int):
    """Noise every item of ``clean`` with its own stream (spec.seed, *keys, i)."""
    out = np.empty_like(clean)
    sigmas = np.empty(len(clean))
    for i, patch in enumerate(clean):
        out[i], sigmas[i] = add_awgn(patch, spec, keyed_rng(spec.seed, *keys, i))
    return out, sigmas


# -- augmentation --------------------------------------------------------------

def augment(patch: np.ndarray, way: int) -> np.ndarray:
    """One of the eight dihedral transforms of a [C,H,W] patch.

    ``way // 2`` clockwise quarter turns, followed by a vertical flip when
    ``way`` is odd. Way 0 is the identity.
    """
    if not 0 <= way <= 7:
        raise ValueError(f"augmentation way must be in 0..7, got {way}")
    out = np.rot90(patch, k=-(way // 2), axes=(-2, -1))
    if way % 2:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def inverse_way(way: int) -> int:
    if way % 2:
        return way  # flip after rotation is an involution
    return (8 - way) % 8


# -- patches ---------------------------------------------------------------------

def patch_corners(h: int, w: int, size: int, count: int, seed: int, image_id: int = 0) -> np.ndarray:
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    rng = keyed_rng(seed, image_id)
    return np.stack([rng.integers(0, h - size + 1, count), rng.integers(0, w - size + 1, count)], axis=1)


def extract_patches(img: np.ndarray, size: int, count: int, seed: int, image_id: int = 0) -> np.ndarray:
    """Uniformly placed ``size x size`` crops of a [C,H,W] image -> [count, C, size, size]."""
    _, h, w = img.shape
    corners = patch_corners(h, w, size, count, seed, image_id)
    return np.stack([img[:, y:y + size, x:x + size] for y, x in corners])


@dataclass
class PatchDataset:
    clean: np.ndarray  # [P, C, s, s]

    def __len__(self) -> int:
        return len(self.clean)

    @property
    def channels(self) -> int:
        return self.clean.shape[1]

    @classmethod
    def from_images(cls, images, size: int = 48, per_image: int = 108, seed: int = 0) -> PatchDataset:
        patches = [extract_patches(img, size, per_image, seed, i) for i, img in enumerate(images)]
        if not patches:
            raise ValueError("no images to cut patches from")
        return cls(np.concatenate(patches))

    @classmethod
    def from_manifest(cls, entries, size: int = 48, per_image: int = 108, seed: int = 0,
                      channels: int | None = None) -> PatchDataset:
        images = [_as_channels(load_image(e["path"]), channels) for e in entries]
        return cls.from_images(images, size, per_image, seed)


def _as_channels(img: np.ndarray, channels: int | None) -> np.ndarray:
    if channels is None or img.shape[0] == channels:
        return img
    if channels == 1:
        # ITU-R BT.601 luma
        return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
    return np.repeat(img, 3, axis=0)


# -- manifests -------------------------------------------------------------------

def build_manifest(dirs) -> tuple[list[dict], list[str]]:
    """Scan directories for images. Returns (entries, unreadable paths)."""
    paths = set()
    for d in dirs:
        for p in Path(d).iterdir():
            if p.is_file() and p.suffix.lower() in SUPPORTED_EXT:
                paths.add(str(p.resolve()))
    entries, bad = [], []
    for path in sorted(paths):
        try:
            img = load_image(path)
        except (ImageFormatError, OSError) as e:
            log.warning("skipping %s: %s", path, e)
            bad.append(path)
            continue
        c, h, w = img.shape
        entries.append({"path": path, "height": h, "width": w, "channels": c})
    return entries, bad


def manifest_json(entries: list[dict]) -> str:
    return json.dumps(entries, indent=2, sort_keys=True) + "\n"


def write_manifest(entries: list[dict], path) -> None:
    Path(path).write_text(manifest_json(entries))


def read_manifest(path) -> list[dict]:
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list) or any(not isinstance(e, dict) or "path" not in e for e in entries):
        raise ValueError(f"{path}: manifest must be a JSON array of objects with a 'path'")
    return entries


def resolve_dataset(spec: str) -> list[dict]:
    """A manifest file or an image directory -> manifest entries."""
    if os.path.isdir(spec):
        entries, _ = build_manifest([spec])
        return entries
    return read_manifest(spec)


# -- procedural images -----------------------------------------------------------

def synthetic_image(h: int, w: int, channels: int = 1, seed: int = 0) -> np.ndarray:
    """Piecewise-smooth test image on the 8-bit grid: a smooth gradient field
    with a few flat rectangles and discs layered on top."""
    rng = keyed_rng(7919, seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((channels, h, w))
    for c in range(channels):
        a, b, ph = rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 2 * np.pi)
        img[c] = 0.5 + 0.2 * np.sin(2 * np.pi * (a * yy + b * xx) + ph)
    for _ in range(int(rng.integers(3, 7))):
        val = rng.uniform(0, 1, channels)[:, None, None]
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.1, 0.35) * min(h, w)
        if rng.random() < 0.5:
            mask = (np.abs(np.arange(h)[:, None] - cy) < r) & (np.abs(np.arange(w)[None] - cx) < r * 0.7)
        else:
            mask = (np.arange(h)[:, None] - cy) ** 2 + (np.arange(w)[None] - cx) ** 2 < r * r
        img = np.where(mask[None], 0.6 * val + 0.4 * img, img)
    return np.floor(np.clip(img, 0, 1) * 255 + 0.5) / 255.0
