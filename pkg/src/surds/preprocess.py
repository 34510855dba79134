"""Signature image preprocessing: binarize, crop, resize/normalize, patchify.

Images are handled as numpy arrays. Raw images are 2-D float arrays in [0, 1]
(0 = black ink, 1 = white paper). Processed images are ``(S, S, 3)`` float32
arrays in [-1, 1], with ``S = 256`` by default.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from skimage.filters import threshold_otsu

from .errors import AllBackground, ShapeMismatch

IMAGE_SIZE = 256
GRID = 4  # patches per side


def load_raw(path: str | Path) -> np.ndarray:
    """Decode any PIL-readable raster (PNG, TIFF, ...) to grayscale in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return np.clip(arr / arr.max() if arr.max() > 0 else arr, 0.0, 1.0)
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def _check_raw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ShapeMismatch(f"expected a nonempty 2-D grayscale image, got shape {img.shape}")
    return img


def binarize(img: np.ndarray) -> np.ndarray:
    """Otsu foreground mask; True marks ink (the darker population)."""
    img = _check_raw(img)
    lo, hi = float(img.min()), float(img.max())
    if lo == hi:
        # no contrast: a flat dark page is all ink, a flat light one has none
        mask = np.full(img.shape, lo < 0.5)
    else:
        mask = img <= threshold_otsu(img)
    if not mask.any():
        raise AllBackground("no ink pixels found")
    return mask


def _require_ink(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeMismatch(f"mask must be 2-D, got shape {mask.shape}")
    if not mask.any():
        raise AllBackground("mask has no foreground bits")
    return mask


def center_of_mass(mask: np.ndarray) -> tuple[float, float]:
    mask = _require_ink(mask)
    rows, cols = np.nonzero(mask)
    return float(rows.mean()), float(cols.mean())


def crop_bounds(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Inclusive ``(r0, r1, c0, c1)`` bounding box of the foreground."""
    mask = _require_ink(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def tight_crop(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Crop ``img`` to the bounding box of the ink in ``mask``.

    The box is global rather than found by walking out from the center of
    mass along two axes, so strokes away from those axes are never cut off.
    """
    img = np.asarray(img)
    if np.shape(mask) != img.shape[:2]:
        raise ShapeMismatch(f"mask shape {np.shape(mask)} != image shape {img.shape[:2]}")
    r0, r1, c0, c1 = crop_bounds(mask)
    return img[r0:r1 + 1, c0:c1 + 1]


def resize_normalize(img: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize to ``size x size``, replicate to 3 channels, map to [-1, 1]."""
    img = _check_raw(img)
    t = torch.from_numpy(img)[None, None]
    if img.shape != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    gray = t[0, 0].numpy()
    out = (gray - 0.5) / 0.5
    return np.repeat(out[:, :, None], 3, axis=2).astype(np.float32)


def patchify(img: np.ndarray, size: int = IMAGE_SIZE, grid: int = GRID) -> np.ndarray:
    """Split an ``(S, S, 3)`` image into ``grid**2`` row-major patches.

    Returns an array of shape ``(grid*grid, S/grid, S/grid, 3)``; patch
    ``k = grid*r + c`` covers rows ``[p*r, p*r + p)`` and cols ``[p*c, p*c + p)``.
    """
    img = np.asarray(img)
    if img.shape != (size, size, 3):
        raise ShapeMismatch(f"expected ({size}, {size}, 3), got {img.shape}")
    if size % grid:
        raise ShapeMismatch(f"size {size} not divisible by grid {grid}")
    p = size // grid
    return img.reshape(grid, p, grid, p, 3).transpose(0, 2, 1, 3, 4).reshape(grid * grid, p, p, 3).copy()


def unpatchify(patches: np.ndarray) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    n, p, _, ch = patches.shape
    grid = int(round(n ** 0.5))
    if grid * grid != n:
        raise ShapeMismatch(f"{n} patches do not form a square grid")
    return patches.reshape(grid, grid, p, p, ch).transpose(0, 2, 1, 3, 4).reshape(grid * p, grid * p, ch)


def preprocess(img: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Raw grayscale image to a processed ``(size, size, 3)`` image."""
    img = _check_raw(img)
    return resize_normalize(tight_crop(img, binarize(img)), size)


def preprocess_file(path: str | Path, size: int = IMAGE_SIZE,
                    cache_dir: str | Path | None = None,
                    rel: str | Path | None = None) -> np.ndarray:
    """Load and preprocess one file, optionally through an on-disk ``.npy`` cache.

    Cache files live at ``cache_dir / f"{rel}.{size}.npy"``, mirroring the
    manifest-relative path ``rel``.
    """
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / f"{rel if rel is not None else Path(path).name}.{size}.npy"
        if cache.exists():
            return np.load(cache)
    out = preprocess(load_raw(path), size)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.save(cache, out)
    return out
