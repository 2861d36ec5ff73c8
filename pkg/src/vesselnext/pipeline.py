"""Fundus data pipeline: the four-step preprocessing chain, random patch
augmentation, and the overlap-crop/stitch geometry used at inference.

All operations here are numpy-level and deterministic given their inputs
and seed; tensors only appear once batches reach the trainer.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio

LUMA = (0.299, 0.587, 0.114)


# ---------------------------------------------------------------------------
# samples and manifests


@dataclass
class FundusSample:
    """One dataset record: image, vessel truth, field-of-view mask."""
    id: str
    image: np.ndarray            # (H, W, 3) or (H, W), uint8
    truth: np.ndarray | None     # (H, W) in {0, 1}
    fov: np.ndarray | None       # (H, W) in {0, 1}

    def __post_init__(self):
        h, w = self.image.shape[:2]
        for name, mask in (("truth", self.truth), ("fov", self.fov)):
            if mask is None:
                continue
            if mask.shape != (h, w):
                raise ValueError(f"{self.id}: {name} shape {mask.shape} != image {h}x{w}")
            if not np.isin(mask, (0, 1)).all():
                raise ValueError(f"{self.id}: {name} must be binary")


def load_manifest(path) -> dict[str, list[FundusSample]]:
    """Read a dataset manifest.

    The manifest is one JSON document with per-split record lists::

        {"train": [{"id": ..., "image": ..., "truth": ..., "fov": ...}], ...}

    Paths resolve relative to the manifest file. A missing "fov" key means
    full field of view; a missing file named by the manifest is an error.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent
    splits: dict[str, list[FundusSample]] = {}
    for split, records in doc.items():
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown manifest split {split!r}")
        samples = []
        for rec in records:
            image = imgio.read_image(base / rec["image"])
            truth = imgio.read_mask(base / rec["truth"]) if "truth" in rec else None
            if "fov" in rec:
                fov = imgio.read_mask(base / rec["fov"])
            else:
                fov = np.ones(image.shape[:2], dtype=np.uint8)
            samples.append(FundusSample(id=rec["id"], image=image, truth=truth, fov=fov))
        splits[split] = samples
    return splits


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessParams:
    clahe: bool = True
    tiles: int = 8
    clip_limit: float = 2.0
    bins: int = 256
    gamma: float = 1.2

    def describe(self) -> dict:
        return {"clahe": self.clahe, "tiles": self.tiles, "clip_limit": self.clip_limit,
                "bins": self.bins, "gamma": self.gamma}


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma grayscale of an 8-bit image, as float in [0, 255]."""
    if image.ndim == 2:
        return image.astype(np.float64)
    r, g, b = LUMA
    return r * image[:, :, 0] + g * image[:, :, 1] + b * image[:, :, 2]


def clahe(values: np.ndarray, tiles: int = 8, clip_limit: float = 2.0,
          bins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a [0,1] raster.

    The raster quantizes to `bins` levels; each tile's histogram is clipped
    at clip_limit times the uniform bin height with the excess spread
    evenly; per-tile equalization mappings blend bilinearly between tile
    centers. tiles=1 degenerates to plain clipped global equalization.
    """
    h, w = values.shape
    q = np.clip(np.round(values * (bins - 1)).astype(np.int64), 0, bins - 1)

    ty = np.linspace(0, h, tiles + 1).astype(np.int64)
    tx = np.linspace(0, w, tiles + 1).astype(np.int64)
    maps = np.zeros((tiles, tiles, bins))
    centers_y = (ty[:-1] + ty[1:]) / 2.0
    centers_x = (tx[:-1] + tx[1:]) / 2.0
    for i in range(tiles):
        for j in range(tiles):
            tile = q[ty[i]:ty[i + 1], tx[j]:tx[j + 1]]
            npix = tile.size
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            clip = clip_limit * npix / bins
            excess = np.maximum(hist - clip, 0.0).sum()
            hist = np.minimum(hist, clip) + excess / bins
            maps[i, j] = np.cumsum(hist) / npix

    def axis_blend(coords, centers):
        # neighbor tile indices and weight toward the upper one; pixels
        # outside the first/last centers clamp to the edge tile
        idx = np.searchsorted(centers, coords) - 1
        i0 = np.clip(idx, 0, tiles - 1)
        i1 = np.clip(idx + 1, 0, tiles - 1)
        span = np.where(i1 > i0, centers[i1] - centers[i0], 1.0)
        frac = np.clip((coords - centers[i0]) / span, 0.0, 1.0)
        return i0, i1, frac

    ry0, ry1, fy = axis_blend(np.arange(h) + 0.5, centers_y)
    cx0, cx1, fx = axis_blend(np.arange(w) + 0.5, centers_x)
    y0, y1 = ry0[:, None], ry1[:, None]
    x0, x1 = cx0[None, :], cx1[None, :]
    fy, fx = fy[:, None], fx[None, :]
    out = ((1 - fy) * (1 - fx) * maps[y0, x0, q] + (1 - fy) * fx * maps[y0, x1, q]
           + fy * (1 - fx) * maps[y1, x0, q] + fy * fx * maps[y1, x1, q])
    return np.clip(out, 0.0, 1.0)


def preprocess(image: np.ndarray, params: PreprocessParams | None = None) -> np.ndarray:
    """Grayscale, standardize to [0,1], equalize, gamma-correct.

    A zero-variance image cannot be standardized; it passes through as a
    0.5-filled raster (with a warning), skipping equalization.
    """
    params = params or PreprocessParams()
    gray = to_gray(image)
    std = gray.std()
    if std == 0.0:
        warnings.warn("constant image: standardization skipped, using 0.5 fill")
        values = np.full_like(gray, 0.5)
    else:
        z = (gray - gray.mean()) / std
        values = (z - z.min()) / (z.max() - z.min())
        if params.clahe:
            values = clahe(values, tiles=params.tiles, clip_limit=params.clip_limit,
                           bins=params.bins)
    return np.power(values, params.gamma)


# ---------------------------------------------------------------------------
# patch sampling (training augmentation)


def sample_patches(sample, n: int, patch: int, seed) -> list[tuple[np.ndarray, np.ndarray]]:
    """Draw n random aligned (image, truth) patches with 90-degree rotations.

    `sample` provides .image (the prepared raster to crop) and .truth; both
    crop at identical uniform-random origins and rotate by the same random
    multiple of 90 degrees. Deterministic under seed.
    """
    image, truth = sample.image, sample.truth
    h, w = image.shape[:2]
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds image {h}x{w}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        r = int(rng.integers(0, h - patch + 1))
        c = int(rng.integers(0, w - patch + 1))
        k = int(rng.integers(0, 4))
        img = np.rot90(image[r:r + patch, c:c + patch], k).copy()
        tru = np.rot90(truth[r:r + patch, c:c + patch], k).copy()
        out.append((img, tru))
    return out


# ---------------------------------------------------------------------------
# overlap-crop geometry


@dataclass
class PatchGrid:
    """Deterministic overlap-crop plan enabling exact stitch reconstruction."""
    patch: int
    stride: int
    orig_h: int
    orig_w: int
    padded_h: int
    padded_w: int
    origins: list = field(default_factory=list)  # (row, col), row-major
    pad_mode: str = "reflect"


def plan_grid(h: int, w: int, patch: int = 128, stride: int = 12) -> PatchGrid:
    """Plan origins on a reflect-padded canvas so every pixel is covered."""
    if not 1 <= stride <= patch:
        raise ValueError(f"need 1 <= stride <= patch, got stride={stride}, patch={patch}")

    def padded(extent):
        if extent <= patch:
            return patch
        return patch + stride * int(np.ceil((extent - patch) / stride))

    ph, pw = padded(h), padded(w)
    rows = range(0, ph - patch + 1, stride)
    cols = range(0, pw - patch + 1, stride)
    origins = [(r, c) for r in rows for c in cols]
    return PatchGrid(patch=patch, stride=stride, orig_h=h, orig_w=w,
                     padded_h=ph, padded_w=pw, origins=origins)


def reflect_pad(raster: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    """Pad bottom/right by edge mirroring (no edge duplication).

    Unlike np.pad(mode="reflect") this tolerates pads wider than the
    raster by folding the mirror index back repeatedly.
    """
    h, w = raster.shape

    def mirror(n, pad):
        idx = np.arange(n + pad)
        if n == 1:
            return np.zeros(n + pad, dtype=np.int64)
        period = 2 * (n - 1)
        folded = idx % period
        return np.where(folded < n, folded, period - folded)

    return raster[np.ix_(mirror(h, pad_h), mirror(w, pad_w))]


def extract_patches(raster: np.ndarray, grid: PatchGrid) -> list[np.ndarray]:
    """Crop every planned patch from the padded raster, in origin order."""
    if raster.shape != (grid.orig_h, grid.orig_w):
        raise ValueError(f"raster {raster.shape} does not match grid "
                         f"{(grid.orig_h, grid.orig_w)}")
    padded = reflect_pad(raster, grid.padded_h - grid.orig_h, grid.padded_w - grid.orig_w)
    p = grid.patch
    return [padded[r:r + p, c:c + p] for r, c in grid.origins]


def coverage_counts(grid: PatchGrid) -> np.ndarray:
    counts = np.zeros((grid.padded_h, grid.padded_w), dtype=np.int64)
    p = grid.patch
    for r, c in grid.origins:
        counts[r:r + p, c:c + p] += 1
    return counts


def stitch(patch_probs, grid: PatchGrid) -> np.ndarray:
    """Average overlapping patch predictions back into an (H, W) raster.

    Accumulation runs in origin order (fixed reduction order), so results
    are reproducible bit-for-bit.
    """
    patch_probs = list(patch_probs)
    if len(patch_probs) != len(grid.origins):
        raise ValueError(f"got {len(patch_probs)} patches for {len(grid.origins)} origins")
    acc = np.zeros((grid.padded_h, grid.padded_w))
    p = grid.patch
    for (r, c), values in zip(grid.origins, patch_probs):
        acc[r:r + p, c:c + p] += values
    acc /= coverage_counts(grid)
    return acc[:grid.orig_h, :grid.orig_w]


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability raster; values >= threshold become vessel."""
    if prob.min() < 0.0 or prob.max() > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    return (prob >= threshold).astype(np.uint8)
