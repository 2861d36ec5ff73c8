"""Raster I/O: 8-bit PNG/PGM/PPM in, 8-bit masks, 16-bit PGM probability
maps out. PGM/PPM are parsed directly so the byte format stays pinned;
PNG goes through Pillow.
"""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np
from PIL import Image


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    m = re.match(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    channels = 3 if kind == b"P6" else 1
    data = raw[m.end():]
    if maxval < 256:
        arr = np.frombuffer(data, dtype=np.uint8, count=w * h * channels)
    else:
        arr = np.frombuffer(data, dtype=">u2", count=w * h * channels).astype(np.uint16)
    arr = arr.reshape((h, w, channels)) if channels == 3 else arr.reshape((h, w))
    return arr.copy()


def read_image(path) -> np.ndarray:
    """Load a raster as (H, W) gray or (H, W, 3) RGB, dtype uint8/uint16."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        return _read_pnm(path)
    if suffix == ".png":
        with Image.open(path) as im:
            if im.mode in ("I", "I;16", "I;16B"):
                return np.asarray(im, dtype=np.uint16).copy()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
            return np.asarray(im).copy()
    raise ValueError(f"{path}: unsupported format {suffix!r} (use PNG, PGM or PPM)")


def read_mask(path) -> np.ndarray:
    """Load a binary mask; pixel values {0, 255} map to {0, 1}."""
    arr = read_image(path)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    threshold = 128 if arr.dtype == np.uint8 else 32768
    return (arr >= threshold).astype(np.uint8)


def _atomic_write(path: Path, payload: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_pgm16(path, values: np.ndarray):
    """Write a [0,1] float raster as 16-bit big-endian binary PGM."""
    path = Path(path)
    v = np.clip(values, 0.0, 1.0)
    q = np.round(v * 65535.0).astype(">u2")
    header = f"P5\n{q.shape[1]} {q.shape[0]}\n65535\n".encode()
    _atomic_write(path, header + q.tobytes())


def read_pgm16(path) -> np.ndarray:
    """Inverse of write_pgm16: 16-bit PGM back to a [0,1] float raster."""
    arr = _read_pnm(Path(path))
    if arr.dtype != np.uint16:
        raise ValueError(f"{path}: expected a 16-bit PGM")
    return arr.astype(np.float64) / 65535.0


def write_png_mask(path, mask: np.ndarray):
    """Write a {0,1} mask as an 8-bit PNG with values {0, 255}."""
    path = Path(path)
    img = Image.fromarray((mask.astype(np.uint8) * 255), mode="L")
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format="PNG")
    os.replace(tmp, path)


def write_png(path, raster: np.ndarray):
    """Write an 8-bit grayscale or RGB raster as PNG."""
    path = Path(path)
    img = Image.fromarray(raster.astype(np.uint8))
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format="PNG")
    os.replace(tmp, path)
