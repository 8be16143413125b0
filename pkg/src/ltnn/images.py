"""Small PNG helpers shared by the data, eval and CLI layers."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_u8(chw_float):
    """[0,1] float (C,H,W) -> u8, clamping out-of-range values."""
    return np.clip(np.rint(np.asarray(chw_float) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, chw_u8):
    arr = np.asarray(chw_u8)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"save_png expects (3, H, W) u8, got {arr.shape}")
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_png(path):
    """PNG -> u8 (3, H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr.transpose(2, 0, 1)


def make_grid(rows, pad=2, pad_value=255):
    """Tile a list of rows of u8 (3,H,W) images into one (3,H',W') image."""
    n_cols = max(len(r) for r in rows)
    c, h, w = np.asarray(rows[0][0]).shape
    gh = len(rows) * (h + pad) + pad
    gw = n_cols * (w + pad) + pad
    grid = np.full((c, gh, gw), pad_value, dtype=np.uint8)
    for ri, row in enumerate(rows):
        for ci, img in enumerate(row):
            top = pad + ri * (h + pad)
            left = pad + ci * (w + pad)
            grid[:, top : top + h, left : left + w] = img
    return grid
