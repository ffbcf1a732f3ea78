"""Small numpy image helpers shared by initialization, training and metrics."""

from __future__ import annotations

import numpy as np


def bilinear_sample_array(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an (H, W) or (H, W, C) array at (P, 2) uv points.

    uv is (u=col, v=row); pixel (i, j) samples at exactly (j, i).  Samples
    clamp to the image border.  Returns (P,) or (P, C).
    """
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    H, W = img.shape[:2]
    u = np.clip(np.asarray(uv, dtype=np.float64)[:, 0], 0.0, W - 1.0)
    v = np.clip(np.asarray(uv, dtype=np.float64)[:, 1], 0.0, H - 1.0)
    u0 = np.clip(np.floor(u).astype(int), 0, W - 1)
    v0 = np.clip(np.floor(v).astype(int), 0, H - 1)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    out = (img[v0, u0] * (1 - fu) * (1 - fv) + img[v0, u1] * fu * (1 - fv)
           + img[v1, u0] * (1 - fu) * fv + img[v1, u1] * fu * fv)
    return out[:, 0] if squeeze else out


def spatial_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward-difference image gradients: (d/dx (H, W-1), d/dy (H-1, W))."""
    img = np.asarray(img, dtype=np.float64)
    return img[:, 1:] - img[:, :-1], img[1:, :] - img[:-1, :]


def in_bounds(uv: np.ndarray, width: int, height: int, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of (P, 2) uv points inside the image rectangle."""
    uv = np.asarray(uv)
    return ((uv[:, 0] >= margin) & (uv[:, 0] <= width - 1 - margin)
            & (uv[:, 1] >= margin) & (uv[:, 1] <= height - 1 - margin))
