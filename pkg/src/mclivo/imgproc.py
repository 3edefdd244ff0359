"""Bilinear sampling with exact interpolant gradients and corner response."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def bilinear(img: np.ndarray, u, v, with_grad: bool = False):
    """Sample ``img`` at float pixel coordinates ``(u, v)`` (column, row).

    Coordinates must lie in ``[0, W-1] x [0, H-1]``. The returned gradient is
    the derivative of the bilinear interpolant itself, so it agrees with
    finite differences of this function everywhere except on cell borders.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    h, w = img.shape
    u0 = np.clip(np.floor(u).astype(np.intp), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(np.intp), 0, h - 2)
    fu = u - u0
    fv = v - v0
    i00 = img[v0, u0]
    i10 = img[v0, u0 + 1]
    i01 = img[v0 + 1, u0]
    i11 = img[v0 + 1, u0 + 1]
    top = i00 + fu * (i10 - i00)
    bot = i01 + fu * (i11 - i01)
    val = top + fv * (bot - top)
    if not with_grad:
        return val
    du = (1.0 - fv) * (i10 - i00) + fv * (i11 - i01)
    dv = bot - top
    return val, du, dv


def inside(shape, u, v, margin: float = 0.0) -> np.ndarray:
    h, w = shape
    u = np.asarray(u)
    v = np.asarray(v)
    return (u >= margin) & (u <= w - 1 - margin) & (v >= margin) & (v <= h - 1 - margin)


def shi_tomasi(img: np.ndarray, window: int = 3) -> np.ndarray:
    """Smaller eigenvalue of the gradient structure tensor over a square window."""
    gy, gx = np.gradient(np.asarray(img, dtype=float))
    n = window * window
    a = ndimage.uniform_filter(gx * gx, window, mode="nearest") * n
    b = ndimage.uniform_filter(gx * gy, window, mode="nearest") * n
    c = ndimage.uniform_filter(gy * gy, window, mode="nearest") * n
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return np.maximum(half_tr - disc, 0.0)


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(np.asarray(img, dtype=float))
    return np.hypot(gx, gy)
