"""Feature-map primitives on dense ``(batch, channel, y, x)`` arrays.

A feature map is a plain 4-D numpy array.  Shifts follow ``T_s I(x) = I(x + s)``:
translating by ``s = (1, 0)`` moves content one pixel towards smaller x.
Shift pairs are always ``(sx, sy)``.
"""
from __future__ import annotations

import math

import numpy as np

FILL_MODES = ("zero", "replicate")


def as_map(values, dtype=None) -> np.ndarray:
    """Validate and return a rank-4 array (batch, channels, height, width)."""
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != 4:
        raise ValueError(f"feature map must be rank 4 (b, c, h, w), got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


def shape_of(m: np.ndarray) -> tuple[int, int, int, int]:
    b, c, h, w = m.shape
    return int(b), int(c), int(h), int(w)


def zero_pad(m: np.ndarray, margin: int) -> np.ndarray:
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if margin == 0:
        return m
    return np.pad(m, ((0, 0), (0, 0), (margin, margin), (margin, margin)))


def crop(m: np.ndarray, margin: int) -> np.ndarray:
    """Inverse of :func:`zero_pad` (also its adjoint)."""
    if margin == 0:
        return m
    return m[..., margin:-margin, margin:-margin]


def translate(m: np.ndarray, shift, fill: str = "zero") -> np.ndarray:
    """Return ``out(x) = m(x + s)``; vacated pixels are zero or copy the nearest pixel."""
    sx, sy = (int(v) for v in shift)
    h, w = m.shape[-2:]
    if abs(sx) >= w or abs(sy) >= h:
        raise ValueError(f"shift {(sx, sy)} must be smaller than spatial dims {(w, h)}")
    if fill not in FILL_MODES:
        raise ValueError(f"unknown fill mode {fill!r}")
    if fill == "replicate":
        ys = np.clip(np.arange(h) + sy, 0, h - 1)
        xs = np.clip(np.arange(w) + sx, 0, w - 1)
        return m[..., ys[:, None], xs[None, :]]
    out = np.zeros_like(m)
    dst_y = slice(max(0, -sy), h - max(0, sy))
    src_y = slice(max(0, sy), h - max(0, -sy))
    dst_x = slice(max(0, -sx), w - max(0, sx))
    src_x = slice(max(0, sx), w - max(0, -sx))
    out[..., dst_y, dst_x] = m[..., src_y, src_x]
    return out


def subsample(m: np.ndarray, d: int) -> np.ndarray:
    """Point sampling ``out(x) = m(x d)``; output sides are ``ceil(side / d)``."""
    if int(d) != d or d < 1:
        raise ValueError("sub-sampling factor must be an integer >= 1")
    d = int(d)
    if d == 1:
        return m
    return m[..., ::d, ::d]


def subsample_adjoint(g: np.ndarray, d: int, size: tuple[int, int]) -> np.ndarray:
    if d == 1:
        return g
    out = np.zeros(g.shape[:-2] + tuple(size), dtype=g.dtype)
    out[..., ::d, ::d] = g
    return out


def average_subsample(m: np.ndarray, d: int) -> np.ndarray:
    """``d x d`` average pooling with stride ``d``; ragged edges see zero extension."""
    if int(d) != d or d < 1:
        raise ValueError("sub-sampling factor must be an integer >= 1")
    d = int(d)
    if d == 1:
        return m
    h, w = m.shape[-2:]
    oh, ow = math.ceil(h / d), math.ceil(w / d)
    padded = np.pad(m, ((0, 0), (0, 0), (0, oh * d - h), (0, ow * d - w)))
    blocks = padded.reshape(m.shape[:-2] + (oh, d, ow, d))
    return blocks.mean(axis=(-3, -1), dtype=np.float64).astype(m.dtype)


def average_subsample_adjoint(g: np.ndarray, d: int, size: tuple[int, int]) -> np.ndarray:
    if d == 1:
        return g
    h, w = size
    up = np.repeat(np.repeat(g, d, axis=-2), d, axis=-1) / (d * d)
    return up[..., :h, :w].astype(g.dtype)


def global_average(m: np.ndarray) -> np.ndarray:
    """Per-example channel means, shape ``(batch, channels)``; float64 accumulation."""
    h, w = m.shape[-2:]
    if h * w == 0:
        raise ValueError("global average needs a nonempty spatial domain")
    return m.sum(axis=(-2, -1), dtype=np.float64) / (h * w)


def sup_norm(m) -> float:
    arr = np.asarray(m)
    if arr.size == 0:
        return 0.0
    return float(np.max(np.abs(arr)))
