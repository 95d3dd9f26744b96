"""Coordinate transforms, bilinear sampling, and positional encodings.

Conventions used by every module in this package:

* Normalized points are (x, y) pairs in [0, 1]^2, x = column fraction,
  y = row fraction.
* Feature maps are (height, width, channels) float64 arrays.
* Pixel centers sit at ((j + 0.5) / width, (i + 0.5) / height) in
  normalized coordinates (align-corners-false); reads outside the map
  use zero padding.

All functions here are pure and safe to call concurrently on shared
immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_EPS = 1e-5


# ---------------------------------------------------------------------------
# Logistic squashing
# ---------------------------------------------------------------------------

def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out[0]) if scalar else out


def inverse_sigmoid(p, eps: float = DEFAULT_EPS):
    """Inverse of the logistic function with clamping near 0 and 1.

    Returns log(p' / (1 - p')) with p' = clamp(p, eps, 1 - eps).  Exact
    inverse of `sigmoid` on (eps, 1 - eps).
    """
    if not 0.0 < eps < 0.5:
        raise ConfigError(f"eps must lie in (0, 0.5), got {eps}")
    arr = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("inverse_sigmoid: input contains non-finite values")
    scalar = arr.ndim == 0
    clamped = np.clip(np.atleast_1d(arr), eps, 1.0 - eps)
    out = np.log(clamped) - np.log1p(-clamped)
    return float(out[0]) if scalar else out


def sigmoid_grad_from_output(y):
    """d sigmoid / dx expressed through the output y = sigmoid(x)."""
    return y * (1.0 - y)


# ---------------------------------------------------------------------------
# Pyramid layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PyramidLayout:
    """Spatial layout of a flattened multi-level feature pyramid.

    `levels` is an ordered tuple of (height, width, stride) with strictly
    increasing strides.  Row block l of the flattened memory occupies rows
    [sum of earlier h*w, ...) in row-major per-level order.
    """

    levels: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if not self.levels:
            raise ConfigError("PyramidLayout needs at least one level")
        strides = [s for (_, _, s) in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ConfigError(f"strides must be strictly increasing, got {strides}")
        for h, w, s in self.levels:
            if h < 1 or w < 1 or s < 1:
                raise ConfigError(f"invalid level shape ({h}, {w}, {s})")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def total_len(self) -> int:
        return sum(h * w for (h, w, _) in self.levels)

    def block_slices(self) -> list[slice]:
        """Row slice of each level inside the flattened memory."""
        out, start = [], 0
        for h, w, _ in self.levels:
            out.append(slice(start, start + h * w))
            start += h * w
        return out

    @classmethod
    def for_image(cls, side: int, num_levels: int, base_stride: int = 4) -> "PyramidLayout":
        """Layout for a square image of the given side, strides 4, 8, 16, ..."""
        levels = []
        for l in range(num_levels):
            stride = base_stride * (2 ** l)
            h = -(-side // stride)  # ceil division
            levels.append((h, h, stride))
        return cls(tuple(levels))


def pixel_centers(layout: PyramidLayout) -> np.ndarray:
    """Normalized (x, y) center of every row of the flattened pyramid, (M, 2)."""
    pieces = []
    for h, w, _ in layout.levels:
        xs = (np.arange(w) + 0.5) / w
        ys = (np.arange(h) + 0.5) / h
        gx, gy = np.meshgrid(xs, ys)
        pieces.append(np.stack([gx.ravel(), gy.ravel()], axis=1))
    return np.concatenate(pieces, axis=0)


def level_of_row(layout: PyramidLayout) -> np.ndarray:
    """Level index of every row of the flattened pyramid, (M,) int."""
    return np.concatenate(
        [np.full(h * w, l, dtype=np.int64) for l, (h, w, _) in enumerate(layout.levels)]
    )


# ---------------------------------------------------------------------------
# Bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_sample(fmap: np.ndarray, uv) -> np.ndarray:
    """Sample a (h, w, C) map at one normalized point, zero padding outside.

    The point may lie outside [0, 1]^2; out-of-range reads contribute zero.
    Returns a (C,) vector.
    """
    return bilinear_sample_many(fmap, np.asarray(uv, dtype=np.float64).reshape(1, 2))[0]


def bilinear_sample_many(fmap: np.ndarray, uvs: np.ndarray) -> np.ndarray:
    """Sample a (h, w, C) map at P normalized points at once; returns (P, C)."""
    h, w, _ = fmap.shape
    uvs = np.asarray(uvs, dtype=np.float64)
    gx = uvs[:, 0] * w - 0.5
    gy = uvs[:, 1] * h - 0.5
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    tx = gx - x0
    ty = gy - y0

    out = np.zeros((uvs.shape[0], fmap.shape[2]), dtype=np.float64)
    for dy, dx, wgt in (
        (0, 0, (1 - ty) * (1 - tx)),
        (0, 1, (1 - ty) * tx),
        (1, 0, ty * (1 - tx)),
        (1, 1, ty * tx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        if np.any(ok):
            out[ok] += wgt[ok, None] * fmap[yy[ok], xx[ok], :]
    return out


def bilinear_sample_many_backward(
    fmap: np.ndarray, uvs: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of `bilinear_sample_many` w.r.t. the map and the points.

    Returns (dmap (h, w, C), duvs (P, 2)).  The interpolant has kinks on
    cell boundaries; gradients there follow the floor-based cell choice.
    """
    h, w, _ = fmap.shape
    uvs = np.asarray(uvs, dtype=np.float64)
    gx = uvs[:, 0] * w - 0.5
    gy = uvs[:, 1] * h - 0.5
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    tx = gx - x0
    ty = gy - y0

    dmap = np.zeros_like(fmap)
    dgx = np.zeros(uvs.shape[0], dtype=np.float64)
    dgy = np.zeros(uvs.shape[0], dtype=np.float64)
    # weight, d(weight)/dtx, d(weight)/dty per corner
    corners = (
        (0, 0, (1 - ty) * (1 - tx), -(1 - ty), -(1 - tx)),
        (0, 1, (1 - ty) * tx, (1 - ty), -tx),
        (1, 0, ty * (1 - tx), -ty, (1 - tx)),
        (1, 1, ty * tx, ty, tx),
    )
    for dy, dx, wgt, dw_dtx, dw_dty in corners:
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        if not np.any(ok):
            continue
        vals = fmap[yy[ok], xx[ok], :]
        np.add.at(dmap, (yy[ok], xx[ok]), wgt[ok, None] * dout[ok])
        contrib = np.einsum("pc,pc->p", vals, dout[ok])
        dgx[ok] += dw_dtx[ok] * contrib
        dgy[ok] += dw_dty[ok] * contrib
    duvs = np.stack([dgx * w, dgy * h], axis=1)
    return dmap, duvs


def bilinear_sample_grads(fmap: np.ndarray, uv, dout: np.ndarray):
    """Single-point convenience wrapper around the batched backward."""
    dmap, duvs = bilinear_sample_many_backward(
        fmap, np.asarray(uv, dtype=np.float64).reshape(1, 2), np.asarray(dout).reshape(1, -1)
    )
    return dmap, duvs[0]


# ---------------------------------------------------------------------------
# Positional embeddings
# ---------------------------------------------------------------------------

def sinusoid_embed(coords: np.ndarray, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of normalized (x, y) points, (P, dim).

    dim/2 channels per axis, sin/cos interleaved over geometrically spaced
    frequencies, input scaled by 2*pi.  Two equal points always map to
    identical rows.
    """
    if dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freq = temperature ** (2.0 * (np.arange(half) // 2) / half)
    ang = coords[:, :, None] * (2.0 * np.pi) / freq  # (P, 2, half)
    emb = np.empty((coords.shape[0], 2, half), dtype=np.float64)
    emb[:, :, 0::2] = np.sin(ang[:, :, 0::2])
    emb[:, :, 1::2] = np.cos(ang[:, :, 1::2])
    return emb.reshape(coords.shape[0], dim)


def build_pixel_positions(layout: PyramidLayout, dim: int) -> np.ndarray:
    """Sinusoidal position row for every pixel of the flattened pyramid.

    Rows for the same normalized location on different levels are
    identical; level identity is carried by a separate learnable
    embedding.  Returns (M, dim) with all entries in [-1, 1].
    """
    return sinusoid_embed(pixel_centers(layout), dim)
