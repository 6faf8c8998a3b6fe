"""Low-resolution degradation synthesis.

Two modes, applied to the last two axes of any float array in [0, 1]:

* BI: antialiased cubic downsampling in the imresize convention (Keys kernel
  a = -0.5, kernel width stretched by the scale factor, half-pixel-aligned
  sample centers, symmetric edge folding, rows normalized to 1);
* BD: separable Gaussian blur (sigma 1.6, 13 taps, reflect padding) followed
  by point subsampling every `scale` pixels starting at index 0.

Everything is computed in float64 and returned in float32.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

CUBIC_A = -0.5
BD_SIGMA = 1.6
BD_KERNEL_SIZE = 13


def cubic_kernel(t, a=CUBIC_A):
    """Keys piecewise-cubic interpolation kernel (vectorized)."""
    at = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(at)
    near = at <= 1.0
    far = (at > 1.0) & (at < 2.0)
    out[near] = (a + 2.0) * at[near] ** 3 - (a + 3.0) * at[near] ** 2 + 1.0
    out[far] = a * at[far] ** 3 - 5.0 * a * at[far] ** 2 + 8.0 * a * at[far] - 4.0 * a
    return out


def _fold_symmetric(idx, n):
    """Mirror out-of-range indices with edge repetition: -1 -> 0, n -> n-1."""
    idx = np.asarray(idx)
    out = idx.copy()
    while True:
        neg = out < 0
        over = out >= n
        if not (neg.any() or over.any()):
            return out
        out[neg] = -out[neg] - 1
        out[over] = 2 * n - 1 - out[over]


def imresize_matrix(n_in, n_out, a=CUBIC_A):
    """(n_out, n_in) resampling matrix in the imresize convention."""
    if n_in < 1 or n_out < 1:
        raise DimensionError("imresize: extents must be positive")
    scale = n_out / n_in
    kscale = min(scale, 1.0)  # antialiasing stretch on downsampling only
    support = 4.0 / kscale
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    n_taps = int(math.ceil(support)) + 2
    for i in range(n_out):
        u = (i + 0.5) / scale - 0.5
        left = math.floor(u - support / 2.0)
        taps = np.arange(left, left + n_taps)
        wgt = kscale * cubic_kernel(kscale * (u - taps), a)
        cols = _fold_symmetric(taps, n_in)
        np.add.at(mat[i], cols, wgt)
        mat[i] /= mat[i].sum()
    return mat


def resize_cubic(img, out_h, out_w, a=CUBIC_A):
    """Separable imresize-style resize on the last two axes."""
    h, w = img.shape[-2:]
    mh = imresize_matrix(h, out_h, a)
    mw = imresize_matrix(w, out_w, a)
    x = np.asarray(img, dtype=np.float64)
    y = np.matmul(mh, np.matmul(x, mw.T))
    return y.astype(np.float32)


def degrade_bi(frame, scale=4):
    """Antialiased cubic downsample by an integer factor."""
    h, w = frame.shape[-2:]
    if scale < 2:
        raise DimensionError("degrade_bi: scale must be >= 2")
    if h % scale or w % scale:
        raise DimensionError(
            f"degrade_bi: extents {h}x{w} not divisible by scale {scale}; crop first")
    return resize_cubic(frame, h // scale, w // scale)


def upsample_cubic(frame, scale=4):
    """Cubic upsampling (the per-frame baseline the network must beat)."""
    h, w = frame.shape[-2:]
    return resize_cubic(frame, h * scale, w * scale)


def gaussian_kernel1d(sigma, size=BD_KERNEL_SIZE):
    if sigma <= 0:
        raise DimensionError("gaussian: sigma must be positive")
    c = (size - 1) / 2.0
    k = np.exp(-((np.arange(size, dtype=np.float64) - c) ** 2)
               / (2.0 * sigma * sigma))
    return k / k.sum()


def blur_gaussian(frame, sigma=BD_SIGMA, size=BD_KERNEL_SIZE):
    """Separable normalized Gaussian blur with reflect padding."""
    h, w = frame.shape[-2:]
    r = size // 2
    if h <= r or w <= r:
        raise DimensionError(
            f"blur: image {h}x{w} too small for a {size}-tap kernel")
    k = gaussian_kernel1d(sigma, size)
    x = np.asarray(frame, dtype=np.float64)
    pad = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, pad + [(r, r), (0, 0)], mode="reflect")
    x = sum(k[i] * xp[..., i:i + h, :] for i in range(size))
    xp = np.pad(x, pad + [(0, 0), (r, r)], mode="reflect")
    x = sum(k[i] * xp[..., :, i:i + w] for i in range(size))
    return x


def degrade_bd(frame, sigma=BD_SIGMA, scale=4):
    """Gaussian blur then stride-`scale` point subsampling from index 0."""
    h, w = frame.shape[-2:]
    if h % scale or w % scale:
        raise DimensionError(
            f"degrade_bd: extents {h}x{w} not divisible by scale {scale}; crop first")
    blurred = blur_gaussian(frame, sigma=sigma)
    return blurred[..., ::scale, ::scale].astype(np.float32)


@dataclass(frozen=True)
class DegradationSpec:
    """Which degradation to apply and with what parameters."""

    mode: str = "BI"
    scale: int = 4
    sigma: float = BD_SIGMA
    bd_kernel_size: int = BD_KERNEL_SIZE
    cubic_a: float = CUBIC_A

    def __post_init__(self):
        if self.mode not in ("BI", "BD"):
            raise DimensionError(f"degradation mode must be BI or BD, got {self.mode}")
        if self.scale < 2:
            raise DimensionError("degradation scale must be >= 2")
        if self.sigma <= 0:
            raise DimensionError("degradation sigma must be positive")

    def apply(self, frame):
        if self.mode == "BI":
            return degrade_bi(frame, self.scale)
        return degrade_bd(frame, self.sigma, self.scale)
