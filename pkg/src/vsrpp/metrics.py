"""Image quality metrics and the temporal-profile flicker diagnostic.

PSNR and SSIM accept two channel conventions: 'rgb' measures all three
channels directly, 'y' converts to legal-range luma first (the usual
video-restoration reporting convention).  No border cropping is applied
anywhere; metric files record that choice in their header.
"""

import math
import os

import numpy as np

from .errors import DimensionError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

CONVENTIONS = ("rgb", "y")


def to_legal_luma(img):
    """BT.601 full-to-legal luma of a (3, h, w) image in [0, 1], kept in [0, 1].

    Computed as (65.481 R + 128.553 G + 24.966 B + 16) / 255.
    """
    r, g, b = img[0], img[1], img[2]
    return (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0


def _prepare(pred, target, convention):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(
            f"metric: shapes {pred.shape} vs {target.shape} differ")
    if pred.ndim != 3 or pred.shape[0] != 3:
        raise DimensionError(f"metric: expected (3, h, w) frames, got {pred.shape}")
    if convention not in CONVENTIONS:
        raise DimensionError(f"metric: convention must be one of {CONVENTIONS}")
    pred = np.clip(pred, 0.0, 1.0)
    target = np.clip(target, 0.0, 1.0)
    if convention == "y":
        return to_legal_luma(pred)[None], to_legal_luma(target)[None]
    return pred, target


def psnr(pred, target, convention="y"):
    """10*log10(1/MSE) on [0, 1]-scaled values; +inf for identical inputs."""
    p, t = _prepare(pred, target, convention)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    c = (size - 1) / 2.0
    k = np.exp(-((np.arange(size, dtype=np.float64) - c) ** 2)
               / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(plane, kernel):
    """Separable 'valid' correlation with a 1-D kernel along both axes."""
    size = kernel.size
    t = np.lib.stride_tricks.sliding_window_view(plane, size, axis=0) @ kernel
    return np.lib.stride_tricks.sliding_window_view(t, size, axis=1) @ kernel


def ssim(pred, target, convention="y", data_range=1.0):
    """Single-scale SSIM, 11x11 Gaussian window, mean over valid positions."""
    p, t = _prepare(pred, target, convention)
    h, w = p.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(
            f"ssim: frame {h}x{w} smaller than the {SSIM_WINDOW}-pixel window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    k = _gaussian_window()
    vals = []
    for pc, tc in zip(p, t):
        mu_p = _filter_valid(pc, k)
        mu_t = _filter_valid(tc, k)
        var_p = _filter_valid(pc * pc, k) - mu_p ** 2
        var_t = _filter_valid(tc * tc, k) - mu_t ** 2
        cov = _filter_valid(pc * tc, k) - mu_p * mu_t
        num = (2.0 * mu_p * mu_t + c1) * (2.0 * cov + c2)
        den = (mu_p ** 2 + mu_t ** 2 + c1) * (var_p + var_t + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def temporal_profile(frames, column_index):
    """Stack one pixel column across time and score its flicker.

    Args:
        frames: (t, 3, h, w) array in [0, 1].
        column_index: which column to track.

    Returns:
        (profile, score): profile is (t, h, 3) suitable for PNG export;
        score is the mean absolute difference between consecutive profile
        rows (0 for a static clip).
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise DimensionError(f"temporal_profile: expected (t, 3, h, w), got {frames.shape}")
    t, _, h, w = frames.shape
    if not 0 <= column_index < w:
        raise DimensionError(
            f"temporal_profile: column {column_index} outside width {w}")
    profile = frames[:, :, :, column_index].transpose(0, 2, 1)  # (t, h, 3)
    if t < 2:
        return profile, 0.0
    score = float(np.abs(np.diff(profile, axis=0)).mean())
    return profile, score


def write_metrics_csv(path, rows, convention):
    """CSV of per-frame metrics: '# ...' provenance line, header, rows.

    rows: iterable of (clip, frame_index, psnr, ssim).
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# convention={convention} crop=none\n")
        fh.write("clip,frame,psnr,ssim\n")
        for clip, frame, p, s in rows:
            p_str = "inf" if math.isinf(p) else f"{p:.6f}"
            fh.write(f"{clip},{frame},{p_str},{s:.6f}\n")
