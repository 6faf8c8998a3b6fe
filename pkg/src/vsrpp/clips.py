"""Clip container, synthetic clip generation, and PNG directory storage.

Clips are stored on disk as numbered 8-bit RGB PNG frames (00000000.png,
00000001.png, ...); anything else - gaps, 16-bit depth, inconsistent sizes -
is rejected with a precise message.
"""

import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import kernels
from .degrade import blur_gaussian
from .errors import ClipFormatError, DimensionError

FRAME_PATTERN = re.compile(r"^(\d{8})\.png$")

SYNTH_KINDS = ("translate", "rotate_zoom", "texture_noise")


@dataclass
class Clip:
    """Ordered frames (t, 3, h, w) in [0, 1] plus provenance metadata."""

    frames: np.ndarray
    clip_id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[1] != 3 or f.shape[0] < 1:
            raise DimensionError(
                f"Clip frames must be (t>=1, 3, h, w), got {f.shape}")
        self.frames = f

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[2]

    @property
    def width(self):
        return self.frames.shape[3]


def _band_limited_canvas(rng, h, w, sigma):
    """Gaussian-blurred noise, rescaled into [0.05, 0.95] per channel mix."""
    base = rng.standard_normal((1, h, w))
    color = rng.standard_normal((3, h, w))
    canvas = 0.75 * base + 0.25 * color
    size = 2 * int(np.ceil(3 * sigma)) + 1
    canvas = blur_gaussian(canvas, sigma=sigma, size=size)
    lo, hi = canvas.min(), canvas.max()
    canvas = (canvas - lo) / (hi - lo + 1e-12)
    return (0.05 + 0.9 * canvas).astype(np.float32)


def _window_at(canvas, ox, oy, h, w):
    """Bilinear crop of an (3, hc, wc) canvas at a sub-pixel origin."""
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float32),
                         np.arange(h, dtype=np.float32))
    coords = np.stack([gx + np.float32(ox), gy + np.float32(oy)])[None]
    return kernels.bilinear_sample_fwd(canvas[None], coords)[0]


def synth_clip(kind, frames, seed, size=(96, 96), velocity=None,
               texture_sigma=3.0, rotate_deg=0.6, zoom_rate=0.002):
    """Deterministic procedural HR clip with known ground-truth motion.

    Kinds: 'translate' moves a band-limited noise texture at a constant
    (sub-pixel capable) velocity recorded in ``meta['velocity']``;
    'rotate_zoom' applies a slow rotation plus zoom about the center;
    'texture_noise' is a static textured clip (zero motion).
    """
    if kind not in SYNTH_KINDS:
        raise DimensionError(f"synth_clip: unknown kind '{kind}'")
    if frames < 1:
        raise DimensionError("synth_clip: need at least one frame")
    rng = np.random.default_rng(seed)
    h, w = size
    if kind == "translate":
        if velocity is None:
            velocity = tuple(rng.uniform(-1.5, 1.5, size=2))
        vx, vy = float(velocity[0]), float(velocity[1])
        margin = int(np.ceil(max(abs(vx), abs(vy)) * frames)) + 4
        canvas = _band_limited_canvas(rng, h + 2 * margin, w + 2 * margin,
                                      texture_sigma)
        stack = [_window_at(canvas, margin + t * vx, margin + t * vy, h, w)
                 for t in range(frames)]
        meta = {"kind": kind, "seed": seed, "velocity": (vx, vy)}
    elif kind == "rotate_zoom":
        margin = int(0.25 * max(h, w)) + 4
        canvas = _band_limited_canvas(rng, h + 2 * margin, w + 2 * margin,
                                      texture_sigma)
        cy, cx = (h + 2 * margin - 1) / 2.0, (w + 2 * margin - 1) / 2.0
        gx, gy = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        gx = gx + margin - cx
        gy = gy + margin - cy
        stack = []
        for t in range(frames):
            ang = np.deg2rad(rotate_deg) * t
            z = 1.0 + zoom_rate * t
            rx = (np.cos(ang) * gx - np.sin(ang) * gy) / z + cx
            ry = (np.sin(ang) * gx + np.cos(ang) * gy) / z + cy
            coords = np.stack([rx, ry]).astype(np.float32)[None]
            stack.append(kernels.bilinear_sample_fwd(canvas[None], coords)[0])
        meta = {"kind": kind, "seed": seed, "rotate_deg": rotate_deg,
                "zoom_rate": zoom_rate}
    else:  # texture_noise: static
        canvas = _band_limited_canvas(rng, h, w, texture_sigma)
        stack = [canvas.copy() for _ in range(frames)]
        meta = {"kind": kind, "seed": seed, "velocity": (0.0, 0.0)}
    return Clip(np.stack(stack), clip_id=f"{kind}-{seed}", meta=meta)


# ---------------------------------------------------------------------------
# PNG directory storage


def _png_bit_depth(path):
    """Read the IHDR bit depth directly; rejects non-PNG files."""
    with open(path, "rb") as fh:
        head = fh.read(26)
    if len(head) < 26 or head[:8] != b"\x89PNG\r\n\x1a\n" or head[12:16] != b"IHDR":
        raise ClipFormatError(f"not a PNG file: {path}")
    _, _, depth, _ = struct.unpack(">IIBB", head[16:26])
    return depth


def save_clip_dir(clip, path):
    """Write 8-bit RGB PNG frames numbered from 00000000."""
    os.makedirs(path, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        arr = np.clip(frame, 0.0, 1.0)
        arr = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(
            os.path.join(path, f"{i:08d}.png"))


def load_clip_dir(path, clip_id=None):
    """Read a numbered PNG directory back into a Clip (values in [0, 1])."""
    if not os.path.isdir(path):
        raise ClipFormatError(f"clip directory not found: {path}")
    numbered = {}
    for name in os.listdir(path):
        m = FRAME_PATTERN.match(name)
        if m:
            numbered[int(m.group(1))] = os.path.join(path, name)
    if not numbered:
        raise ClipFormatError(f"no frames matching 00000000.png in {path}")
    count = max(numbered) + 1
    frames = []
    size = None
    for i in range(count):
        if i not in numbered:
            raise ClipFormatError(f"missing frame index {i} in {path}")
        fp = numbered[i]
        depth = _png_bit_depth(fp)
        if depth != 8:
            raise ClipFormatError(
                f"{fp}: {depth}-bit PNG not supported (8-bit only)")
        with Image.open(fp) as img:
            if img.mode == "L":
                img = img.convert("RGB")
            if img.mode != "RGB":
                raise ClipFormatError(
                    f"{fp}: unsupported PNG mode '{img.mode}' (need RGB or L)")
            arr = np.asarray(img, dtype=np.uint8)
        if size is None:
            size = arr.shape
        elif arr.shape != size:
            raise ClipFormatError(
                f"{fp}: frame size {arr.shape[:2]} differs from {size[:2]}")
        frames.append(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)
    return Clip(np.stack(frames),
                clip_id=clip_id or os.path.basename(os.path.normpath(path)),
                meta={"source": str(path)})
