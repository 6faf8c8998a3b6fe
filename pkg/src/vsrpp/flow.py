"""Optical-flow providers and per-sequence flow enumeration.

The propagation network only ever asks a provider for the displacement field
between two frames; the default provider is a classical coarse-to-fine
Lucas-Kanade estimator, so the pipeline needs no pretrained weights.  A
trainable convolutional provider with the same interface is available for
experiments where the flow network participates in training.

Flow convention (frozen): ``estimate(ref, nbr)`` returns s with
``warp(nbr, s) ~= ref``; channel 0 is the horizontal displacement in pixels,
channel 1 the vertical one.
"""

import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ClipFormatError, DimensionError
from .tensor import Tensor

FLOW_MAGIC = int.from_bytes(b"VFLW", "little")
FLOW_VERSION = 1
_DIRECTIONS = ("forward", "backward")

DEFAULT_MAX_MAGNITUDE = 32.0


def _to_luma(frames):
    """(n, c, h, w) in [0, 1] -> (n, h, w) luminance plane."""
    if frames.shape[1] == 3:
        r, g, b = frames[:, 0], frames[:, 1], frames[:, 2]
        return 0.299 * r + 0.587 * g + 0.114 * b
    return frames.mean(axis=1)


def _decimate(plane):
    """Binomial 5-tap blur then drop every other row/column."""
    k = np.array([1.0, 4.0, 6.0, 4.0, 1.0], dtype=plane.dtype) / 16.0
    p = np.pad(plane, ((0, 0), (2, 2), (2, 2)), mode="reflect")
    t = sum(k[i] * p[:, i:i + plane.shape[1], 2:-2] for i in range(5))
    t = sum(k[i] * np.pad(t, ((0, 0), (0, 0), (2, 2)), mode="reflect")[:, :, i:i + plane.shape[2]]
            for i in range(5))
    return t[:, ::2, ::2]


def _sample_clamped(plane, flow_x, flow_y):
    """Bilinear lookup of (n, h, w) planes with border replication."""
    n, h, w = plane.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=plane.dtype),
                         np.arange(h, dtype=plane.dtype))
    cx = np.clip(gx[None] + flow_x, 0.0, w - 1.0)
    cy = np.clip(gy[None] + flow_y, 0.0, h - 1.0)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.minimum(x0, w - 2) if w > 1 else x0 * 0
    y0 = np.minimum(y0, h - 2) if h > 1 else y0 * 0
    fx = cx - x0
    fy = cy - y0
    pf = plane.reshape(n, h * w)
    idx = y0 * w + x0

    def take(off):
        return np.take_along_axis(pf, (idx + off).reshape(n, -1), axis=1).reshape(n, h, w)

    v00 = take(0)
    v01 = take(1) if w > 1 else v00
    v10 = take(w) if h > 1 else v00
    v11 = take(w + 1) if (h > 1 and w > 1) else v00
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def _box_sum(a, radius):
    """Windowed sum over (2r+1)^2 neighbourhoods, truncated at borders."""
    n, h, w = a.shape
    ii = np.zeros((n, h + 1, w + 1), dtype=np.float64)
    ii[:, 1:, 1:] = a
    np.cumsum(ii, axis=1, out=ii)
    np.cumsum(ii, axis=2, out=ii)
    y0 = np.clip(np.arange(h) - radius, 0, h)
    y1 = np.clip(np.arange(h) + radius + 1, 0, h)
    x0 = np.clip(np.arange(w) - radius, 0, w)
    x1 = np.clip(np.arange(w) + radius + 1, 0, w)
    s = (ii[:, y1[:, None], x1[None, :]] - ii[:, y0[:, None], x1[None, :]]
         - ii[:, y1[:, None], x0[None, :]] + ii[:, y0[:, None], x0[None, :]])
    return s.astype(a.dtype)


def _lk_refine(ref, nbr, flow, iters, radius, step_clip=2.0, det_eps=1e-9):
    """Iterative windowed Lucas-Kanade updates at one pyramid level."""
    for _ in range(iters):
        warped = _sample_clamped(nbr, flow[:, 0], flow[:, 1])
        gx = 0.5 * (np.gradient(warped, axis=2) + np.gradient(ref, axis=2))
        gy = 0.5 * (np.gradient(warped, axis=1) + np.gradient(ref, axis=1))
        it = warped - ref
        a = _box_sum(gx * gx, radius)
        b = _box_sum(gx * gy, radius)
        c = _box_sum(gy * gy, radius)
        rx = -_box_sum(gx * it, radius)
        ry = -_box_sum(gy * it, radius)
        det = a * c - b * b
        ok = det > det_eps
        safe = np.where(ok, det, 1.0)
        du = np.where(ok, (c * rx - b * ry) / safe, 0.0)
        dv = np.where(ok, (a * ry - b * rx) / safe, 0.0)
        flow[:, 0] += np.clip(du, -step_clip, step_clip)
        flow[:, 1] += np.clip(dv, -step_clip, step_clip)
    return flow


class FlowProvider:
    """Interface every flow source implements."""

    trainable = False

    def estimate(self, ref, nbr):
        raise NotImplementedError

    def parameters(self):
        """Named trainable tensors (empty for classical providers)."""
        return {}


class ZeroFlowProvider(FlowProvider):
    """Always-zero displacement; degrades alignment to identity sampling."""

    def estimate(self, ref, nbr):
        n, _, h, w = ref.shape
        return Tensor.zeros((n, 2, h, w))


class PyramidalFlowProvider(FlowProvider):
    """Coarse-to-fine dense Lucas-Kanade flow.

    Args:
        levels: pyramid depth; reduced automatically (with a warning) when
            frames are too small for the requested depth.
        iters: refinement iterations per level.
        window_radius: half-extent of the least-squares window.
        max_magnitude: displacement cap in pixels.
    """

    def __init__(self, levels=3, iters=4, window_radius=3,
                 max_magnitude=DEFAULT_MAX_MAGNITUDE, min_size=8):
        self.levels = levels
        self.iters = iters
        self.window_radius = window_radius
        self.max_magnitude = max_magnitude
        self.min_size = min_size

    def estimate(self, ref, nbr):
        ref_d = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
        nbr_d = nbr.data if isinstance(nbr, Tensor) else np.asarray(nbr)
        if ref_d.shape != nbr_d.shape:
            raise DimensionError(
                f"flow: frame shapes {ref_d.shape} vs {nbr_d.shape} differ")
        n, _, h, w = ref_d.shape
        levels = self.levels
        max_levels = 1
        size = min(h, w)
        while size // 2 >= self.min_size and max_levels < levels:
            size //= 2
            max_levels += 1
        if max_levels < levels:
            warnings.warn(f"flow: frames {h}x{w} too small for {levels} "
                          f"pyramid levels, using {max_levels}", stacklevel=2)
            levels = max_levels

        pyr_ref = [_to_luma(ref_d.astype(np.float32))]
        pyr_nbr = [_to_luma(nbr_d.astype(np.float32))]
        for _ in range(levels - 1):
            pyr_ref.append(_decimate(pyr_ref[-1]))
            pyr_nbr.append(_decimate(pyr_nbr[-1]))

        lh, lw = pyr_ref[-1].shape[1:]
        flow = np.zeros((n, 2, lh, lw), dtype=np.float32)
        for lvl in range(levels - 1, -1, -1):
            th, tw = pyr_ref[lvl].shape[1:]
            if flow.shape[2:] != (th, tw):
                from .kernels import resize_bilinear_fwd
                flow = resize_bilinear_fwd(flow, th, tw) * 2.0
            flow = _lk_refine(pyr_ref[lvl], pyr_nbr[lvl], flow,
                              self.iters, self.window_radius)
            np.clip(flow, -self.max_magnitude, self.max_magnitude, out=flow)
        return Tensor(np.ascontiguousarray(flow))


class ConvFlowProvider(FlowProvider):
    """Small trainable convolutional flow head (optional, same interface).

    Three 3x3 convolutions over the concatenated frame pair; the final layer
    starts at zero so training begins from zero flow.
    """

    trainable = True

    def __init__(self, hidden=16, seed=0, params=None):
        self.hidden = hidden
        if params is not None:
            self._params = dict(params)
            return
        rng = np.random.default_rng(seed)
        shapes = {
            "flow.c0.w": (hidden, 6, 3, 3), "flow.c0.b": (hidden,),
            "flow.c1.w": (hidden, hidden, 3, 3), "flow.c1.b": (hidden,),
            "flow.c2.w": (2, hidden, 3, 3), "flow.c2.b": (2,),
        }
        self._params = {}
        for name, shape in shapes.items():
            if name.startswith("flow.c2") or name.endswith(".b"):
                data = np.zeros(shape, dtype=np.float32)
            else:
                fan_in = int(np.prod(shape[1:]))
                limit = np.sqrt(6.0 / fan_in)
                data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
            self._params[name] = Tensor(data, requires_grad=True)

    def parameters(self):
        return dict(self._params)

    def estimate(self, ref, nbr):
        p = self._params
        x = ops.concat([ref, nbr], axis=1)
        x = ops.leaky_relu(ops.conv2d(x, p["flow.c0.w"], p["flow.c0.b"], padding=1))
        x = ops.leaky_relu(ops.conv2d(x, p["flow.c1.w"], p["flow.c1.b"], padding=1))
        return ops.conv2d(x, p["flow.c2.w"], p["flow.c2.b"], padding=1)


@dataclass
class FlowPair:
    """First- and second-order flows for one propagation direction.

    ``first[i]`` displaces toward the adjacent frame in the propagation
    direction, ``second[i]`` toward the frame two steps away; entries whose
    source index falls outside the sequence are exact zero fields.
    """

    direction: str
    first: list = field(default_factory=list)
    second: list = field(default_factory=list)


def flow_pairs(frames, direction, provider):
    """Enumerate s_{i->i-1}, s_{i->i-2} (forward) or the mirrored backward set."""
    if direction not in _DIRECTIONS:
        raise ValueError(f"flow_pairs: unknown direction '{direction}'")
    t = len(frames)
    if t < 1:
        raise DimensionError("flow_pairs: need at least one frame")
    n, _, h, w = frames[0].shape
    step = -1 if direction == "forward" else 1
    first, second = [], []
    for i in range(t):
        for order, dest in ((first, i + step), (second, i + 2 * step)):
            if 0 <= dest < t:
                order.append(provider.estimate(frames[i], frames[dest]))
            else:
                order.append(Tensor.zeros((n, 2, h, w), dtype=frames[i].dtype))
    return FlowPair(direction, first, second)


# ---------------------------------------------------------------------------
# optional on-disk cache: one file per (clip, i, p, direction)


def save_flow(path, flow, direction, i, p):
    """Raw little-endian format: 8 int32 header then float32 payload."""
    arr = np.ascontiguousarray(np.asarray(flow, dtype="<f4"))
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise DimensionError(f"save_flow: expected (2, h, w), got {arr.shape}")
    header = struct.pack("<8i", FLOW_MAGIC, FLOW_VERSION, 2,
                         arr.shape[1], arr.shape[2],
                         _DIRECTIONS.index(direction), i, p)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def load_flow(path):
    """Returns (flow array (2, h, w), direction, i, p)."""
    with open(path, "rb") as fh:
        header = fh.read(32)
        if len(header) != 32:
            raise ClipFormatError(f"flow file too short: {path}")
        magic, version, ch, h, w, dir_code, i, p = struct.unpack("<8i", header)
        if magic != FLOW_MAGIC:
            raise ClipFormatError(f"bad flow magic in {path}")
        if version != FLOW_VERSION or ch != 2:
            raise ClipFormatError(f"unsupported flow header in {path}")
        payload = fh.read(2 * h * w * 4)
    if len(payload) != 2 * h * w * 4:
        raise ClipFormatError(f"truncated flow payload in {path}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(2, h, w).copy()
    return arr, _DIRECTIONS[dir_code], i, p


class FlowCache:
    """Directory-backed flow store keyed by (clip, i, p, direction)."""

    def __init__(self, root):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def path_for(self, clip_id, i, p, direction):
        return os.path.join(self.root, f"{clip_id}_{direction}_{i:06d}_{p}.flow")

    def get_or_compute(self, clip_id, i, p, direction, compute):
        path = self.path_for(clip_id, i, p, direction)
        if os.path.exists(path):
            arr, _, _, _ = load_flow(path)
            return arr
        arr = compute()
        save_flow(path, arr, direction, i, p)
        return arr
