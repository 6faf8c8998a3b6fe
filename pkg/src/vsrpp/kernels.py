"""Dense NCHW numerical kernels: forward passes and their vector-Jacobian products.

Everything here is plain ``numpy.ndarray`` in, ``numpy.ndarray`` out; the
autodiff layer in :mod:`vsrpp.ops` wires these into the graph.  All kernels
preserve the floating dtype of their inputs (float32 for the pipeline,
float64 for gradient-check oracles) and are deterministic for a fixed
thread count.

Conventions, frozen for the whole package:

* image layout is (batch, channels, height, width), row-major;
* convolutions are cross-correlations (no kernel flip);
* sampling outside the image reads zeros (zero-padding rule);
* sample coordinate channel 0 is horizontal (x), channel 1 vertical (y);
* deformable offsets are laid out per (group, tap, y-then-x).
"""

import numpy as np

from .errors import DimensionError, NumericsError

# Flip to trade NaN detection for a little speed in long runs.
CHECK_FINITE = True

_FLOAT_DTYPES = (np.float32, np.float64)


def check_finite(arr, op_name):
    # a non-finite element always drives the sum non-finite (inf-inf is nan),
    # so one reduction replaces a full elementwise isfinite scan
    if CHECK_FINITE and not np.isfinite(arr.sum()):
        raise NumericsError(f"{op_name}: non-finite values in kernel output")
    return arr


def _pad2d(x, padding):
    if not padding:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def _out_extent(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# conv2d


def _im2col(x, kh, kw, stride, padding):
    """Unfold (n, c, h, w) into (n, c*kh*kw, oh*ow) patch columns.

    The (c, kh, kw)-major ordering keeps the copy's inner loop contiguous
    along image rows, which is what makes this materialization cheap.
    """
    n, c, h, w = x.shape
    x = _pad2d(x, padding)
    oh = _out_extent(h, kh, stride, padding)
    ow = _out_extent(w, kw, stride, padding)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def conv2d_fwd(x, w, b=None, stride=1, padding=0, want_cols=False):
    """Cross-correlation with zero padding.

    x: (n, cin, h, w); w: (cout, cin, kh, kw); b: (cout,) or None.
    With want_cols the unfolded patch matrix is returned for reuse by the
    backward pass (it is the only expensive intermediate).
    """
    n, cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wid} (pad {padding})")
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    y = np.matmul(w.reshape(cout, -1), cols)  # (n, cout, oh*ow)
    if b is not None:
        y += b.reshape(1, cout, 1)
    y = y.reshape(n, cout, oh, ow)
    check_finite(y, "conv2d")
    return (y, cols) if want_cols else y


def conv2d_vjp(x, w, dy, stride=1, padding=0, need_bias=False, cols=None):
    """Gradients of conv2d_fwd w.r.t. (x, w, b) given upstream dy.

    `cols` may carry the forward pass's patch matrix to avoid re-unfolding.
    """
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    _, _, oh, ow = dy.shape
    if cols is None:
        cols, _, _ = _im2col(x, kh, kw, stride, padding)
    w2 = w.reshape(cout, -1)
    p = oh * ow
    dyf = dy.reshape(n, cout, p)

    if n == 1:
        dw = np.matmul(dyf[0], cols[0].T).reshape(w.shape)
    else:
        dw = np.tensordot(dyf, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3)) if need_bias else None

    if stride == 1 and kh == kw and kh - 1 - padding >= 0:
        # input gradient of a stride-1 cross-correlation is itself a
        # cross-correlation of dy with the rotated, in/out-swapped kernel
        w_rot = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        dx = conv2d_fwd(dy, w_rot, padding=kh - 1 - padding)
        return dx, dw, db

    dcols = np.matmul(w2.T, dyf).reshape(n, cin, kh, kw, oh, ow)
    hp, wp = h + 2 * padding, wid + 2 * padding
    dxp = np.zeros((n, cin, hp, wp), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                dcols[:, :, i, j]
    # dx stays a view into the padded buffer; the accumulator copies anyway
    dx = dxp[:, :, padding:padding + h, padding:padding + wid]
    return dx, dw, db


# ---------------------------------------------------------------------------
# bilinear sampling / warping


def _corner_parts(cx, cy, h, w):
    """Floor corners, fractional weights and validity for bilinear lookups."""
    x0 = np.floor(cx)
    y0 = np.floor(cy)
    fx = cx - x0
    fy = cy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    parts = []
    for dy_, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx_
        yi = y0 + dy_
        wgt = (fx if dx_ else 1.0 - fx) * (fy if dy_ else 1.0 - fy)
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        flat = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        parts.append((flat, wgt * valid, valid))
    return parts, fx, fy


def bilinear_sample_fwd(x, coords):
    """Sample x at absolute pixel coordinates with zero outside the image.

    coords: (n, 2, oh, ow), channel 0 = x position, channel 1 = y position.
    """
    n, c, h, w = x.shape
    if coords.shape[0] != n or coords.shape[1] != 2:
        raise DimensionError(
            f"bilinear_sample: coords shape {coords.shape} must be (n, 2, oh, ow)")
    oh, ow = coords.shape[2], coords.shape[3]
    cx = coords[:, 0].reshape(n, -1)
    cy = coords[:, 1].reshape(n, -1)
    parts, _, _ = _corner_parts(cx, cy, h, w)
    xf = x.reshape(n, c, h * w)
    out = np.zeros((n, c, oh * ow), dtype=x.dtype)
    for flat, wgt, _ in parts:
        g = np.take_along_axis(xf, flat[:, None, :], axis=2)
        out += g * wgt[:, None, :].astype(x.dtype)
    return check_finite(out.reshape(n, c, oh, ow), "bilinear_sample")


def _scatter_add(shape, flat_index, values):
    """Deterministic scatter-add via bincount; returns array of `shape`."""
    total = int(np.prod(shape))
    acc = np.bincount(flat_index.ravel(),
                      weights=values.ravel().astype(np.float64),
                      minlength=total)
    return acc.reshape(shape)


def bilinear_sample_vjp(x, coords, dy, need_x=True, need_coords=True):
    """Gradients w.r.t. the sampled image and the sample coordinates.

    The coordinate gradient treats floor() as locally constant, i.e. it is the
    a.e.-derivative; callers must avoid exactly-integer positions when
    comparing against finite differences.
    """
    n, c, h, w = x.shape
    oh, ow = coords.shape[2], coords.shape[3]
    p = oh * ow
    cx = coords[:, 0].reshape(n, -1)
    cy = coords[:, 1].reshape(n, -1)
    parts, fx, fy = _corner_parts(cx, cy, h, w)
    dyf = dy.reshape(n, c, p)
    xf = x.reshape(n, c, h * w)

    dx = None
    if need_x:
        acc = np.zeros(n * c * h * w, dtype=np.float64)
        base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
        for flat, wgt, _ in parts:
            vals = dyf * wgt[:, None, :]
            idx = base + flat[:, None, :]
            acc += np.bincount(idx.ravel(), weights=vals.ravel().astype(np.float64),
                               minlength=acc.size)
        dx = acc.reshape(x.shape).astype(x.dtype)

    dcoords = None
    if need_coords:
        corners = []
        for flat, _, valid in parts:
            g = np.take_along_axis(xf, flat[:, None, :], axis=2)
            corners.append(g * valid[:, None, :].astype(x.dtype))
        v00, v01, v10, v11 = corners
        wy0 = (1.0 - fy)[:, None, :]
        wy1 = fy[:, None, :]
        wx0 = (1.0 - fx)[:, None, :]
        wx1 = fx[:, None, :]
        dcx = (dyf * (wy0 * (v01 - v00) + wy1 * (v11 - v10))).sum(axis=1)
        dcy = (dyf * (wx0 * (v10 - v00) + wx1 * (v11 - v01))).sum(axis=1)
        dcoords = np.stack([dcx, dcy], axis=1).reshape(n, 2, oh, ow).astype(x.dtype)
    return dx, dcoords


def base_grid(n, h, w, dtype):
    """Absolute identity sampling grid of shape (n, 2, h, w)."""
    gx, gy = np.meshgrid(np.arange(w, dtype=dtype), np.arange(h, dtype=dtype))
    return np.broadcast_to(np.stack([gx, gy]), (n, 2, h, w))


def warp_fwd(x, flow):
    """Warp x by a displacement field: output(p) = x(p + flow(p))."""
    n, _, h, w = x.shape
    if flow.shape != (n, 2, h, w):
        raise DimensionError(
            f"warp: flow shape {flow.shape} must be ({n}, 2, {h}, {w})")
    coords = base_grid(n, h, w, x.dtype) + flow
    return bilinear_sample_fwd(x, coords)


def warp_vjp(x, flow, dy, need_x=True, need_flow=True):
    n, _, h, w = x.shape
    coords = base_grid(n, h, w, x.dtype) + flow
    return bilinear_sample_vjp(x, coords, dy, need_x=need_x, need_coords=need_flow)


# ---------------------------------------------------------------------------
# modulated deformable convolution (per-tap offsets + masks, grouped offsets)


def _dcn_geometry(x, w, offsets, masks, groups, stride, padding):
    n, cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    k = kh * kw
    if cin != cin_w:
        raise DimensionError(
            f"deform_conv2d: input has {cin} channels, weight expects {cin_w}")
    if cin % groups:
        raise DimensionError(
            f"deform_conv2d: channels {cin} not divisible by {groups} groups")
    oh = _out_extent(h, kh, stride, padding)
    ow = _out_extent(wid, kw, stride, padding)
    if offsets.shape != (n, groups * k * 2, oh, ow):
        raise DimensionError(
            f"deform_conv2d: offsets shape {offsets.shape}, "
            f"expected ({n}, {groups * k * 2}, {oh}, {ow})")
    if masks.shape != (n, groups * k, oh, ow):
        raise DimensionError(
            f"deform_conv2d: masks shape {masks.shape}, "
            f"expected ({n}, {groups * k}, {oh}, {ow})")
    return n, cin, h, wid, cout, kh, kw, k, oh, ow


def _dcn_sample_coords(offsets, n, groups, k, kh, kw, oh, ow, stride, padding, dtype):
    """Absolute sample positions (n, groups, k, oh*ow) for y and x."""
    p = oh * ow
    off = offsets.reshape(n, groups, k, 2, p)
    oys, oxs = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    base_y = (oys.reshape(-1) * stride - padding).astype(dtype)
    base_x = (oxs.reshape(-1) * stride - padding).astype(dtype)
    tap_y = (np.arange(k) // kw).astype(dtype)
    tap_x = (np.arange(k) % kw).astype(dtype)
    sy = base_y[None, None, None, :] + tap_y[None, None, :, None] + off[:, :, :, 0]
    sx = base_x[None, None, None, :] + tap_x[None, None, :, None] + off[:, :, :, 1]
    return sy, sx


def _dcn_gather(x, sy, sx, groups):
    """Bilinear samples of x grouped by deformable group.

    Returns corner values (4 arrays of (n, groups, cg, k, p), validity-zeroed)
    plus the interpolation fractions.
    """
    n, cin, h, w = x.shape
    cg = cin // groups
    k, p = sy.shape[2], sy.shape[3]
    xg = x.reshape(n, groups, cg, h * w)
    cxf = sx.reshape(n, groups, k * p)
    cyf = sy.reshape(n, groups, k * p)
    parts, fx, fy = _corner_parts(cxf, cyf, h, w)
    # one fused gather for all four corners cuts the per-call overhead
    all_idx = np.concatenate([flat for flat, _, _ in parts], axis=2)
    gathered = np.take_along_axis(xg, all_idx[:, :, None, :], axis=3)
    corners = []
    for ci, (_, _, valid) in enumerate(parts):
        g = gathered[:, :, :, ci * k * p:(ci + 1) * k * p]
        g = g * valid[:, :, None, :].astype(x.dtype)
        corners.append(g.reshape(n, groups, cg, k, p))
    fx = fx.reshape(n, groups, 1, k, p)
    fy = fy.reshape(n, groups, 1, k, p)
    return corners, fx, fy, parts


def _dcn_values(corners, fx, fy):
    v00, v01, v10, v11 = corners
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def dcn_fwd(x, w, b, offsets, masks, groups, stride=1, padding=1,
            want_saved=False):
    """Modulated deformable convolution.

    Each kernel tap samples the input at its nominal position plus a learned
    per-(group, tap) offset via bilinear interpolation (zeros outside the
    image), scales the sample by its modulation mask, and accumulates with
    the dense convolution weight.

    Args:
        x: (n, cin, h, w) input features.
        w: (cout, cin, kh, kw) convolution weight.
        b: (cout,) bias or None.
        offsets: (n, groups*kh*kw*2, oh, ow), per (group, tap, y-then-x).
        masks: (n, groups*kh*kw, oh, ow), values in [0, 1].
        groups: deformable group count; input channels are split into
            `groups` contiguous blocks that share offsets.
        want_saved: also return the sampling intermediates for the backward
            pass (corner values, fractions, gather indices).
    """
    n, cin, h, wid, cout, kh, kw, k, oh, ow = _dcn_geometry(
        x, w, offsets, masks, groups, stride, padding)
    p = oh * ow
    sy, sx = _dcn_sample_coords(offsets, n, groups, k, kh, kw, oh, ow,
                                stride, padding, x.dtype)
    corners, fx, fy, parts = _dcn_gather(x, sy, sx, groups)
    vals = _dcn_values(corners, fx, fy)
    cols = vals * masks.reshape(n, groups, 1, k, p)
    cols = cols.reshape(n, cin * k, p)
    y = np.matmul(w.reshape(cout, cin * k), cols)
    if b is not None:
        y = y + b.reshape(1, cout, 1)
    y = check_finite(np.ascontiguousarray(y.reshape(n, cout, oh, ow)),
                     "deform_conv2d")
    if want_saved:
        return y, (corners, fx, fy, parts, vals)
    return y


def dcn_vjp(x, w, b, offsets, masks, dy, groups, stride=1, padding=1,
            need_offsets=True, need_masks=True, saved=None):
    """Gradients of dcn_fwd w.r.t. (x, w, b, offsets, masks)."""
    n, cin, h, wid, cout, kh, kw, k, oh, ow = _dcn_geometry(
        x, w, offsets, masks, groups, stride, padding)
    p = oh * ow
    cg = cin // groups
    if saved is None:
        sy, sx = _dcn_sample_coords(offsets, n, groups, k, kh, kw, oh, ow,
                                    stride, padding, x.dtype)
        corners, fx, fy, parts = _dcn_gather(x, sy, sx, groups)
        vals = _dcn_values(corners, fx, fy)
    else:
        corners, fx, fy, parts, vals = saved
    msk = masks.reshape(n, groups, 1, k, p)

    dyf = dy.reshape(n, cout, p)
    cols = (vals * msk).reshape(n, cin * k, p)
    dw = np.einsum("nop,nkp->ok", dyf, cols).reshape(w.shape).astype(w.dtype)
    db = dy.sum(axis=(0, 2, 3)) if b is not None else None

    dcols = np.matmul(w.reshape(cout, cin * k).T, dyf)
    dcg = dcols.reshape(n, groups, cg, k, p)

    dmasks = None
    if need_masks:
        dmasks = (dcg * vals).sum(axis=2).reshape(masks.shape).astype(masks.dtype)

    dvals = dcg * msk

    # input gradient: scatter each corner's share back into the image
    acc = np.zeros(n * groups * cg * h * wid, dtype=np.float64)
    base = (np.arange(n)[:, None, None] * groups
            + np.arange(groups)[None, :, None]) * cg + np.arange(cg)[None, None, :]
    base = base[:, :, :, None] * (h * wid)
    wgts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    for (flat, _, valid), cw in zip(parts, wgts):
        vmask = valid.reshape(n, groups, 1, k, p).astype(x.dtype)
        contrib = dvals * cw * vmask
        idx = base + flat.reshape(n, groups, 1, k * p)
        acc += np.bincount(idx.reshape(n, groups, cg, k, p).ravel(),
                           weights=contrib.ravel().astype(np.float64),
                           minlength=acc.size)
    dx = acc.reshape(x.shape).astype(x.dtype)

    doffsets = None
    if need_offsets:
        v00, v01, v10, v11 = corners
        dsx = (dvals * ((1 - fy) * (v01 - v00) + fy * (v11 - v10))).sum(axis=2)
        dsy = (dvals * ((1 - fx) * (v10 - v00) + fx * (v11 - v01))).sum(axis=2)
        doffsets = np.stack([dsy, dsx], axis=3).reshape(offsets.shape)
        doffsets = doffsets.astype(offsets.dtype)

    return dx, dw, db, doffsets, dmasks


# ---------------------------------------------------------------------------
# pixel shuffle


def pixel_shuffle_fwd(x, r):
    """(n, c*r^2, h, w) -> (n, c, h*r, w*r), standard sub-pixel layout."""
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise DimensionError(
            f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    y = x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, co, h * r, w * r))


def pixel_unshuffle_fwd(x, r):
    """Exact inverse of pixel_shuffle_fwd."""
    n, c, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise DimensionError(
            f"pixel_unshuffle: spatial size {h}x{w} not divisible by r={r}")
    y = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, c * r * r, h // r, w // r))


# ---------------------------------------------------------------------------
# elementwise


def leaky_relu_fwd(x, slope=0.1):
    return np.where(x >= 0, x, x.dtype.type(slope) * x)


def leaky_relu_vjp(x, dy, slope=0.1):
    return np.where(x >= 0, dy, x.dtype.type(slope) * dy)


def sigmoid_fwd(x):
    """Overflow-safe logistic function (no large exponentials either side)."""
    z = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return check_finite(y, "sigmoid")


def sigmoid_vjp(y, dy):
    return dy * y * (1.0 - y)


# ---------------------------------------------------------------------------
# bilinear resize (align-corners-false, edge-clamped)


def linear_resize_matrix(n_in, n_out, dtype=np.float64):
    """1-D align-corners-false interpolation matrix (n_out, n_in)."""
    if n_out < 1 or n_in < 1:
        raise DimensionError("resize: extents must be positive")
    if n_out == n_in:
        return np.eye(n_in, dtype=dtype)
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    rows = np.arange(n_out)
    mat = np.zeros((n_out, n_in), dtype=dtype)
    mat[rows, np.clip(i0, 0, n_in - 1)] += 1.0 - frac
    mat[rows, np.clip(i0 + 1, 0, n_in - 1)] += frac
    return mat


def resize_bilinear_fwd(x, out_h, out_w):
    n, c, h, w = x.shape
    ah = linear_resize_matrix(h, out_h).astype(x.dtype)
    aw = linear_resize_matrix(w, out_w).astype(x.dtype)
    y = np.matmul(ah, np.matmul(x, aw.T))
    return check_finite(np.ascontiguousarray(y), "resize_bilinear")


def resize_bilinear_vjp(x_shape, dy, dtype):
    n, c, h, w = x_shape
    out_h, out_w = dy.shape[2], dy.shape[3]
    ah = linear_resize_matrix(h, out_h).astype(dtype)
    aw = linear_resize_matrix(w, out_w).astype(dtype)
    return np.ascontiguousarray(np.matmul(ah.T, np.matmul(dy, aw)))


# ---------------------------------------------------------------------------
# Charbonnier penalty


def charbonnier_fwd(pred, target, eps):
    if pred.shape != target.shape:
        raise DimensionError(
            f"charbonnier: shapes {pred.shape} vs {target.shape} differ")
    d = pred - target
    r = np.sqrt(d * d + eps * eps)
    return check_finite(np.asarray(r.mean(), dtype=pred.dtype), "charbonnier")


def charbonnier_vjp(pred, target, eps, dy):
    d = pred - target
    r = np.sqrt(d * d + eps * eps)
    g = (dy * d / r / d.size).astype(pred.dtype)
    return g, -g
