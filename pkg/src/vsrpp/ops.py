"""Differentiable tensor operations.

Thin wrappers that run the numpy kernels from :mod:`vsrpp.kernels` and record
their vector-Jacobian products on the graph.  These are the building blocks
used by the alignment module and the propagation network.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError
from .tensor import Tensor, grad_enabled

DEFAULT_LEAKY_SLOPE = 0.1
CHARBONNIER_EPS = 1e-8


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution layer.

    Output spatial size follows floor((in + 2*pad - k) / stride) + 1.
    """

    in_channels: int
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: int = 1
    has_bias: bool = True

    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def output_hw(self, h, w):
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        return oh, ow

    def param_count(self):
        n = self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
        return n + (self.out_channels if self.has_bias else 0)

    def validate(self, x, w):
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"conv2d: input channels {x.shape[1]} != spec {self.in_channels}")
        if tuple(w.shape) != self.weight_shape():
            raise DimensionError(
                f"conv2d: weight shape {tuple(w.shape)} != spec {self.weight_shape()}")

    def apply(self, x, w, b=None):
        self.validate(x, w)
        return conv2d(x, w, b, stride=self.stride, padding=self.padding)


def _same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t is not None and t.dtype != dt:
            raise DimensionError(f"mixed dtypes {dt} and {t.dtype}")
    return dt


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation with zero padding; weight (out_c, in_c, kh, kw)."""
    _same_dtype(x, w, b)
    bd = b.data if b is not None else None
    record = grad_enabled() and (x.requires_grad or w.requires_grad
                                 or (b is not None and b.requires_grad))
    out = kernels.conv2d_fwd(x.data, w.data, bd, stride=stride,
                             padding=padding, want_cols=record)
    if not record:
        return Tensor(out)
    y, cols = out
    parents = (x, w) if b is None else (x, w, b)

    def vjp(go):
        dx, dw, db = kernels.conv2d_vjp(x.data, w.data, go, stride=stride,
                                        padding=padding,
                                        need_bias=b is not None, cols=cols)
        return (dx, dw) if b is None else (dx, dw, db)

    return Tensor.from_result(y, parents, vjp)


def bilinear_sample(x, coords):
    """Sample x at absolute (x, y) pixel positions, zeros outside the image."""
    _same_dtype(x, coords)
    y = kernels.bilinear_sample_fwd(x.data, coords.data)

    def vjp(go):
        return kernels.bilinear_sample_vjp(
            x.data, coords.data, go,
            need_x=x.requires_grad, need_coords=coords.requires_grad)

    return Tensor.from_result(y, (x, coords), vjp)


def warp(x, flow):
    """Displace x by a flow field: out(p) = x(p + flow(p))."""
    _same_dtype(x, flow)
    y = kernels.warp_fwd(x.data, flow.data)

    def vjp(go):
        return kernels.warp_vjp(x.data, flow.data, go,
                                need_x=x.requires_grad,
                                need_flow=flow.requires_grad)

    return Tensor.from_result(y, (x, flow), vjp)


def deform_conv2d(x, w, b, offsets, masks, groups, stride=1, padding=1):
    """Modulated deformable convolution; see kernels.dcn_fwd for layout."""
    _same_dtype(x, w, b, offsets, masks)
    bd = b.data if b is not None else None
    record = grad_enabled() and any(
        t is not None and t.requires_grad for t in (x, w, b, offsets, masks))
    out = kernels.dcn_fwd(x.data, w.data, bd, offsets.data, masks.data,
                          groups, stride=stride, padding=padding,
                          want_saved=record)
    if not record:
        return Tensor(out)
    y, saved = out
    parents = (x, w, offsets, masks) if b is None else (x, w, b, offsets, masks)

    def vjp(go):
        dx, dw, db, doff, dmask = kernels.dcn_vjp(
            x.data, w.data, bd, offsets.data, masks.data, go, groups,
            stride=stride, padding=padding,
            need_offsets=offsets.requires_grad, need_masks=masks.requires_grad,
            saved=saved)
        if b is None:
            return dx, dw, doff, dmask
        return dx, dw, db, doff, dmask

    return Tensor.from_result(y, parents, vjp)


def pixel_shuffle(x, r):
    """(n, c*r^2, h, w) -> (n, c, h*r, w*r); exact bijection."""
    y = kernels.pixel_shuffle_fwd(x.data, r)

    def vjp(go):
        return (kernels.pixel_unshuffle_fwd(go, r),)

    return Tensor.from_result(y, (x,), vjp)


def pixel_unshuffle(x, r):
    y = kernels.pixel_unshuffle_fwd(x.data, r)

    def vjp(go):
        return (kernels.pixel_shuffle_fwd(go, r),)

    return Tensor.from_result(y, (x,), vjp)


def leaky_relu(x, slope=DEFAULT_LEAKY_SLOPE):
    y = kernels.leaky_relu_fwd(x.data, slope)

    def vjp(go):
        return (kernels.leaky_relu_vjp(x.data, go, slope),)

    return Tensor.from_result(y, (x,), vjp)


def relu(x):
    return leaky_relu(x, 0.0)


def sigmoid(x):
    y = kernels.sigmoid_fwd(x.data)

    def vjp(go):
        return (kernels.sigmoid_vjp(y, go),)

    return Tensor.from_result(y, (x,), vjp)


def resize_bilinear(x, out_h, out_w):
    """Align-corners-false bilinear resize; identity when sizes match."""
    y = kernels.resize_bilinear_fwd(x.data, out_h, out_w)

    def vjp(go):
        return (kernels.resize_bilinear_vjp(x.shape, go, x.dtype),)

    return Tensor.from_result(y, (x,), vjp)


def concat(tensors, axis=1):
    """Concatenate along an axis; gradient splits back into the parts."""
    _same_dtype(*tensors)
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(go):
        return tuple(
            np.ascontiguousarray(np.take(go, np.arange(bounds[i], bounds[i + 1]),
                                         axis=axis))
            for i in range(len(tensors)))

    return Tensor.from_result(y, tuple(tensors), vjp)


def slice_channels(x, start, stop):
    """View of channels [start, stop); gradient zero-pads the complement."""
    if not (0 <= start < stop <= x.shape[1]):
        raise DimensionError(
            f"slice_channels: [{start}, {stop}) out of range for {x.shape[1]}")
    y = np.ascontiguousarray(x.data[:, start:stop])

    def vjp(go):
        g = np.zeros_like(x.data)
        g[:, start:stop] = go
        return (g,)

    return Tensor.from_result(y, (x,), vjp)


def slice_batch(x, start, stop):
    """Rows [start, stop) of the batch axis; gradient zero-pads the rest."""
    if not (0 <= start < stop <= x.shape[0]):
        raise DimensionError(
            f"slice_batch: [{start}, {stop}) out of range for {x.shape[0]}")
    y = np.ascontiguousarray(x.data[start:stop])

    def vjp(go):
        g = np.zeros_like(x.data)
        g[start:stop] = go
        return (g,)

    return Tensor.from_result(y, (x,), vjp)


def tile_flow_yx(flow, slots):
    """Repeat a 2-channel flow field into `slots` (y, x) channel pairs.

    Flow channel 0 (horizontal) lands in the x slot and channel 1 (vertical)
    in the y slot of every repeat, matching the deformable offset layout.
    The gradient sums each slot's contribution back onto the field.
    """
    if flow.shape[1] != 2:
        raise DimensionError(f"tile_flow_yx: expected 2 channels, got {flow.shape[1]}")
    n, _, h, w = flow.shape
    yx = flow.data[:, ::-1]
    y = np.ascontiguousarray(np.tile(yx, (1, slots, 1, 1)))

    def vjp(go):
        g = go.reshape(n, slots, 2, h, w).sum(axis=1)
        return (np.ascontiguousarray(g[:, ::-1]),)

    return Tensor.from_result(y, (flow,), vjp)


def charbonnier_loss(pred, target, eps=CHARBONNIER_EPS):
    """Mean over elements of sqrt((pred - target)^2 + eps^2)."""
    if eps <= 0:
        raise ValueError("charbonnier: eps must be positive")
    _same_dtype(pred, target)
    y = kernels.charbonnier_fwd(pred.data, target.data, eps)

    def vjp(go):
        return kernels.charbonnier_vjp(pred.data, target.data, eps, go)

    return Tensor.from_result(y, (pred, target), vjp)
