"""Flow-guided deformable alignment.

The aligner warps the propagated features with optical flow, predicts
per-((group, tap)) offset residues and modulation masks from the warped
features, adds the flow back as the offset base, and applies a modulated
deformable convolution to the *unwarped* features.  Learning only the
residue keeps offsets near the flow field, which is what makes deformable
alignment trainable from scratch.

Channel bookkeeping (frozen):

* offsets carry 2 channels per (group, tap), ordered (group, tap, y-then-x);
* in the second-order form the first half of the deformable groups reads the
  newer feature and gets the first-order flow as base, the second half the
  older feature and the second-order flow (blocked halves);
* masks carry 1 channel per (group, tap) and pass through a sigmoid.
"""

from dataclasses import dataclass

from . import ops
from .errors import DimensionError
from .tensor import Tensor

KERNEL_SIZE = 3
TAPS = KERNEL_SIZE * KERNEL_SIZE


@dataclass
class AlignmentWeights:
    """Parameters of one aligner: shared trunk, two heads, and the DCN."""

    channels: int
    groups: int
    order: int
    trunk: tuple        # three (weight, bias) conv pairs, all 3x3
    offset_head: tuple  # (weight, bias) -> groups*taps*2 channels
    mask_head: tuple    # (weight, bias) -> groups*taps channels
    dcn: tuple          # (weight, bias) over order*channels input channels

    def __post_init__(self):
        if self.order not in (1, 2):
            raise DimensionError(f"alignment order must be 1 or 2, got {self.order}")
        if self.order == 2 and self.groups % 2:
            raise DimensionError(
                f"second-order alignment needs an even group count, got {self.groups}")


@dataclass
class AlignmentBundle:
    """Offsets (flow base already added) and sigmoid masks for one DCN call."""

    offsets: Tensor
    masks: Tensor
    groups: int
    n_prev: int

    def _half(self, arr, per_slot, first):
        half = self.groups // 2 * TAPS * per_slot
        return arr[:, :half] if first else arr[:, half:]

    @property
    def offsets_to_prev1(self):
        if self.n_prev == 1:
            return self.offsets.data
        return self._half(self.offsets.data, 2, True)

    @property
    def offsets_to_prev2(self):
        return None if self.n_prev == 1 else self._half(self.offsets.data, 2, False)

    @property
    def masks_to_prev1(self):
        if self.n_prev == 1:
            return self.masks.data
        return self._half(self.masks.data, 1, True)

    @property
    def masks_to_prev2(self):
        return None if self.n_prev == 1 else self._half(self.masks.data, 1, False)


def alignment_param_specs(channels, groups, order):
    """Ordered (suffix, shape, init) triples for one aligner's parameters."""
    c = channels
    trunk_in = (order + 1) * c + 2 * order
    specs = []
    for k, cin in enumerate((trunk_in, c, c)):
        specs.append((f"trunk{k}.w", (c, cin, 3, 3), "he"))
        specs.append((f"trunk{k}.b", (c,), "zero"))
    specs.append(("off.w", (groups * TAPS * 2, c, 3, 3), "zero"))
    specs.append(("off.b", (groups * TAPS * 2,), "zero"))
    specs.append(("msk.w", (groups * TAPS, c, 3, 3), "he"))
    specs.append(("msk.b", (groups * TAPS,), "zero"))
    specs.append(("dcn.w", (c, order * c, 3, 3), "he"))
    specs.append(("dcn.b", (c,), "zero"))
    return specs


def split_offsets(raw_o, raw_m, s1, s2, groups=16):
    """Bind raw head outputs to their temporal branches and flow bases.

    With s2 given, the first `groups/2 * taps` offset pairs receive s1 and
    the rest s2 (second-order form, 288/144 channels at 16 groups); with
    s2=None every pair receives s1 (first-order form).  Masks are
    sigmoid-activated.
    """
    n_prev = 1 if s2 is None else 2
    if raw_o.shape[1] != groups * TAPS * 2:
        raise DimensionError(
            f"split_offsets: {raw_o.shape[1]} offset channels, "
            f"expected {groups * TAPS * 2}")
    if raw_m.shape[1] != groups * TAPS:
        raise DimensionError(
            f"split_offsets: {raw_m.shape[1]} mask channels, "
            f"expected {groups * TAPS}")
    if n_prev == 2:
        if groups % 2:
            raise DimensionError("split_offsets: group count must be even for "
                                 "the two-feature form")
        half_slots = groups // 2 * TAPS
        base = ops.concat([ops.tile_flow_yx(s1, half_slots),
                           ops.tile_flow_yx(s2, half_slots)], axis=1)
    else:
        base = ops.tile_flow_yx(s1, groups * TAPS)
    offsets = raw_o + base
    masks = ops.sigmoid(raw_m)
    return AlignmentBundle(offsets=offsets, masks=masks,
                           groups=groups, n_prev=n_prev)


def _check_feature(name, t, channels, hw):
    if t.shape[1] != channels or t.shape[2:] != hw:
        raise DimensionError(
            f"alignment: {name} has shape {t.shape}, expected "
            f"(n, {channels}, {hw[0]}, {hw[1]})")


def _check_flow(name, t, hw):
    if t.shape[1] != 2 or t.shape[2:] != hw:
        raise DimensionError(
            f"alignment: {name} has shape {t.shape}, expected (n, 2, {hw[0]}, {hw[1]})")


def _heads(anchor_and_warped_and_flows, w):
    h = ops.concat(anchor_and_warped_and_flows, axis=1)
    for wt, bt in w.trunk:
        h = ops.leaky_relu(ops.conv2d(h, wt, bt, padding=1))
    raw_o = ops.conv2d(h, w.offset_head[0], w.offset_head[1], padding=1)
    raw_m = ops.conv2d(h, w.mask_head[0], w.mask_head[1], padding=1)
    return raw_o, raw_m


def bundle_second_order(g_i, f_prev1, f_prev2, s1, s2, w):
    """Offsets and masks for the two-feature aligner (before the DCN)."""
    hw = g_i.shape[2:]
    _check_feature("g_i", g_i, w.channels, hw)
    _check_feature("f_prev1", f_prev1, w.channels, hw)
    _check_feature("f_prev2", f_prev2, w.channels, hw)
    _check_flow("s1", s1, hw)
    _check_flow("s2", s2, hw)
    if w.order != 2:
        raise DimensionError("second-order bundle requested from first-order weights")
    warped1 = ops.warp(f_prev1, s1)
    warped2 = ops.warp(f_prev2, s2)
    raw_o, raw_m = _heads([g_i, warped1, warped2, s1, s2], w)
    return split_offsets(raw_o, raw_m, s1, s2, w.groups)


def bundle_first_order(g_i, f_prev1, s1, w):
    hw = g_i.shape[2:]
    _check_feature("g_i", g_i, w.channels, hw)
    _check_feature("f_prev1", f_prev1, w.channels, hw)
    _check_flow("s1", s1, hw)
    if w.order != 1:
        raise DimensionError("first-order bundle requested from second-order weights")
    warped1 = ops.warp(f_prev1, s1)
    raw_o, raw_m = _heads([g_i, warped1, s1], w)
    return split_offsets(raw_o, raw_m, s1, None, w.groups)


def align_second_order(g_i, f_prev1, f_prev2, s1, s2, w):
    """Align two propagated features onto the current frame's anchor.

    Both features are pre-warped by their flows to condition the offset and
    mask heads; the deformable convolution then reads the unwarped
    concatenation so no information is lost to the pre-warp interpolation.
    Returns the aligned feature with `w.channels` channels.
    """
    bundle = bundle_second_order(g_i, f_prev1, f_prev2, s1, s2, w)
    stacked = ops.concat([f_prev1, f_prev2], axis=1)
    return ops.deform_conv2d(stacked, w.dcn[0], w.dcn[1],
                             bundle.offsets, bundle.masks, w.groups, padding=1)


def align_first_order(g_i, f_prev1, s1, w):
    """Single-feature aligner used by the first-order configurations."""
    bundle = bundle_first_order(g_i, f_prev1, s1, w)
    return ops.deform_conv2d(f_prev1, w.dcn[0], w.dcn[1],
                             bundle.offsets, bundle.masks, w.groups, padding=1)
