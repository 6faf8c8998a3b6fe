"""The full restoration network: extraction, grid propagation, reconstruction.

Per-frame features extracted by residual blocks are refined by a sequence of
propagation branches that alternate backward/forward in time (a grid over the
sequence).  Each branch aligns the features of the one- and two-step
neighbours in its direction with flow-guided deformable alignment, merges
them with the previous branch's feature through a residual stack, and the
last branch feeds a pixel-shuffle upsampler whose output is added to a
bilinear upsample of the input frame.
"""

import hashlib
import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import ops
from .alignment import AlignmentWeights, align_first_order, align_second_order, \
    alignment_param_specs
from .errors import ConfigError, DimensionError, WeightFormatError
from .flow import flow_pairs
from .tensor import Tensor

WEIGHT_MAGIC = b"VSRW"
WEIGHT_VERSION = 1

ALIGNMENT_MODES = ("flow_guided_dcn", "flow_warp_only", "none")
ABLATION_VARIANTS = ("A", "B", "C", "full")


@dataclass
class NetConfig:
    """Structural hyperparameters; everything the weight layout depends on."""

    channels: int = 64
    extraction_blocks: int = 5
    branch_blocks: int = 7
    num_branches: int = 4
    order: int = 2
    use_grid: bool = True
    alignment_mode: str = "flow_guided_dcn"
    upscale: int = 4
    dcn_groups: int = 16

    def validate(self):
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.extraction_blocks < 0 or self.branch_blocks < 0:
            raise ConfigError("block counts must be non-negative")
        if self.num_branches < 2 or self.num_branches % 2:
            raise ConfigError("num_branches must be a positive even number")
        if self.use_grid != (self.num_branches > 2):
            raise ConfigError("use_grid implies num_branches > 2 (grid) or "
                              "== 2 (single bidirectional pass)")
        if self.order not in (1, 2):
            raise ConfigError("order must be 1 or 2")
        if self.alignment_mode not in ALIGNMENT_MODES:
            raise ConfigError(f"alignment_mode must be one of {ALIGNMENT_MODES}")
        if self.upscale not in (1, 2, 4):
            raise ConfigError("upscale must be 1, 2 or 4")
        if self.alignment_mode == "flow_guided_dcn":
            if (self.order * self.channels) % self.dcn_groups:
                raise ConfigError(
                    f"dcn_groups={self.dcn_groups} must divide "
                    f"order*channels={self.order * self.channels}")
            if self.order == 2 and self.dcn_groups % 2:
                raise ConfigError("dcn_groups must be even for order-2 alignment")
        return self

    def upscale_stages(self):
        return int(round(math.log2(self.upscale)))

    def to_text(self):
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key=value, got '{raw}'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in known:
                raise ConfigError(f"config line {lineno}: unknown key '{key}'")
            if known[key] in ("bool", bool):
                if value.lower() not in ("true", "false"):
                    raise ConfigError(f"config line {lineno}: bad bool '{value}'")
                kwargs[key] = value.lower() == "true"
            elif known[key] in ("int", int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = value
        return cls(**kwargs).validate()


def ablation_config(variant, channels=64, dcn_groups=16, upscale=4,
                    extraction_blocks=5, branch_blocks=7):
    """The four comparison topologies, from plain flow warping to the full grid."""
    base = dict(channels=channels, dcn_groups=dcn_groups, upscale=upscale,
                extraction_blocks=extraction_blocks, branch_blocks=branch_blocks)
    if variant == "A":
        cfg = NetConfig(order=1, use_grid=False, num_branches=2,
                        alignment_mode="flow_warp_only", **base)
    elif variant == "B":
        cfg = NetConfig(order=1, use_grid=False, num_branches=2,
                        alignment_mode="flow_guided_dcn", **base)
    elif variant == "C":
        cfg = NetConfig(order=2, use_grid=False, num_branches=2,
                        alignment_mode="flow_guided_dcn", **base)
    elif variant == "full":
        cfg = NetConfig(order=2, use_grid=True, num_branches=4,
                        alignment_mode="flow_guided_dcn", **base)
    else:
        raise ConfigError(f"unknown ablation variant '{variant}'")
    return cfg.validate()


# ---------------------------------------------------------------------------
# parameter store


class ModelWeights:
    """Insertion-ordered named tensor store for every learnable parameter."""

    def __init__(self, tensors=None):
        self._tensors = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name, tensor):
        if name in self._tensors:
            raise WeightFormatError(f"duplicate parameter name '{name}'")
        self._tensors[name] = tensor

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def param_count(self):
        return sum(t.size for t in self._tensors.values())

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(WEIGHT_MAGIC)
            fh.write(struct.pack("<II", WEIGHT_VERSION, len(self._tensors)))
            for name, t in self._tensors.items():
                encoded = name.encode("utf-8")
                arr = np.ascontiguousarray(t.data, dtype="<f4")
                fh.write(struct.pack("<I", len(encoded)))
                fh.write(encoded)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())

    @classmethod
    def load(cls, path, requires_grad=True):
        def read_exact(fh, n, what):
            buf = fh.read(n)
            if len(buf) != n:
                raise WeightFormatError(f"truncated weight file while reading {what}")
            return buf

        weights = cls()
        with open(path, "rb") as fh:
            if read_exact(fh, 4, "magic") != WEIGHT_MAGIC:
                raise WeightFormatError(f"not a weight file: {path}")
            version, count = struct.unpack("<II", read_exact(fh, 8, "header"))
            if version != WEIGHT_VERSION:
                raise WeightFormatError(f"unsupported weight version {version}")
            for _ in range(count):
                (name_len,) = struct.unpack("<I", read_exact(fh, 4, "name length"))
                name = read_exact(fh, name_len, "name").decode("utf-8")
                (rank,) = struct.unpack("<I", read_exact(fh, 4, "rank"))
                shape = struct.unpack(f"<{rank}I", read_exact(fh, 4 * rank, "shape"))
                n_items = int(np.prod(shape)) if rank else 1
                payload = read_exact(fh, 4 * n_items, f"payload of {name}")
                arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
                if not np.isfinite(arr).all():
                    raise WeightFormatError(f"non-finite values in tensor '{name}'")
                weights.add(name, Tensor(arr, requires_grad=requires_grad))
        return weights

    def sha256(self):
        digest = hashlib.sha256()
        for name, t in self._tensors.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return digest.hexdigest()


# ---------------------------------------------------------------------------
# weight layout and initialization


def _resblock_specs(prefix, channels):
    return [
        (f"{prefix}.c1.w", (channels, channels, 3, 3), "he"),
        (f"{prefix}.c1.b", (channels,), "zero"),
        (f"{prefix}.c2.w", (channels, channels, 3, 3), "he_residual"),
        (f"{prefix}.c2.b", (channels,), "zero"),
    ]


def model_param_specs(config):
    """Ordered (name, shape, init) for every parameter the config implies."""
    config.validate()
    c = config.channels
    specs = [("feat.stem.w", (c, 3, 3, 3), "he"), ("feat.stem.b", (c,), "zero")]
    for k in range(config.extraction_blocks):
        specs += _resblock_specs(f"feat.res{k}", c)
    for j in range(1, config.num_branches + 1):
        if config.alignment_mode == "flow_guided_dcn":
            for suffix, shape, init in alignment_param_specs(
                    c, config.dcn_groups, config.order):
                specs.append((f"br{j}.align.{suffix}", shape, init))
        specs.append((f"br{j}.fuse.w", (c, 2 * c, 3, 3), "he"))
        specs.append((f"br{j}.fuse.b", (c,), "zero"))
        for k in range(config.branch_blocks):
            specs += _resblock_specs(f"br{j}.res{k}", c)
    for s in range(1, config.upscale_stages() + 1):
        specs.append((f"rec.up{s}.w", (4 * c, c, 3, 3), "he"))
        specs.append((f"rec.up{s}.b", (4 * c,), "zero"))
    specs.append(("rec.out.w", (3, c, 3, 3), "he"))
    specs.append(("rec.out.b", (3,), "zero"))
    return specs


def init_model(config, seed=0, flow_provider=None):
    """Deterministically initialized weights for a config.

    The offset head starts at zero so alignment begins as pure flow guidance;
    the second conv of each residual block starts small to keep the deep
    recurrent stack stable early in training.
    """
    rng = np.random.default_rng(seed)
    gain = math.sqrt(2.0 / (1.0 + ops.DEFAULT_LEAKY_SLOPE ** 2))
    weights = ModelWeights()
    for name, shape, init in model_param_specs(config):
        if init == "zero":
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = gain * math.sqrt(3.0 / fan_in)
            data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
            if init == "he_residual":
                data *= 0.1
        weights.add(name, Tensor(data, requires_grad=True))
    if flow_provider is not None and flow_provider.trainable:
        for name, t in flow_provider.parameters().items():
            weights.add(name, t)
    return weights


def check_compatible(weights, config):
    """Raise unless the weight store matches the config's layout exactly.

    Extra ``flow.*`` entries are allowed (trainable flow provider); anything
    else missing, surplus, or mis-shaped is reported by name.
    """
    expected = {name: shape for name, shape, _ in model_param_specs(config)}
    missing = [n for n in expected if n not in weights]
    surplus = [n for n in weights.names()
               if n not in expected and not n.startswith("flow.")]
    bad_shape = [n for n, shape in expected.items()
                 if n in weights and tuple(weights[n].shape) != shape]
    if missing or surplus or bad_shape:
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(sorted(missing)[:8]))
        if surplus:
            parts.append("unexpected: " + ", ".join(sorted(surplus)[:8]))
        if bad_shape:
            parts.append("shape mismatch: " + ", ".join(sorted(bad_shape)[:8]))
        raise WeightFormatError("weights incompatible with config ("
                                + "; ".join(parts) + ")")


def param_count(weights):
    """Exact number of learnable scalars."""
    return weights.param_count()


# ---------------------------------------------------------------------------
# forward pieces


def _conv(weights, prefix, x, padding=1):
    return ops.conv2d(x, weights[f"{prefix}.w"], weights[f"{prefix}.b"],
                      padding=padding)


def _resblock(weights, prefix, x):
    h = ops.relu(_conv(weights, f"{prefix}.c1", x))
    return x + _conv(weights, f"{prefix}.c2", h)


def _alignment_weights(weights, config, j):
    prefix = f"br{j}.align"
    return AlignmentWeights(
        channels=config.channels,
        groups=config.dcn_groups,
        order=config.order,
        trunk=tuple((weights[f"{prefix}.trunk{k}.w"], weights[f"{prefix}.trunk{k}.b"])
                    for k in range(3)),
        offset_head=(weights[f"{prefix}.off.w"], weights[f"{prefix}.off.b"]),
        mask_head=(weights[f"{prefix}.msk.w"], weights[f"{prefix}.msk.b"]),
        dcn=(weights[f"{prefix}.dcn.w"], weights[f"{prefix}.dcn.b"]),
    )


def extract_features(frames, weights, config):
    """Per-frame feature extraction: stem conv plus residual blocks.

    Frames are independent, so the sequence runs through the stack as one
    batch and is split back afterwards.
    """
    if not frames:
        raise DimensionError("extract_features: empty frame sequence")
    n = frames[0].shape[0]
    h = frames[0] if len(frames) == 1 else ops.concat(frames, axis=0)
    h = ops.leaky_relu(_conv(weights, "feat.stem", h))
    for k in range(config.extraction_blocks):
        h = _resblock(weights, f"feat.res{k}", h)
    if len(frames) == 1:
        return [h]
    return [ops.slice_batch(h, i * n, (i + 1) * n) for i in range(len(frames))]


@dataclass
class PropagationState:
    """Feature sequences per completed branch; index 0 is the extraction."""

    sequences: list
    directions: list = field(default_factory=list)

    @property
    def num_completed(self):
        return len(self.sequences) - 1


def branch_direction(j):
    """Branches alternate, starting backward: 1 -> backward, 2 -> forward, ..."""
    return "backward" if j % 2 == 1 else "forward"


def _aligned_feature(g_i, prev1, prev2, s1, s2, align_w, config):
    mode = config.alignment_mode
    if mode == "flow_guided_dcn":
        if config.order == 2:
            return align_second_order(g_i, prev1, prev2, s1, s2, align_w)
        return align_first_order(g_i, prev1, s1, align_w)
    if mode == "flow_warp_only":
        if config.order == 2:
            return (ops.warp(prev1, s1) + ops.warp(prev2, s2)) * 0.5
        return ops.warp(prev1, s1)
    if config.order == 2:
        return (prev1 + prev2) * 0.5
    return prev1


def propagate_branch(state, j, flows, weights, config, direction=None):
    """Run branch j over the whole sequence, appending its features.

    `flows` must carry the branch's propagation direction; a mismatch is an
    error.  Boundary timesteps read zero features and zero flows.
    """
    expected = direction or branch_direction(j)
    if flows.direction != expected:
        raise DimensionError(
            f"propagate_branch: branch {j} runs {expected}, got "
            f"{flows.direction} flows")
    g = state.sequences[0]
    prev_seq = state.sequences[-1]
    t = len(g)
    n, c, h, w = g[0].shape
    step = 1 if expected == "forward" else -1
    indices = range(t) if expected == "forward" else range(t - 1, -1, -1)
    align_w = None
    if config.alignment_mode == "flow_guided_dcn":
        align_w = _alignment_weights(weights, config, j)

    def zero_feat():
        return Tensor.zeros((n, c, h, w), dtype=g[0].dtype)

    def zero_flow():
        return Tensor.zeros((n, 2, h, w), dtype=g[0].dtype)

    current = [None] * t
    for i in indices:
        i1 = i - step
        prev1 = current[i1] if 0 <= i1 < t else zero_feat()
        s1 = flows.first[i] if 0 <= i1 < t else zero_flow()
        prev2 = s2 = None
        if config.order == 2:
            i2 = i - 2 * step
            prev2 = current[i2] if 0 <= i2 < t else zero_feat()
            s2 = flows.second[i] if 0 <= i2 < t else zero_flow()
        aligned = _aligned_feature(g[i], prev1, prev2, s1, s2, align_w, config)
        merged = ops.concat([prev_seq[i], aligned], axis=1)
        hfeat = ops.leaky_relu(_conv(weights, f"br{j}.fuse", merged))
        for k in range(config.branch_blocks):
            hfeat = _resblock(weights, f"br{j}.res{k}", hfeat)
        current[i] = aligned + hfeat
    state.sequences.append(current)
    state.directions.append(expected)
    return state


def reconstruct(features, frames, weights, config):
    """Upsample the final branch's features and add the bilinear image path.

    Like extraction this is per-frame independent, so the whole sequence is
    pushed through the head as one batch.
    """
    if len(features) != len(frames):
        raise DimensionError(
            f"reconstruct: {len(features)} feature maps vs {len(frames)} frames")
    scale = config.upscale
    t = len(frames)
    n = frames[0].shape[0]
    h = features[0] if t == 1 else ops.concat(features, axis=0)
    img = frames[0] if t == 1 else ops.concat(frames, axis=0)
    for s in range(1, config.upscale_stages() + 1):
        h = ops.leaky_relu(ops.pixel_shuffle(_conv(weights, f"rec.up{s}", h), 2))
    y = _conv(weights, "rec.out", h)
    base = ops.resize_bilinear(img, img.shape[2] * scale, img.shape[3] * scale)
    full = y + base
    if t == 1:
        return [full]
    return [ops.slice_batch(full, i * n, (i + 1) * n) for i in range(t)]


def forward(frames, config, weights, flow_provider, flows=None):
    """Whole pipeline: extract, propagate every branch, reconstruct.

    Args:
        frames: list of (n, 3, h, w) tensors in [0, 1], one per timestep.
        flows: optional precomputed {"forward": FlowPair, "backward":
            FlowPair}; estimated with `flow_provider` when omitted.
    """
    config.validate()
    state = PropagationState(sequences=[extract_features(frames, weights, config)])
    if flows is None:
        flows = {
            "backward": flow_pairs(frames, "backward", flow_provider),
            "forward": flow_pairs(frames, "forward", flow_provider),
        }
    for j in range(1, config.num_branches + 1):
        propagate_branch(state, j, flows[branch_direction(j)], weights, config)
    return reconstruct(state.sequences[-1], frames, weights, config)
