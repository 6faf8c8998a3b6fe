"""Patch-based training loop at desk scale.

Clips are degraded once, their full-frame flows are estimated once per clip
(both directions, both temporal orders), and every step crops aligned
LR/HR/flow windows.  The loss is the Charbonnier penalty averaged over
frames, optimized by Adam under a cosine-annealed schedule with separate
learning rates for the main network and a (possibly trainable) flow network,
which stays frozen for the first steps.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .clips import synth_clip
from .degrade import DegradationSpec, upsample_cubic
from .errors import ConfigError, TrainingDiverged
from .flow import FlowPair, flow_pairs
from .metrics import psnr
from .network import forward, init_model
from .optim import Adam, ParamGroup, collect_grads, cosine_lr, flow_frozen
from .tensor import Tensor, no_grad


@dataclass
class TrainSettings:
    """Toy-scale defaults; the full-scale recipe lives in FULL_SCALE_PRESET."""

    steps: int = 500
    batch: int = 1
    patch: int = 24
    seq_len: int = 4
    lr_main: float = 1e-4
    lr_flow: float = 2.5e-5
    freeze_steps: int = 50
    log_every: int = 50
    charbonnier_eps: float = 1e-8


# Reference recipe at full scale: 600K iterations, batch 8, 64x64 LR patches,
# 30-frame sequences, flow net frozen for the first 5000 iterations.  Kept as
# a named preset only; running it on a desktop CPU is not realistic.
FULL_SCALE_PRESET = TrainSettings(
    steps=600_000, batch=8, patch=64, seq_len=30,
    lr_main=1e-4, lr_flow=2.5e-5, freeze_steps=5000, log_every=1000)


@dataclass
class PreparedClip:
    clip_id: str
    hr: np.ndarray                # (t, 3, H, W)
    lr: np.ndarray                # (t, 3, h, w)
    flows: dict = field(default_factory=dict)  # (direction, order) -> (t, 2, h, w)


def default_synthetic_clips(seed, n_clips=12, frames=10, hr_size=(160, 160),
                            kind="translate", texture_sigma=None):
    """Deterministic training corpus of translating textures.

    Texture sharpness is drawn per clip from a range that leaves real
    aliasing in the x4 LR frames, so sub-pixel motion across frames carries
    information a per-frame upsampler cannot recover; velocities span slow
    sub-pixel to several-pixel motion.
    """
    rng = np.random.default_rng(seed)
    clips = []
    for k in range(n_clips):
        vel = tuple(rng.uniform(-1.2, 1.2, size=2) * 4.0)  # HR pixels/frame
        sigma = texture_sigma if texture_sigma is not None \
            else float(rng.uniform(1.0, 1.6))
        clips.append(synth_clip(kind, frames, seed * 1000 + k, size=hr_size,
                                velocity=vel, texture_sigma=sigma))
    return clips


def prepare_clips(clips, degradation, provider):
    """Degrade each clip and cache its full-frame flows at LR resolution."""
    prepared = []
    for clip in clips:
        lr = np.stack([degradation.apply(f) for f in clip.frames])
        item = PreparedClip(clip_id=clip.clip_id, hr=clip.frames, lr=lr)
        if not provider.trainable:
            frames = [Tensor(f[None]) for f in lr]
            for direction in ("forward", "backward"):
                pair = flow_pairs(frames, direction, provider)
                item.flows[(direction, 1)] = np.stack([t.data[0] for t in pair.first])
                item.flows[(direction, 2)] = np.stack([t.data[0] for t in pair.second])
        prepared.append(item)
    return prepared


def _crop_flow_window(store, direction, order, t0, seq_len, y0, x0, patch):
    """Window of cached flows with the sequence-boundary entries zeroed."""
    out = []
    src = store[(direction, order)]
    for k in range(seq_len):
        rel_prev = k - order if direction == "forward" else k + order
        if 0 <= rel_prev < seq_len:
            out.append(src[t0 + k, :, y0:y0 + patch, x0:x0 + patch])
        else:
            out.append(np.zeros((2, patch, patch), dtype=np.float32))
    return out


def sample_batch(prepared, rng, settings, scale, provider):
    """One training batch: frame tensors, target arrays, flow pairs."""
    b = settings.batch
    p = settings.patch
    l = settings.seq_len
    frames = [[] for _ in range(l)]
    targets = [[] for _ in range(l)]
    flow_np = {(d, o): [[] for _ in range(l)]
               for d in ("forward", "backward") for o in (1, 2)}
    for _ in range(b):
        clip = prepared[int(rng.integers(len(prepared)))]
        t_total, _, h, w = clip.lr.shape
        if t_total < l or h < p or w < p:
            raise ConfigError(
                f"clip {clip.clip_id} too small for seq_len={l} patch={p}")
        t0 = int(rng.integers(t_total - l + 1))
        y0 = int(rng.integers(h - p + 1))
        x0 = int(rng.integers(w - p + 1))
        for k in range(l):
            frames[k].append(clip.lr[t0 + k, :, y0:y0 + p, x0:x0 + p])
            targets[k].append(clip.hr[t0 + k, :,
                                      y0 * scale:(y0 + p) * scale,
                                      x0 * scale:(x0 + p) * scale])
        if not provider.trainable:
            for (d, o), dest in flow_np.items():
                window = _crop_flow_window(clip.flows, d, o, t0, l, y0, x0, p)
                for k in range(l):
                    dest[k].append(window[k])
    frame_tensors = [Tensor(np.stack(fs)) for fs in frames]
    target_tensors = [Tensor(np.stack(ts)) for ts in targets]
    if provider.trainable:
        flows = {d: flow_pairs(frame_tensors, d, provider)
                 for d in ("forward", "backward")}
    else:
        flows = {
            d: FlowPair(d,
                        first=[Tensor(np.stack(flow_np[(d, 1)][k])) for k in range(l)],
                        second=[Tensor(np.stack(flow_np[(d, 2)][k])) for k in range(l)])
            for d in ("forward", "backward")
        }
    return frame_tensors, target_tensors, flows


@dataclass
class TrainResult:
    weights: object
    config: object
    settings: TrainSettings
    seed: int
    loss_history: list
    first_loss: float
    final_loss: float


def make_param_groups(weights, settings):
    main = {n: t for n, t in weights.items() if not n.startswith("flow.")}
    flow = {n: t for n, t in weights.items() if n.startswith("flow.")}
    groups = [ParamGroup("main", main, settings.lr_main)]
    if flow:
        groups.append(ParamGroup("flow", flow, settings.lr_flow))
    return groups


def train_toy(config, settings, seed, clips, provider,
              degradation=None, log=None):
    """Train from scratch on the given HR clips; returns weights and history.

    Deterministic for fixed (config, settings, seed, clips, provider): every
    step's batch is drawn from a stream seeded by (seed, step), so a diverged
    step can be replayed from the reported batch seed.
    """
    config.validate()
    degradation = degradation or DegradationSpec(mode="BI", scale=config.upscale)
    if degradation.scale != config.upscale:
        raise ConfigError("degradation scale and config upscale differ")
    prepared = prepare_clips(clips, degradation, provider)
    weights = init_model(config, seed=seed, flow_provider=provider)
    groups = make_param_groups(weights, settings)
    adam = Adam(groups)
    has_flow_group = any(g.name == "flow" for g in groups)

    history = []
    first_loss = None
    loss_value = float("nan")
    for step in range(settings.steps):
        batch_seed = seed * 1_000_003 + step
        rng = np.random.default_rng(batch_seed)
        frames, targets, flows = sample_batch(prepared, rng, settings,
                                              config.upscale, provider)
        adam.zero_grad()
        outputs = forward(frames, config, weights, provider, flows=flows)
        loss = None
        for out, tgt in zip(outputs, targets):
            term = ops.charbonnier_loss(out, tgt, eps=settings.charbonnier_eps)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(outputs))
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            raise TrainingDiverged(
                f"non-finite loss at step {step} (batch seed {batch_seed})",
                batch_seed=batch_seed)
        if first_loss is None:
            first_loss = loss_value
        loss.backward()

        skip = ()
        if has_flow_group and flow_frozen(step, settings.freeze_steps):
            skip = ("flow",)
        grads = collect_grads(groups, skip_groups=skip)
        lr_now = {g.name: cosine_lr(step, settings.steps, g.lr_base)
                  for g in groups}
        adam.step(grads, lr_now, skip_groups=skip)

        if step % settings.log_every == 0 or step == settings.steps - 1:
            history.append((step, loss_value))
            if log:
                log(f"step {step:6d}  loss {loss_value:.6f}  "
                    f"lr {lr_now['main']:.2e}")
    return TrainResult(weights=weights, config=config, settings=settings,
                       seed=seed, loss_history=history,
                       first_loss=first_loss, final_loss=loss_value)


def restore_clip(lr_frames, config, weights, provider):
    """Run the network over a whole LR clip; returns (t, 3, H, W) in [0, 1]."""
    frames = [Tensor(f[None]) for f in np.asarray(lr_frames, dtype=np.float32)]
    with no_grad():
        outputs = forward(frames, config, weights, provider)
    return np.clip(np.stack([o.data[0] for o in outputs]), 0.0, 1.0)


def evaluate_against_baseline(hr_clip, config, weights, provider,
                              degradation=None, convention="y"):
    """Degrade a held-out clip, restore it, and compare with cubic upsampling."""
    degradation = degradation or DegradationSpec(mode="BI", scale=config.upscale)
    lr = np.stack([degradation.apply(f) for f in hr_clip.frames])
    restored = restore_clip(lr, config, weights, provider)
    baseline = np.clip(np.stack([upsample_cubic(f, config.upscale) for f in lr]),
                       0.0, 1.0)
    model_psnr = float(np.mean([psnr(r, h, convention)
                                for r, h in zip(restored, hr_clip.frames)]))
    base_psnr = float(np.mean([psnr(b, h, convention)
                               for b, h in zip(baseline, hr_clip.frames)]))
    return {"model_psnr": model_psnr, "baseline_psnr": base_psnr,
            "restored": restored, "baseline": baseline, "lr": lr}
