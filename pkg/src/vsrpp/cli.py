"""Command-line entry point.

Subcommands wire the library into reproducible workflows: degrade clips,
train at toy scale, restore clips, evaluate metrics, run the ablation
lattice, and export temporal profiles.  Every run appends one JSON manifest
line capturing the resolved configuration, seed, weight hash, and metric
summary; every error leaves as a single machine-parsable line on stderr with
a nonzero exit code.
"""

import argparse
import datetime
import json
import math
import os
import sys

from ._alloc import tune_allocator
from .errors import ClipFormatError, ConfigError, VsrppError

# Published full-scale ablation reference (REDS4 PSNR, dB). Not reproducible
# in this toy setup; printed as context next to toy numbers.
REFERENCE_ABLATION_PSNR = {"A": 31.48, "B": 31.94, "C": 32.08, "full": 32.39}


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(out_dir, record):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifests.jsonl")
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def _base_record(args, command, seed=None):
    return {
        "command": command,
        "argv": sys.argv[1:],
        "seed": seed,
        "started": _now(),
    }


def _load_config(path, default=None):
    from .network import NetConfig
    if path is None:
        return default if default is not None else NetConfig().validate()
    with open(path, "r", encoding="utf-8") as fh:
        return NetConfig.from_text(fh.read())


def _make_provider(name):
    from .flow import ConvFlowProvider, PyramidalFlowProvider, ZeroFlowProvider
    if name == "pyramidal":
        return PyramidalFlowProvider()
    if name == "zero":
        return ZeroFlowProvider()
    if name == "conv":
        return ConvFlowProvider()
    raise ConfigError(f"unknown flow provider '{name}'")


def _clip_dirs(root):
    """A clip directory itself, or a directory of clip directories."""
    from .clips import FRAME_PATTERN
    entries = sorted(os.listdir(root))
    if any(FRAME_PATTERN.match(e) for e in entries):
        return [root]
    dirs = [os.path.join(root, e) for e in entries
            if os.path.isdir(os.path.join(root, e))]
    if not dirs:
        raise ClipFormatError(f"no clips found under {root}")
    return dirs


# ---------------------------------------------------------------------------
# subcommands


def cmd_degrade(args):
    from .clips import Clip, load_clip_dir, save_clip_dir
    from .degrade import DegradationSpec
    spec = DegradationSpec(mode=args.mode, scale=args.scale, sigma=args.sigma)
    record = _base_record(args, "degrade")
    import numpy as np
    for clip_dir in _clip_dirs(args.in_dir):
        clip = load_clip_dir(clip_dir)
        lr = np.stack([spec.apply(f) for f in clip.frames])
        rel = os.path.relpath(clip_dir, args.in_dir)
        dest = args.out_dir if rel == "." else os.path.join(args.out_dir, rel)
        save_clip_dir(Clip(lr, clip.clip_id), dest)
        print(f"degraded {clip.clip_id}: {clip.height}x{clip.width} -> "
              f"{lr.shape[2]}x{lr.shape[3]} ({args.mode})")
    record.update(mode=args.mode, scale=args.scale, sigma=args.sigma,
                  finished=_now())
    write_manifest(args.out_dir, record)
    return 0


def _training_clips(data, seed, n_clips, clip_frames):
    from .clips import load_clip_dir
    from .train import default_synthetic_clips
    if data.startswith("synthetic:"):
        kind = data.split(":", 1)[1]
        return default_synthetic_clips(seed=seed, kind=kind, n_clips=n_clips,
                                       frames=clip_frames)
    return [load_clip_dir(d) for d in _clip_dirs(data)]


def cmd_train_toy(args):
    from .network import NetConfig
    from .train import FULL_SCALE_PRESET, TrainSettings, train_toy

    if args.preset == "fullscale":
        p = FULL_SCALE_PRESET
        print("full-scale reference recipe (NOT executed - days of CPU time):")
        print(f"  steps={p.steps} batch={p.batch} patch={p.patch} "
              f"seq_len={p.seq_len}")
        print(f"  lr_main={p.lr_main} lr_flow={p.lr_flow} "
              f"freeze_steps={p.freeze_steps}")
        print("rerun with --preset toy (default) for a desk-scale run")
        return 0

    default_cfg = NetConfig(channels=16).validate()
    config = _load_config(args.config, default=default_cfg)
    settings = TrainSettings(
        steps=args.steps, batch=args.batch, patch=args.patch,
        seq_len=args.frames, lr_main=args.lr, lr_flow=args.flow_lr,
        freeze_steps=args.freeze_steps, log_every=args.log_every)
    provider = _make_provider(args.flow)
    clips = _training_clips(args.data, args.seed, args.clips, args.clip_frames)
    record = _base_record(args, "train-toy", seed=args.seed)

    result = train_toy(config, settings, args.seed, clips, provider,
                       log=print)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    result.weights.save(args.out)
    with open(args.out + ".config", "w", encoding="utf-8") as fh:
        fh.write(config.to_text())
    record.update(config=json.loads(json.dumps(vars(config))),
                  settings=vars(settings), data=args.data,
                  first_loss=result.first_loss, final_loss=result.final_loss,
                  weights=os.path.abspath(args.out),
                  weights_sha256=result.weights.sha256(), finished=_now())
    write_manifest(out_dir, record)
    print(f"saved weights to {args.out} "
          f"(loss {result.first_loss:.5f} -> {result.final_loss:.5f})")
    return 0


def cmd_restore(args):
    from .clips import Clip, load_clip_dir, save_clip_dir
    from .network import ModelWeights, check_compatible
    from .flow import ConvFlowProvider
    from .train import restore_clip

    config = _load_config(args.config)
    weights = ModelWeights.load(args.weights)
    check_compatible(weights, config)
    if any(n.startswith("flow.") for n in weights.names()):
        provider = ConvFlowProvider(params={n: t for n, t in weights.items()
                                            if n.startswith("flow.")})
    else:
        provider = _make_provider(args.flow)
    record = _base_record(args, "restore")
    for clip_dir in _clip_dirs(args.in_dir):
        clip = load_clip_dir(clip_dir)
        restored = restore_clip(clip.frames, config, weights, provider)
        rel = os.path.relpath(clip_dir, args.in_dir)
        dest = args.out_dir if rel == "." else os.path.join(args.out_dir, rel)
        save_clip_dir(Clip(restored, clip.clip_id + "-restored"), dest)
        print(f"restored {clip.clip_id}: {clip.num_frames} frames -> "
              f"{restored.shape[2]}x{restored.shape[3]}")
    record.update(weights=os.path.abspath(args.weights),
                  weights_sha256=weights.sha256(), finished=_now())
    write_manifest(args.out_dir, record)
    return 0


def cmd_eval(args):
    from .clips import load_clip_dir
    from .metrics import psnr, ssim, write_metrics_csv

    pred_dirs = _clip_dirs(args.pred)
    gt_dirs = _clip_dirs(args.gt)
    if len(pred_dirs) != len(gt_dirs):
        raise ClipFormatError(
            f"{len(pred_dirs)} prediction clips vs {len(gt_dirs)} references")
    rows = []
    per_clip = {}
    for pd, gd in zip(pred_dirs, gt_dirs):
        pred = load_clip_dir(pd)
        gt = load_clip_dir(gd)
        if pred.num_frames != gt.num_frames:
            raise ClipFormatError(
                f"frame count mismatch for {pred.clip_id}: "
                f"{pred.num_frames} vs {gt.num_frames}")
        scores = []
        for i, (p, g) in enumerate(zip(pred.frames, gt.frames)):
            ps = psnr(p, g, args.convention)
            ss = ssim(p, g, args.convention)
            rows.append((pred.clip_id, i, ps, ss))
            scores.append((ps, ss))
        finite = [s for s in scores if math.isfinite(s[0])]
        mean_psnr = (sum(s[0] for s in finite) / len(finite)) if finite else math.inf
        mean_ssim = sum(s[1] for s in scores) / len(scores)
        per_clip[pred.clip_id] = (mean_psnr, mean_ssim)
    write_metrics_csv(args.out, rows, args.convention)
    print(f"# convention={args.convention} crop=none")
    for clip_id, (p, s) in per_clip.items():
        print(f"{clip_id}: psnr {p:.3f} dB, ssim {s:.4f}")
    record = _base_record(args, "eval")
    record.update(convention=args.convention, csv=os.path.abspath(args.out),
                  clips={k: {"psnr": v[0] if math.isfinite(v[0]) else "inf",
                             "ssim": v[1]} for k, v in per_clip.items()},
                  finished=_now())
    write_manifest(os.path.dirname(os.path.abspath(args.out)) or ".", record)
    return 0


def cmd_ablate(args):
    from .clips import synth_clip
    from .network import ablation_config, param_count
    from .train import TrainSettings, train_toy, evaluate_against_baseline

    config = ablation_config(args.variant, channels=args.channels,
                             dcn_groups=args.dcn_groups)
    provider = _make_provider(args.flow)
    settings = TrainSettings(steps=args.steps, batch=args.batch,
                             patch=args.patch, seq_len=args.frames,
                             lr_main=args.lr, freeze_steps=args.freeze_steps,
                             log_every=args.log_every)
    clips = _training_clips(args.data, args.seed, args.clips, args.clip_frames)
    held = synth_clip("translate", 6, args.seed + 991, size=(128, 128),
                      velocity=(3.0, -1.5))
    record = _base_record(args, "ablate", seed=args.seed)

    result = train_toy(config, settings, args.seed, clips, provider, log=print)
    ev = evaluate_against_baseline(held, config, result.weights, provider)
    n_params = param_count(result.weights)
    ref = REFERENCE_ABLATION_PSNR[args.variant]
    print(f"variant {args.variant}: params {n_params}, "
          f"toy psnr {ev['model_psnr']:.3f} dB "
          f"(bicubic baseline {ev['baseline_psnr']:.3f} dB)")
    print(f"  full-scale reference for this variant (REDS4, not reproducible "
          f"at toy scale): {ref:.2f} dB")

    os.makedirs(args.out, exist_ok=True)
    table = os.path.join(args.out, "ablation.csv")
    fresh = not os.path.exists(table)
    with open(table, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write("variant,params,steps,seed,toy_psnr,baseline_psnr,"
                     "reference_psnr\n")
        fh.write(f"{args.variant},{n_params},{args.steps},{args.seed},"
                 f"{ev['model_psnr']:.4f},{ev['baseline_psnr']:.4f},{ref}\n")
    record.update(variant=args.variant, params=n_params,
                  toy_psnr=ev["model_psnr"], baseline_psnr=ev["baseline_psnr"],
                  reference_psnr=ref, finished=_now())
    write_manifest(args.out, record)
    return 0


def cmd_profile(args):
    import numpy as np
    from PIL import Image
    from .clips import load_clip_dir
    from .metrics import temporal_profile

    clip = load_clip_dir(args.in_dir)
    profile, score = temporal_profile(clip.frames, args.column)
    arr = np.round(np.clip(profile, 0.0, 1.0) * 255.0).astype(np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(args.out)
    print(f"temporal profile of column {args.column}: consistency score "
          f"{score:.6f} ({'static' if score == 0 else 'varying'})")
    record = _base_record(args, "profile")
    record.update(column=args.column, consistency_score=score,
                  image=os.path.abspath(args.out), finished=_now())
    write_manifest(os.path.dirname(os.path.abspath(args.out)) or ".", record)
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vsrpp",
        description="Desk-scale recurrent video super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="synthesize LR clips from HR clips")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--mode", choices=["BI", "BD"], default="BI")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--sigma", type=float, default=1.6)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train-toy", help="train a small model from scratch")
    p.add_argument("--config", default=None,
                   help="key=value network config file (default: toy config)")
    p.add_argument("--data", default="synthetic:translate",
                   help="clip directory or synthetic:<kind>")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--patch", type=int, default=20)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--clips", type=int, default=12,
                   help="synthetic corpus size (synthetic data only)")
    p.add_argument("--clip-frames", type=int, default=10)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--flow-lr", type=float, default=2.5e-5)
    p.add_argument("--freeze-steps", type=int, default=50)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--flow", choices=["pyramidal", "zero", "conv"],
                   default="pyramidal")
    p.add_argument("--preset", choices=["toy", "fullscale"], default="toy")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("restore", help="upscale clips with trained weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--flow", choices=["pyramidal", "zero"], default="pyramidal")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions vs references")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--convention", choices=["rgb", "y"], default="y")
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score one ablation variant")
    p.add_argument("--variant", choices=["A", "B", "C", "full"], required=True)
    p.add_argument("--out", required=True, help="directory for ablation.csv")
    p.add_argument("--data", default="synthetic:translate")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--patch", type=int, default=20)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--clips", type=int, default=12,
                   help="synthetic corpus size (synthetic data only)")
    p.add_argument("--clip-frames", type=int, default=10)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--freeze-steps", type=int, default=50)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--dcn-groups", type=int, default=16)
    p.add_argument("--flow", choices=["pyramidal", "zero"], default="pyramidal")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("profile", help="temporal-profile flicker diagnostic")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--column", type=int, required=True)
    p.add_argument("--out", required=True, help="profile PNG path")
    p.set_defaults(func=cmd_profile)

    return parser


def main(argv=None):
    tune_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VsrppError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
