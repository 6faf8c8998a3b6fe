"""End-to-end CLI workflows through main(argv)."""

import json
import os

import pytest

from vsrpp.cli import main
from vsrpp.clips import load_clip_dir, save_clip_dir, synth_clip

TOY_CONFIG = """\
channels=8
extraction_blocks=2
branch_blocks=2
num_branches=2
order=1
use_grid=false
alignment_mode=flow_guided_dcn
upscale=4
dcn_groups=4
"""


@pytest.fixture
def clip_dir(tmp_path):
    clip = synth_clip("translate", 4, 3, size=(64, 64), velocity=(1.5, -0.5))
    path = tmp_path / "hr" / "clipA"
    save_clip_dir(clip, path)
    return path


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY_CONFIG)
    return path


def read_bytes_of_dir(path):
    return {f: (path / f).read_bytes() for f in sorted(os.listdir(path))
            if f.endswith(".png")}


def test_degrade_shapes_and_determinism(tmp_path, clip_dir):
    out1 = tmp_path / "lr1"
    out2 = tmp_path / "lr2"
    assert main(["degrade", "--in", str(clip_dir), "--out", str(out1),
                 "--mode", "BI", "--scale", "4"]) == 0
    assert main(["degrade", "--in", str(clip_dir), "--out", str(out2),
                 "--mode", "BI", "--scale", "4"]) == 0
    lr = load_clip_dir(out1)
    assert (lr.height, lr.width) == (16, 16)
    assert read_bytes_of_dir(out1) == read_bytes_of_dir(out2)
    assert (out1 / "manifests.jsonl").exists()


def test_degrade_bd_uses_default_sigma(tmp_path, clip_dir, capsys):
    out = tmp_path / "bd"
    assert main(["degrade", "--in", str(clip_dir), "--out", str(out),
                 "--mode", "BD"]) == 0
    manifest = json.loads((out / "manifests.jsonl").read_text().splitlines()[-1])
    assert manifest["sigma"] == 1.6
    assert manifest["mode"] == "BD"


def test_degrade_missing_input_errors(tmp_path, capsys):
    rc = main(["degrade", "--in", str(tmp_path / "nope"), "--out",
               str(tmp_path / "o")])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "\n" not in err.strip()


def test_train_restore_eval_roundtrip(tmp_path, config_file, capsys):
    weights = tmp_path / "model.vsrw"
    rc = main(["train-toy", "--config", str(config_file),
               "--data", "synthetic:translate", "--clips", "2",
               "--clip-frames", "6", "--steps", "6",
               "--seed", "11", "--out", str(weights),
               "--patch", "12", "--frames", "3", "--log-every", "3"])
    assert rc == 0
    assert weights.exists()
    manifest_lines = (tmp_path / "manifests.jsonl").read_text().splitlines()
    record = json.loads(manifest_lines[-1])
    assert record["command"] == "train-toy"
    assert record["seed"] == 11
    assert "weights_sha256" in record

    # restore a small clip twice: byte-identical outputs, 4x size
    clip = synth_clip("translate", 3, 5, size=(96, 96), velocity=(2.0, 0.0))
    lr_dir = tmp_path / "lr"
    hr_dir = tmp_path / "hrclip"
    save_clip_dir(clip, hr_dir)
    assert main(["degrade", "--in", str(hr_dir), "--out", str(lr_dir)]) == 0
    out1 = tmp_path / "restored1"
    out2 = tmp_path / "restored2"
    for out in (out1, out2):
        rc = main(["restore", "--weights", str(weights),
                   "--in", str(lr_dir), "--out", str(out),
                   "--config", str(config_file)])
        assert rc == 0
    restored = load_clip_dir(out1)
    assert (restored.height, restored.width) == (96, 96)
    assert read_bytes_of_dir(out1) == read_bytes_of_dir(out2)

    # eval restored vs ground truth, then pred == gt sentinel path
    csv_path = tmp_path / "metrics.csv"
    rc = main(["eval", "--pred", str(out1), "--gt", str(hr_dir),
               "--convention", "y", "--out", str(csv_path)])
    assert rc == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "# convention=y crop=none"
    assert lines[1] == "clip,frame,psnr,ssim"
    assert len(lines) == 2 + 3

    rc = main(["eval", "--pred", str(hr_dir), "--gt", str(hr_dir),
               "--convention", "rgb", "--out", str(tmp_path / "self.csv")])
    assert rc == 0
    rows = (tmp_path / "self.csv").read_text().splitlines()[2:]
    for row in rows:
        assert row.endswith(",inf,1.000000")


def test_train_seed_reproducibility(tmp_path, config_file):
    w1 = tmp_path / "a.vsrw"
    w2 = tmp_path / "b.vsrw"
    for out in (w1, w2):
        rc = main(["train-toy", "--config", str(config_file),
                   "--data", "synthetic:translate", "--clips", "2",
                   "--clip-frames", "6", "--steps", "4",
                   "--seed", "7", "--out", str(out),
                   "--patch", "12", "--frames", "3"])
        assert rc == 0
    assert w1.read_bytes() == w2.read_bytes()


def test_fullscale_preset_prints_without_running(tmp_path, capsys):
    rc = main(["train-toy", "--preset", "fullscale", "--out",
               str(tmp_path / "x.vsrw")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "600000" in out.replace("steps=", "").replace(",", "") or \
           "steps=600000" in out
    assert "lr_main=0.0001" in out
    assert "lr_flow=2.5e-05" in out
    assert not (tmp_path / "x.vsrw").exists()


def test_restore_incompatible_config_errors(tmp_path, config_file, capsys):
    weights = tmp_path / "model.vsrw"
    assert main(["train-toy", "--config", str(config_file),
                 "--data", "synthetic:translate", "--clips", "2",
                 "--clip-frames", "6", "--steps", "2",
                 "--seed", "1", "--out", str(weights),
                 "--patch", "12", "--frames", "3"]) == 0
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text(TOY_CONFIG.replace("branch_blocks=2", "branch_blocks=3"))
    clip = synth_clip("texture_noise", 2, 1, size=(32, 32))
    lr_dir = tmp_path / "lrx"
    save_clip_dir(clip, lr_dir)
    rc = main(["restore", "--weights", str(weights), "--in", str(lr_dir),
               "--out", str(tmp_path / "o"), "--config", str(bad_cfg)])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error: WeightFormatError")
    assert "br1.res2" in err


def test_profile_static_clip_scores_zero(tmp_path, capsys):
    clip = synth_clip("texture_noise", 4, 9, size=(32, 32))
    clip_path = tmp_path / "static"
    save_clip_dir(clip, clip_path)
    png = tmp_path / "profile.png"
    rc = main(["profile", "--in", str(clip_path), "--column", "10",
               "--out", str(png)])
    assert rc == 0
    assert png.exists()
    out = capsys.readouterr().out
    assert "score 0.000000" in out
    assert "static" in out


def test_ablate_appends_table_with_reference(tmp_path, capsys):
    out_dir = tmp_path / "ablation"
    rc = main(["ablate", "--variant", "A", "--out", str(out_dir),
               "--steps", "3", "--seed", "2", "--patch", "12",
               "--clips", "2", "--clip-frames", "6",
               "--frames", "3", "--channels", "8", "--dcn-groups", "4",
               "--log-every", "2"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "31.48" in text  # full-scale reference metadata for variant A
    table = (out_dir / "ablation.csv").read_text().splitlines()
    assert table[0].startswith("variant,params,")
    assert table[1].startswith("A,")


def test_unknown_variant_rejected(tmp_path, capsys):
    with pytest.raises(SystemExit):
        main(["ablate", "--variant", "Z", "--out", str(tmp_path)])
