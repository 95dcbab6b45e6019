import dataclasses

import numpy as np
import pytest

from mimlab import config as config_mod
from mimlab.cli import main
from mimlab.config import DataConfig, EvalConfig, SweepConfig, TargetConfig, TrainConfig
from mimlab.imaging import load_ppm, synth_image, write_ppm
from mimlab.masking import MaskConfig
from mimlab.model import EncoderConfig
from mimlab.trainer import load_checkpoint, save_checkpoint

TINY = TrainConfig(
    data=DataConfig(seed=0, num_images=16, num_classes=4, image_size=16),
    mask=MaskConfig("random", 4, 0.5),
    encoder=EncoderConfig(16, 4, 16, 1, 2),
    batch_size=8,
    epochs=1,
    eval=EvalConfig(probe_epochs=20, finetune_epochs=1, finetune_batch_size=8),
)


def write_cfg(path, cfg=TINY):
    path.write_text(config_mod.render(cfg))
    return str(path)


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_cfg(d / "toy.cfg")
    assert main(["pretrain", "--config", cfg, "--out", str(d / "out")]) == 0
    return d


def test_init_config_roundtrips(tmp_path):
    out = tmp_path / "a.cfg"
    assert main(["init-config", "--out", str(out)]) == 0
    assert config_mod.load(out) == TrainConfig()
    assert main(["init-config", "--kind", "sweep", "--out", str(tmp_path / "s.cfg")]) == 0
    assert config_mod.load(tmp_path / "s.cfg", SweepConfig) == SweepConfig()


def test_usage_errors_exit_1(capsys):
    assert main(["bogus"]) == 1
    assert main(["mask-sweep"]) == 1
    assert main(["pretrain", "--out", "x"]) == 1


# -- mask-sweep -----------------------------------------------------------------------

SWEEP = "strategies = random,square\npatch_sizes = 8,16\nratios = 0.3,0.6\nnum_seeds = 3\nimage_size = 64\n"


def test_mask_sweep_is_byte_reproducible(tmp_path):
    (tmp_path / "s.cfg").write_text(SWEEP)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["mask-sweep", "--config", str(tmp_path / "s.cfg"), "--out", str(a)]) == 0
    assert main(["mask-sweep", "--config", str(tmp_path / "s.cfg"), "--out", str(b), "--seed", "0"]) == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == "strategy,patch,ratio,avgdist_mean,avgdist_std" and len(lines) == 9


def test_mask_sweep_threads_do_not_change_output(tmp_path, monkeypatch):
    (tmp_path / "s.cfg").write_text(SWEEP)
    assert main(["mask-sweep", "--config", str(tmp_path / "s.cfg"), "--out", str(tmp_path / "a.csv")]) == 0
    monkeypatch.setenv("MIMLAB_THREADS", "2")
    assert main(["mask-sweep", "--config", str(tmp_path / "s.cfg"), "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    monkeypatch.setenv("MIMLAB_THREADS", "zero")
    assert main(["mask-sweep", "--config", str(tmp_path / "s.cfg"), "--out", str(tmp_path / "c.csv")]) == 1


def test_mask_sweep_empty_strategies_exit_1(tmp_path, capsys):
    (tmp_path / "s.cfg").write_text("strategies =\n")
    assert main(["mask-sweep", "--config", str(tmp_path / "s.cfg"), "--out", "-"]) == 1
    assert "strategies" in capsys.readouterr().err


def test_mask_sweep_skips_invalid_cell(tmp_path, capsys):
    (tmp_path / "s.cfg").write_text("patch_sizes = 32\nratios = 0.5,1.0\nnum_seeds = 2\nimage_size = 64\n")
    assert main(["mask-sweep", "--config", str(tmp_path / "s.cfg"), "--out", str(tmp_path / "o.csv")]) == 0
    assert "warning: skipping cell random/32/1.0" in capsys.readouterr().err
    assert len((tmp_path / "o.csv").read_text().splitlines()) == 2


def test_mask_sweep_io_error_exit_2(tmp_path):
    (tmp_path / "s.cfg").write_text("patch_sizes = 32\nratios = 0.5\nnum_seeds = 1\nimage_size = 64\n")
    assert main(["mask-sweep", "--config", str(tmp_path / "s.cfg"), "--out", str(tmp_path / "no" / "o.csv")]) == 2


# -- pretrain / probe / finetune -------------------------------------------------------

def test_pretrain_outputs_and_determinism(pretrained, tmp_path):
    out = pretrained / "out"
    assert (out / "final.smim").exists() and (out / "metrics.csv").exists()
    assert main(["pretrain", "--config", str(pretrained / "toy.cfg"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()
    assert (tmp_path / "final.smim").read_bytes() == (out / "final.smim").read_bytes()


def test_config_errors_exit_1_with_detail(tmp_path, capsys):
    text = "".join(l + "\n" for l in config_mod.render(TINY).splitlines() if not l.startswith("batch_size"))
    (tmp_path / "bad.cfg").write_text(text)
    assert main(["pretrain", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == 1
    assert "missing key 'batch_size'" in capsys.readouterr().err
    (tmp_path / "bad2.cfg").write_text("seed = 1\nfoo = 2\n")
    assert main(["pretrain", "--config", str(tmp_path / "bad2.cfg"), "--out", str(tmp_path / "o")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_resume_refuses_other_config_unless_forced(pretrained, tmp_path):
    other = write_cfg(tmp_path / "o.cfg", dataclasses.replace(TINY, epochs=2))
    ck = str(pretrained / "out" / "final.smim")
    assert main(["pretrain", "--config", other, "--out", str(tmp_path / "r"), "--resume", ck]) == 2
    assert main(["pretrain", "--config", other, "--out", str(tmp_path / "r"), "--resume", ck, "--force"]) == 0


def test_probe_pretrained_and_random_init(pretrained, tmp_path):
    cfg = str(pretrained / "toy.cfg")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["probe", "--config", cfg, "--ckpt", str(pretrained / "out" / "final.smim"), "--out", str(a)]) == 0
    assert main(["probe", "--config", cfg, "--ckpt", "random-init", "--out", str(b)]) == 0
    for f in (a, b):
        rows = f.read_text().splitlines()
        assert rows[0] == "protocol,seed,block,accuracy"
        assert [r.split(",")[0] for r in rows[1:]] == ["probe", "probe", "probe-best"]
    assert main(["probe", "--ckpt", "random-init", "--out", str(b)]) == 1


def test_finetune_row(pretrained, tmp_path):
    out = tmp_path / "f.csv"
    ck = str(pretrained / "out" / "final.smim")
    assert main(["finetune", "--config", str(pretrained / "toy.cfg"), "--ckpt", ck, "--out", str(out)]) == 0
    assert out.read_text().splitlines()[1].startswith("finetune,0,1,")


def test_missing_checkpoint_exit_2(tmp_path):
    assert main(["probe", "--ckpt", str(tmp_path / "nope.smim"), "--out", str(tmp_path / "x.csv")]) == 2


# -- visualize ---------------------------------------------------------------------------

def _panels(path, res=16):
    rgb = load_ppm(path).rgb
    return rgb[:, :, :res], rgb[:, :, res:2 * res], rgb[:, :, 2 * res:]


def test_visualize_empty_mask_recovers_original(pretrained, tmp_path):
    write_ppm(tmp_path / "m.ppm", np.zeros((3, 16, 16)))
    out = tmp_path / "v.ppm"
    assert main(["visualize", "--ckpt", str(pretrained / "out" / "final.smim"), "--image", "synth:0:3:16:4",
                 "--mask", str(tmp_path / "m.ppm"), "--out", str(out)]) == 0
    orig, masked, rec = _panels(out)
    assert np.array_equal(orig, rec) and np.array_equal(orig, masked)
    # the PPM stores 8-bit values
    np.testing.assert_allclose(orig, synth_image(0, 3, 16, 4)[0].rgb, atol=0.5 / 255 + 1e-7)


def test_visualize_random_mask(pretrained, tmp_path):
    out = tmp_path / "v.ppm"
    assert main(["visualize", "--ckpt", str(pretrained / "out" / "final.smim"), "--image", "synth:0:1:16:4",
                 "--mask", "random:0.5:8", "--out", str(out)]) == 0
    orig, masked, rec = _panels(out)
    black = masked.max(axis=0) == 0
    assert black.mean() == pytest.approx(0.5)
    assert np.array_equal(rec[:, ~black], orig[:, ~black])


def test_visualize_hand_drawn_mask(pretrained, tmp_path):
    m = np.zeros((3, 16, 16))
    m[:, 2:10, 4:13] = 1.0          # half of token rows 0 and 2, all of row 1; cols 1-2 plus a sliver
    write_ppm(tmp_path / "m.ppm", m)
    out = tmp_path / "v.ppm"
    assert main(["visualize", "--ckpt", str(pretrained / "out" / "final.smim"), "--image", "synth:0:1:16:4",
                 "--mask", str(tmp_path / "m.ppm"), "--out", str(out)]) == 0
    _, masked, _ = _panels(out)
    black = masked.max(axis=0) == 0
    expected = np.zeros((16, 16), bool)
    expected[4:8, 4:12] = True       # strict majority vote on the 4px token grid
    assert np.array_equal(black, expected)


def test_visualize_bad_mask_specs(pretrained, tmp_path):
    ck = str(pretrained / "out" / "final.smim")
    base = ["visualize", "--ckpt", ck, "--image", "synth:0:1:16:4", "--out", str(tmp_path / "v.ppm")]
    assert main(base + ["--mask", "random:0.5"]) == 1
    assert main(base + ["--mask", "random:0.5:6"]) == 1
    assert main(base + ["--mask", str(tmp_path / "missing.ppm")]) == 2


def test_visualize_classification_needs_decode(tmp_path):
    cfg = dataclasses.replace(TINY, target=TargetConfig(kind="bins", num_bins=4), max_steps=1)
    path = write_cfg(tmp_path / "b.cfg", cfg)
    assert main(["pretrain", "--config", path, "--out", str(tmp_path / "o")]) == 0
    base = ["visualize", "--ckpt", str(tmp_path / "o" / "final.smim"), "--image", "synth:0:1:16:4",
            "--mask", "random:0.5:4", "--out", str(tmp_path / "v.ppm")]
    assert main(base) == 1
    assert main(base + ["--decode"]) == 0


def test_numerical_failure_exit_3(pretrained, tmp_path):
    ck = load_checkpoint(pretrained / "out" / "final.smim")
    ck.params["blocks.0.mlp.fc2.bias"] = np.full_like(ck.params["blocks.0.mlp.fc2.bias"], np.inf)
    save_checkpoint(tmp_path / "bad.smim", ck)
    assert main(["visualize", "--ckpt", str(tmp_path / "bad.smim"), "--image", "synth:0:1:16:4",
                 "--mask", "random:0.5:4", "--out", str(tmp_path / "v.ppm")]) == 3
