import os
import subprocess
import sys

import numpy as np
import pytest

from aseg import cli
from aseg.checkpoint import load_checkpoint, save_checkpoint
from aseg.cli import config_help, main
from aseg.config import (ConfigError, RunConfig, load_run_config, model_config_from_text,
                         model_config_to_text, parse_config_text)
from aseg.data import decode_pgm, save_image_pgm, synth_dataset
from aseg.model import ModelConfig, ModelParams
from aseg.training import NonFiniteLossError

SMALL = ["--set", "levels=2", "--set", "base_channels=4", "--set", "input_size=16x16"]


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv("ASEG_SEED", raising=False)


# ----------------------------------------------------------------- config

def test_parse_config_text():
    text = "# comment\nlevels = 3  # trailing\n\ninput_size=64x64\n"
    assert parse_config_text(text) == {"levels": "3", "input_size": "64x64"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("levels 3")


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("levels = 2\nlearning_rate = 1e-3\nhal_levels = 0,1\nuse_cbam = no\n")
    cfg = load_run_config(path, {"learning_rate": "5e-4"})
    assert cfg.levels == 2 and cfg.learning_rate == 5e-4
    assert cfg.hal_levels == (0, 1) and cfg.use_cbam is False


def test_unknown_and_invalid_keys_name_the_key():
    with pytest.raises(ConfigError) as err:
        RunConfig().with_overrides({"learning_rat": "1"})
    assert err.value.key == "learning_rat"
    with pytest.raises(ConfigError) as err:
        RunConfig().with_overrides({"levels": "many"})
    assert err.value.key == "levels"
    with pytest.raises(ConfigError) as err:
        RunConfig().with_overrides({"dtype": "float16"})
    assert err.value.key == "dtype"


def test_defaults_match_published_settings():
    cfg = RunConfig()
    assert cfg.learning_rate == 1e-5 and cfg.epochs == 150 and cfg.input_size == (128, 128)
    assert (cfg.split_train, cfg.split_test, cfg.split_val) == (0.7, 0.1, 0.2)
    assert cfg.loss_alpha == cfg.loss_beta == cfg.loss_lambda == 1 / 3
    assert cfg.skip_mode == "series"


def test_to_text_round_trips():
    cfg = RunConfig().with_overrides({"levels": "2", "attn_dim": "8", "max_steps": "10", "hal_levels": "1"})
    assert load_run_config(None, parse_config_text(cfg.to_text())) == cfg


def test_model_config_text_round_trip():
    mc = ModelConfig(levels=2, base_channels=4, input_size=(32, 16), hal_levels=(1,), skip_mode="parallel_sum",
                     attn_dim=6, in_channels=1)
    assert model_config_from_text(model_config_to_text(mc)) == mc


def test_help_lists_every_key(capsys):
    assert main(["train", "--help"]) == 0
    out = capsys.readouterr().out
    for key in RunConfig.keys():
        assert key in out
    assert "[published setting: Adam, lr 1e-5]" in config_help()
    assert "150" in config_help()


# -------------------------------------------------------------------- CLI

def test_train_writes_outputs_and_log(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--synthetic", "6", "--out", str(out), "--epochs", "2", "--lr", "1e-3",
                 "--dtype", "float64", "--quiet", *SMALL])
    assert code == 0
    assert {p.name for p in out.iterdir()} == {"config.txt", "split.txt", "log.csv", "best.ckpt", "last.ckpt"}
    log = (out / "log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,val_dice,val_iou,wall_seconds,train_dice" and len(log) == 3
    split = (out / "split.txt").read_text().splitlines()
    assert [line.split(",")[0] for line in split].count("train") == 5  # 6 -> (5, 0, 1)
    assert load_checkpoint(out / "last.ckpt").adam is not None


def test_train_lr_zero_checkpoint_equals_init(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--lr", "0", "--synthetic", "4", "--epochs", "1", "--out", str(out), "--quiet",
                 "--seed", "5", *SMALL]) == 0
    init = ModelParams.init(ModelConfig(levels=2, base_channels=4, input_size=(16, 16)), seed=5)
    ck = load_checkpoint(out / "best.ckpt")
    for name, t in init:
        assert ck.params[name].data.tobytes() == t.data.tobytes(), name


def test_train_missing_dataset_writes_nothing(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", str(tmp_path / "missing"), "--out", str(out)]) == 2
    assert not out.exists()
    assert "does not exist" in capsys.readouterr().err


def test_config_error_exit_2_names_key(tmp_path, capsys):
    assert main(["train", "--synthetic", "2", "--out", str(tmp_path / "r"), "--set", "bogus_key=1"]) == 2
    assert "bogus_key" in capsys.readouterr().err
    cfg = tmp_path / "c.txt"
    cfg.write_text("levels = 0\n")
    assert main(["train", "--synthetic", "2", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "levels" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_usage_errors_exit_2(capsys):
    assert main(["frobnicate"]) == 2
    assert main(["train"]) == 2
    assert main(["train", "--synthetic", "0"]) == 2


def test_non_finite_loss_exit_3(tmp_path, capsys, monkeypatch):
    def diverge(*args, **kwargs):
        raise NonFiniteLossError(0, 1, 1, float("nan"))

    monkeypatch.setattr(cli, "train", diverge)
    assert main(["train", "--synthetic", "2", "--out", str(tmp_path / "r"), "--quiet", *SMALL]) == 3
    assert "batch 1, step 1" in capsys.readouterr().err


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("ASEG_SEED", "11")
    assert main(["synth", str(tmp_path / "a"), "--n", "1", *SMALL]) == 0
    assert main(["synth", str(tmp_path / "b"), "--n", "1", "--seed", "11", *SMALL]) == 0
    assert main(["synth", str(tmp_path / "c"), "--n", "1", "--seed", "12", *SMALL]) == 0
    a, b, c = ((tmp_path / d / "synth_0000.pgm").read_bytes() for d in "abc")
    assert a == b and a != c
    # an explicit config-file seed beats the environment
    cfg = tmp_path / "c.txt"
    cfg.write_text("seed = 12\n")
    assert main(["synth", str(tmp_path / "d"), "--n", "1", "--config", str(cfg), *SMALL]) == 0
    assert (tmp_path / "d" / "synth_0000.pgm").read_bytes() == c


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--synthetic", "6", "--out", str(out), "--epochs", "3", "--lr", "3e-3", "--quiet",
                 "--set", "levels=2", "--set", "base_channels=4", "--set", "input_size=32x32"]) == 0
    return out


def test_eval_prints_and_writes_csv(run_dir, tmp_path, capsys):
    csv = tmp_path / "sub" / "rows.csv"
    assert main(["eval", str(run_dir / "best.ckpt"), "--synthetic", "6", "--csv", str(csv)]) == 0
    out = capsys.readouterr().out
    dice = float(out.split("dice ")[1].split()[0])
    iou = float(out.split("iou ")[1].split()[0])
    assert abs(dice - 2 * iou / (1 + iou)) < 1e-5
    assert len(csv.read_text().splitlines()) == 7


def test_eval_high_threshold_predicts_background(run_dir, tmp_path, capsys):
    # a zero head makes every probability 0.5, which is below a 0.99 threshold
    ck = load_checkpoint(run_dir / "best.ckpt")
    ck.params["head.w"].data[...] = 0
    ck.params["head.b"].data[...] = 0
    save_checkpoint(ck.params, tmp_path / "half.ckpt")
    csv = tmp_path / "rows.csv"
    assert main(["eval", str(tmp_path / "half.ckpt"), "--synthetic", "3", "--threshold", "0.99",
                 "--csv", str(csv)]) == 0
    rows = csv.read_text().splitlines()[1:]
    assert all(r.split(",")[1] == "0" and r.split(",")[2] == "0" for r in rows)  # tp = fp = 0


def test_eval_rejects_bad_inputs(run_dir, tmp_path, capsys):
    assert main(["eval", str(tmp_path / "none.ckpt"), "--synthetic", "2"]) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert main(["eval", str(tmp_path / "junk.ckpt"), "--synthetic", "2"]) == 2
    assert main(["eval", str(run_dir / "best.ckpt"), "--synthetic", "2", "--threshold", "1.5"]) == 2


def test_predict_mask_heatmaps_and_idempotence(run_dir, tmp_path):
    img = tmp_path / "img.pgm"
    save_image_pgm(synth_dataset(1, seed=9, size=(48, 48))[0].image, img)  # resized to 32x32
    out1, out2 = tmp_path / "m1.pgm", tmp_path / "deep" / "m2.pgm"
    heat = tmp_path / "heat"
    assert main(["predict", str(run_dir / "best.ckpt"), str(img), str(out1), "--heatmap-dir", str(heat)]) == 0
    assert main(["predict", str(run_dir / "best.ckpt"), str(img), str(out2)]) == 0
    mask = decode_pgm(out1.read_bytes())
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 255}
    assert out1.read_bytes() == out2.read_bytes()
    names = sorted(p.name for p in heat.iterdir())
    assert len(names) == 2 * 3
    assert names[0] == "level0_cbam_gate.pgm"


def test_predict_unreadable_image_exit_2(run_dir, tmp_path, capsys):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n1 1\n255\n0\n")
    assert main(["predict", str(run_dir / "best.ckpt"), str(bad), str(tmp_path / "o.pgm")]) == 2
    assert "cannot read image" in capsys.readouterr().err
    assert not (tmp_path / "o.pgm").exists()


def test_gradcheck_negative_control_exit_1(capsys):
    code = main(["gradcheck", "--size", "8", "--levels", "1", "--base-channels", "2", "--corrupt-op", "conv2d"])
    assert code == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "encoder" in out


def test_gradcheck_small_passes_one_row_per_tensor(capsys):
    assert main(["gradcheck", "--size", "8", "--levels", "1", "--base-channels", "2"]) == 0
    out = capsys.readouterr().out
    cfg = ModelConfig(levels=1, base_channels=2, input_size=(8, 8))
    for name in ModelParams.init(cfg).tensors:
        assert sum(line.split()[0] == name for line in out.splitlines() if line.strip()) == 1, name


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "aseg", "synth", str(tmp_path / "s"), "--n", "1", *SMALL],
                         capture_output=True, text=True, env={**os.environ, "PYTHONHASHSEED": "0"})
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "s" / "synth_0000_mask.pgm").exists()
