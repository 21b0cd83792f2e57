import math

import numpy as np
import pytest

from aseg.ablation import (ABLATION_VARIANTS, LOSS_PRESETS, PresetResult, VariantResult, ablation_configs,
                           format_ablation, format_presets, loss_decreased, run_ablation, run_loss_presets)
from aseg.data import synth_dataset
from aseg.losses import LossWeights
from aseg.model import ModelConfig, parameter_shapes
from aseg.training import TrainConfig

BASE = ModelConfig(levels=2, base_channels=4, input_size=(16, 16))


def test_variant_configs():
    cfgs = dict(ablation_configs(BASE))
    assert list(cfgs) == [v[0] for v in ABLATION_VARIANTS]
    names = {label: set(parameter_shapes(c)) for label, c in cfgs.items()}
    unet, res, cb, full = (names[v[0]] for v in ABLATION_VARIANTS)
    assert not any(".proj." in n for n in unet) and any(".proj." in n for n in res)
    assert not any(n.startswith("att") for n in res)
    assert any(".cbam." in n for n in cb) and not any(".hal." in n for n in cb)
    assert any(".hal." in n for n in full)


def test_presets_cover_seven_combinations():
    assert len(LOSS_PRESETS) == 7
    for name, weights in LOSS_PRESETS.items():
        parts = name.split("+")
        w = dict(zip(("dice", "bce", "focal"), weights))
        assert all(w[p] == pytest.approx(1 / len(parts)) for p in parts)
        assert sum(weights) == pytest.approx(1.0)
        LossWeights(*weights)


def test_format_ablation_gains():
    rs = [VariantResult(label, BASE, d, i, 10, 1.0, 0.1)
          for label, d, i in (("a", 0.9, 0.8), ("b", 0.95, 0.85), ("c", 0.85, 0.75))]
    lines = format_ablation(rs).splitlines()
    assert lines[0].split() == ["Metrics", "a", "b", "c"]
    assert lines[1].split() == ["Dice", "90.00", "95.00(+5.00)", "85.00(-5.00)"]
    assert lines[2].split() == ["IoU", "80.00", "85.00(+5.00)", "75.00(-5.00)"]
    assert format_ablation([]) == ""


def test_loss_decreased():
    assert loss_decreased(list(np.linspace(1, 0, 40)))
    assert not loss_decreased(list(np.linspace(0, 1, 40)))
    assert not loss_decreased([1.0] * 40)
    with pytest.raises(ValueError, match="at least 40"):
        loss_decreased([1.0] * 39)


def test_preset_result_status():
    w = LossWeights()
    ok = PresetResult("x", w, list(np.linspace(1, 0.5, 40)))
    assert ok.finite and ok.decreased and ok.ok
    bad = PresetResult("y", w, [math.nan])
    assert not bad.finite and not bad.ok
    flat = PresetResult("z", w, [0.5] * 40)
    assert flat.finite and not flat.ok
    text = format_presets([ok, bad, flat]).splitlines()
    assert text[1].endswith("ok") and text[2].endswith("non-finite") and text[3].endswith("not decreasing")


def test_run_ablation_smoke():
    samples = synth_dataset(4, seed=0, size=(16, 16))
    seen = []
    results = run_ablation(samples, None, BASE, TrainConfig(epochs=1, learning_rate=1e-3, batch_size=2),
                           dtype="float64", on_variant=seen.append)
    assert [r.label for r in results] == [v[0] for v in ABLATION_VARIANTS]
    assert seen == results
    assert all(r.steps == 2 and 0 <= r.iou <= r.dice <= 1 for r in results)


def test_run_loss_presets_smoke():
    samples = synth_dataset(2, seed=0, size=(16, 16))
    tcfg = TrainConfig(epochs=4, learning_rate=1e-3, batch_size=1)
    results = run_loss_presets(samples, BASE, tcfg, dtype="float64", presets=["bce", "dice+focal"], window=2)
    assert [r.name for r in results] == ["bce", "dice+focal"]
    assert all(len(r.losses) == 8 and r.finite for r in results)
    assert results[1].weights == LossWeights(0.5, 0.0, 0.5)
