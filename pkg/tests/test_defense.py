import json

import numpy as np
import pytest

from dctpoison.data import SynthConfig, gen_synthetic
from dctpoison.dct import FrequencyBand, Trigger
from dctpoison.defense import (DEFAULT_RATES, DefenseConfig, EvalSet, calibration_images, channel_importance,
                               channel_prune, clean_subset, defense_sweep, fine_tune)
from dctpoison.metrics import AlphaGrid
from dctpoison.model import TrainConfig, fit_params, predict_images
from dctpoison.numerics import Rng64
from dctpoison.poison import PoisonSpec, p_baiqa


@pytest.fixture(scope="module")
def data():
    return gen_synthetic(SynthConfig(n_images=80, seed=41))


@pytest.fixture(scope="module")
def trigger():
    return Trigger(FrequencyBand(), 0.05 * Rng64(42).normal_array((3, 64)))


@pytest.fixture(scope="module")
def model(data):
    params, _ = fit_params(data.images, data.mos, TrainConfig(epochs=2, batch_size=16, seed=1))
    return params


@pytest.fixture(scope="module")
def evaluator(data, trigger):
    test = data.where_split("test")
    return EvalSet(test.images, test.mos, trigger, 40.0, grid=AlphaGrid((0.5, -1.0)), n_crops=3)


def test_config_defaults_and_validation():
    cfg = DefenseConfig()
    assert cfg.finetune_fraction == 0.2 and cfg.calibration_fraction == 0.2
    assert cfg.prune_rates == DEFAULT_RATES
    assert len(DEFAULT_RATES) == 20 and DEFAULT_RATES[0] == 0 and DEFAULT_RATES[-1] == 0.95
    for kwargs in ({"finetune_fraction": 0}, {"calibration_fraction": 1.5}, {"prune_rates": (0.5, 0.1)},
                   {"prune_rates": (0.0, 1.0)}, {"finetune_epochs": -1}):
        with pytest.raises(ValueError):
            DefenseConfig(**kwargs)


def test_clean_subset_avoids_poison(data, trigger):
    poisoned = p_baiqa(data, trigger, PoisonSpec(ratio=0.5))
    sub = clean_subset(poisoned, 0.5, 0)
    assert not sub.poisoned.any() and np.all(sub.split == "train")
    n_benign = np.sum((poisoned.split == "train") & ~poisoned.poisoned)
    assert len(sub) == int(np.ceil(0.5 * n_benign))


def test_zero_epoch_fine_tune(model, data):
    out, trace = fine_tune(model, clean_subset(data, 0.5, 0), DefenseConfig(finetune_epochs=0))
    assert trace == []
    for k in model:
        assert out[k].tobytes() == model[k].tobytes()
        assert out[k] is not model[k]


def test_fine_tune_rejects_poisoned_records(model, data, trigger):
    poisoned = p_baiqa(data, trigger, PoisonSpec(ratio=0.5))
    with pytest.raises(ValueError):
        fine_tune(model, poisoned.where_split("train"), DefenseConfig(finetune_epochs=1))


def test_fine_tune_traces_every_epoch(model, data, evaluator):
    before = {k: v.copy() for k, v in model.items()}
    out, trace = fine_tune(model, clean_subset(data, 0.5, 0), DefenseConfig(finetune_epochs=2), evaluator)
    assert [r["epoch"] for r in trace] == [1, 2]
    assert set(trace[0]) == {"epoch", "loss", "rmse", "mmae", "mmra"}
    assert trace[-1]["rmse"] == pytest.approx(evaluator.score(out)["rmse"])
    for k in model:
        assert model[k].tobytes() == before[k].tobytes()


def test_rate_zero_is_identity(model, data):
    out = channel_prune(model, 0.0, data.images[:4])
    x = data.images[:10]
    np.testing.assert_array_equal(predict_images(out, x), predict_images(model, x))


def test_rate_one_rejected(model, data):
    for rate in (1.0, 1.2, -0.1):
        with pytest.raises(ValueError):
            channel_prune(model, rate, data.images[:4])


def test_prunes_least_active_channels(model, data):
    calib = data.images[:16]
    imp = channel_importance(model, calib)
    out = channel_prune(model, 0.25, calib)
    dropped = np.flatnonzero(np.all(out["conv3.weight"] == 0, axis=(1, 2, 3)) & (out["head.weight"][0] == 0))
    assert len(dropped) >= 16
    expected = np.argsort(imp, kind="stable")[:16]
    assert np.all(out["conv3.bias"][expected] == 0)
    assert np.all(out["head.weight"][0, expected] == 0)
    keep = np.setdiff1d(np.arange(64), expected)
    np.testing.assert_array_equal(out["conv3.weight"][keep], model["conv3.weight"][keep])
    np.testing.assert_array_equal(out["head.weight"][0, keep], model["head.weight"][0, keep])


def test_sweep_rows_are_independent(model, data, evaluator):
    calib = data.images[:16]
    cfg = DefenseConfig(prune_rates=(0.0, 0.5, 0.9))
    table = defense_sweep(model, calib, evaluator, cfg)
    assert table.column("beta") == [0.0, 0.5, 0.9]
    assert table.rows[0]["rmse"] == evaluator.score(model)["rmse"]
    alone = defense_sweep(model, calib, evaluator, DefenseConfig(prune_rates=(0.9,)))
    assert alone.rows[0] == table.rows[2]
    assert table.to_csv().splitlines()[0] == "beta,rmse,mmae,mmra"
    assert len(table.to_csv().splitlines()) == 4
    assert json.loads(table.to_json())["rows"][1]["beta"] == 0.5


def test_calibration_is_benign_training_data(data, trigger):
    poisoned = p_baiqa(data, trigger, PoisonSpec(ratio=0.5))
    calib = calibration_images(poisoned, DefenseConfig())
    benign = poisoned.images[(poisoned.split == "train") & ~poisoned.poisoned]
    assert all(any(np.array_equal(c, b) for b in benign) for c in calib)


# --------------------------------------------------- desk-scale behaviour


def test_single_channel_prune_is_mild(p_run, defense_eval, prune_sweep):
    calib = calibration_images(p_run.dataset, DefenseConfig())
    one = channel_prune(p_run.params, 1 / 64, calib)
    assert abs(defense_eval.score(one)["rmse"] - prune_sweep.rows[0]["rmse"]) < 1.0


def test_heavy_pruning_collapses_capacity(prune_sweep):
    rmse = prune_sweep.column("rmse")
    assert prune_sweep.column("beta") == list(DEFAULT_RATES)
    assert rmse[-1] >= rmse[0]
    assert rmse[-1] >= 2 * rmse[0]


def test_sweep_row_zero_matches_undefended(prune_sweep, p_run, defense_eval):
    assert prune_sweep.rows[0] == {"beta": 0.0, **defense_eval.score(p_run.params)}


def test_fine_tune_keeps_benign_quality(finetuned):
    before, _, trace = finetuned
    assert len(trace) == DefenseConfig().finetune_epochs
    assert max(r["rmse"] for r in trace) <= 1.2 * before["rmse"]
