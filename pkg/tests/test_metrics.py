import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dctpoison.metrics import (DEFAULT_ALPHAS, AlphaGrid, AttackCurves, AttackReport, DegenerateMetricWarning,
                               attack_curves, benign_metrics, evaluate, mean_psnr, plcc, rmse, srocc)
from dctpoison.model import PARAM_SHAPES, predict_images, zero_params
from dctpoison.numerics import Rng64

from oracles import NULL_ATTACK_MMAE, pearson, spearman


def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0
    assert abs(rmse([0, 0], [3, 4]) - math.sqrt(12.5)) < 1e-6
    assert abs(rmse([10], [7]) - 3) < 1e-6
    with pytest.raises(ValueError):
        rmse([1, 2], [1])
    with pytest.raises(ValueError):
        rmse([], [])


def test_srocc_examples():
    y = [1, 2, 3, 4, 5]
    assert abs(srocc(y, y) - 1) < 1e-6
    assert abs(srocc(y, y[::-1]) + 1) < 1e-6
    assert abs(srocc([1, 2, 3], [1, 3, 2]) - 0.5) < 1e-6
    with pytest.raises(ValueError):
        srocc([1], [1])


def test_plcc_examples():
    y = np.array([1.0, 4.0, 2.0, 8.0])
    assert abs(plcc(y, 2 * y + 3) - 1) < 1e-6
    assert abs(plcc(y, -y) + 1) < 1e-6
    assert abs(plcc([1, 2, 3], [1, 2, 4]) - 0.9820) < 1e-3


@pytest.mark.parametrize("fn", [srocc, plcc])
def test_constant_vector_is_degenerate(fn):
    with pytest.warns(DegenerateMetricWarning):
        assert fn([1, 2, 3], [5, 5, 5]) == 0.0
    with pytest.warns(DegenerateMetricWarning):
        assert fn([4, 4], [1, 2]) == 0.0


@given(st.lists(st.integers(0, 10000).map(lambda v: v / 100), min_size=3, max_size=30), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_correlations_match_oracles(y, seed):
    y = np.array(y)
    f = y + Rng64(seed).normal_array(len(y)) * 5
    if np.ptp(y) == 0 or np.ptp(f) == 0:
        return
    assert abs(srocc(y, f) - spearman(y, f)) < 1e-9
    assert abs(plcc(y, f) - pearson(y, f)) < 1e-9


@given(st.lists(st.integers(0, 50), min_size=3, max_size=20, unique=True), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_scale_invariances(values, seed):
    y = np.array(values, dtype=np.float64)
    f = Rng64(seed).permutation(len(y)).astype(np.float64) + 1
    # strictly increasing maps keep the ranks
    assert srocc(y, f) == pytest.approx(srocc(y, np.exp(f / 5) + f ** 3), abs=1e-12)
    assert plcc(y, f) == pytest.approx(plcc(y, 3.5 * f - 7), abs=1e-9)


def test_ties_use_average_ranks():
    y = [1, 2, 2, 3]
    f = [1, 2, 3, 4]
    assert srocc(y, f) == pytest.approx(spearman(y, f))


def test_benign_metrics_keys():
    out = benign_metrics([1, 2, 3], [1, 2, 4])
    assert set(out) == {"plcc", "srocc", "rmse"}


# ------------------------------------------------------------- alpha grid


def test_default_grid():
    grid = AlphaGrid()
    assert len(grid) == 20
    assert sorted(abs(a) for a in grid) == sorted([k / 10 for k in range(1, 11)] * 2)
    assert list(grid) == list(DEFAULT_ALPHAS)


@pytest.mark.parametrize("values", [(), (0.5, 0.0), (1.5,), (0.2, 0.2)])
def test_grid_rejects(values):
    with pytest.raises(ValueError):
        AlphaGrid(values)


# ---------------------------------------------------------- attack curves


class ConstantShift:
    """Adds ``alpha * c`` to every pixel."""

    def __init__(self, c):
        self.c = c

    def apply(self, images, alpha, clip=False):
        out = np.asarray(images, np.float32) + np.float32(alpha * self.c)
        return np.clip(out, 0, 1) if clip else out


def _mean_intensity_model():
    # every layer passes a positive copy of the local mean, so the score is
    # affine in the pixel values and a uniform shift moves it by a fixed amount
    p = zero_params()
    p["conv1.weight"][0] = 1 / 27
    p["conv1.bias"][0] = 1
    p["conv2.weight"][0, 0, 1, 1] = 1
    p["conv3.weight"][0, 0, 1, 1] = 1
    p["head.weight"][0, 0] = 4
    p["head.bias"][0] = 50
    return p


@pytest.fixture(scope="module")
def grey_images():
    return (0.5 + 0.02 * Rng64(1).normal_array((6, 64, 64, 3))).astype(np.float32)


def test_perfect_backdoor(grey_images):
    params = _mean_intensity_model()
    probe = ConstantShift(0.01)
    gain = (predict_images(params, probe.apply(grey_images, 1.0)) - predict_images(params, grey_images)).mean()
    assert gain > 0
    curves = attack_curves(params, grey_images, ConstantShift(0.01 * 40 / gain), 40.0, clip=False)
    assert max(curves.mae) < 1e-2 and curves.mmae < 1e-2
    np.testing.assert_allclose(curves.mra, 1.0, atol=1e-3)
    assert abs(curves.mmra - 1) < 1e-3


def test_ignoring_model_gives_null_curves(grey_images):
    curves = attack_curves(zero_params(), grey_images, ConstantShift(0.3), 40.0)
    for a, m, r in zip(curves.alphas, curves.mae, curves.mra):
        assert m == pytest.approx(abs(a) * 40, abs=1e-9)
        assert r == 0
    assert curves.mmae == pytest.approx(NULL_ATTACK_MMAE, abs=1e-9)
    assert NULL_ATTACK_MMAE == pytest.approx(np.mean([abs(a) * 40 for a in DEFAULT_ALPHAS]))


def test_means_are_exact(grey_images):
    curves = attack_curves(_mean_intensity_model(), grey_images, ConstantShift(0.05), 40.0,
                           grid=(0.3, -0.6, 1.0))
    assert curves.alphas == [0.3, -0.6, 1.0]
    assert math.isclose(curves.mmae, sum(curves.mae) / 3, rel_tol=1e-12)
    assert math.isclose(curves.mmra, sum(curves.mra) / 3, rel_tol=1e-12)


def test_attack_curves_rejections(grey_images):
    with pytest.raises(ValueError):
        attack_curves(zero_params(), grey_images, ConstantShift(0.1), 40.0, grid=(0.5, 0.0))
    with pytest.raises(ValueError):
        attack_curves(zero_params(), grey_images, ConstantShift(0.1), 0.0)


def test_curves_csv():
    text = AttackCurves([0.5, -0.5], [1.0, 2.0], [0.9, 1.1]).to_csv()
    assert text.splitlines() == ["alpha,mae,mra", "0.5,1.0,0.9", "-0.5,2.0,1.1"]


def test_report_round_trip_and_invariants(grey_images):
    mos = np.linspace(20, 90, len(grey_images))
    report = evaluate(_mean_intensity_model(), grey_images, mos, ConstantShift(0.02), 40.0,
                      config={"r": 0.2, "strategy": "discrete8"})
    d = json.loads(report.to_json())
    assert d["attack"]["mmae"] == pytest.approx(np.mean(d["attack"]["mae"]))
    assert d["attack"]["mmra"] == pytest.approx(np.mean(d["attack"]["mra"]))
    assert d["config"]["n_crops"] == 9 and d["config"]["r"] == 0.2
    back = AttackReport.from_dict(d)
    assert back.to_json() == report.to_json()
    assert math.isfinite(report.psnr1)


def test_report_handles_infinite_psnr(grey_images):
    with pytest.warns(DegenerateMetricWarning):
        report = evaluate(zero_params(), grey_images, np.linspace(0, 1, 6), ConstantShift(0.0), 40.0)
    assert report.psnr1 == math.inf
    back = AttackReport.from_dict(json.loads(report.to_json()))
    assert back.psnr1 == math.inf


def test_mean_psnr():
    x = np.full((2, 8, 8, 3), 0.5)
    assert mean_psnr(x, x) == math.inf
    assert mean_psnr(x, x + 8 / 255) == pytest.approx(20 * math.log10(255 / 8))


def test_param_shapes_count():
    assert sum(int(np.prod(s)) for s in PARAM_SHAPES.values()) == 23649
