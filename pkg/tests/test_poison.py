import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dctpoison.data import IqaDataset, SynthConfig, gen_synthetic
from dctpoison.dct import FrequencyBand, Trigger
from dctpoison.model import init_params, predict_images
from dctpoison.numerics import Rng64
from dctpoison.poison import (AlphaSampler, CleanLabelAttack, PgdConfig, PoisonLabelAttack, PoisonSpec, c_baiqa,
                              g_alpha, p_baiqa, sample_alpha, select_subset, targeted_pgd)


class FixedAlpha:
    def __init__(self, value):
        self.value = value

    def sample(self, rng):
        return self.value


@pytest.fixture(scope="module")
def trigger():
    return Trigger(FrequencyBand(), 0.02 * Rng64(30).normal_array((3, 64)))


@pytest.fixture(scope="module")
def data():
    return gen_synthetic(SynthConfig(n_images=60, seed=31))


@pytest.fixture(scope="module")
def surrogate():
    p = init_params(Rng64(32))
    p["head.bias"][0] = 55
    return p


def _one(y):
    img = Rng64(int(y)).random_array((1, 32, 32, 3)).astype(np.float32)
    return IqaDataset.from_arrays(img, [y])


# ----------------------------------------------------------------- sampler


def test_discrete8_frequencies():
    rng = Rng64(1)
    draws = np.array([sample_alpha(AlphaSampler("discrete8"), rng) for _ in range(100_000)])
    assert set(np.unique(draws)) == {-1, -0.75, -0.5, -0.25, 0.25, 0.5, 0.75, 1}
    assert abs(np.mean(np.abs(draws) == 1) - 0.40) <= 0.01
    assert abs(np.mean(np.abs(draws) == 0.75) - 0.30) <= 0.01
    assert abs(np.mean(np.abs(draws) == 0.25) - 0.10) <= 0.01
    assert abs(np.mean(draws > 0) - 0.5) <= 0.01


def test_pm1_and_uniform():
    rng = Rng64(2)
    pm = {AlphaSampler("pm1").sample(rng) for _ in range(200)}
    assert pm == {-1.0, 1.0}
    u = np.array([AlphaSampler("uniform").sample(rng) for _ in range(100_000)])
    assert u.min() >= -1 and u.max() <= 1 and abs(u.mean()) <= 0.02


def test_unknown_strategy():
    with pytest.raises(ValueError):
        AlphaSampler("gaussian")


# --------------------------------------------------------------- configs


@pytest.mark.parametrize("kwargs", [{"ratio": 0}, {"ratio": 1.5}, {"delta_y": 0}, {"g_mode": "tanh"}])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        PoisonSpec(**kwargs)


def test_pgd_config_validation():
    with pytest.raises(ValueError):
        PgdConfig(epsilon_t=1 / 255, alpha_t=2 / 255)
    with pytest.raises(ValueError):
        PgdConfig(iters=0)


# ---------------------------------------------------------------- subsets


def test_subset_size_and_determinism():
    a = select_subset(1000, 0.2, 5)
    assert len(a) == 200 and len(set(a.tolist())) == 200
    assert a.min() >= 0 and a.max() < 1000
    assert np.array_equal(a, select_subset(1000, 0.2, 5))
    assert not np.array_equal(a, select_subset(1000, 0.2, 6))
    assert len(select_subset(7, 0.2, 0)) == 2
    with pytest.raises(ValueError):
        select_subset(3, 0.1, 0)


@given(st.integers(1, 500), st.floats(0.01, 1.0), st.integers(0, 2**32))
@settings(max_examples=60, deadline=None)
def test_subset_is_ceil_of_ratio(n, ratio, seed):
    share = round(ratio * n, 9)
    if share < 1:
        with pytest.raises(ValueError):
            select_subset(n, ratio, seed)
        return
    k = int(np.ceil(share))
    idx = select_subset(n, ratio, seed)
    assert len(idx) == k and len(np.unique(idx)) == k


# ----------------------------------------------------------------- P-BAIQA


@pytest.mark.parametrize("y, alpha, label, effective", [(60, 0.5, 80, 0.5), (90, 1.0, 100, 0.25),
                                                         (10, -0.75, 0, -0.25), (50, -0.25, 40, -0.25)])
def test_poison_label_examples(trigger, y, alpha, label, effective):
    out = p_baiqa(_one(y), trigger, PoisonSpec(ratio=1.0, sampler=FixedAlpha(alpha)))
    assert out.mos[0] == label
    assert out.alpha_effective[0] == pytest.approx(effective)
    assert out.poisoned[0]
    np.testing.assert_array_equal(out.images[0], trigger.apply(_one(y).images[0], alpha, clip=True))


def test_thousand_records(trigger):
    imgs = np.full((1000, 16, 16, 3), 0.5, np.float32)
    ds = IqaDataset.from_arrays(imgs, np.linspace(0, 100, 1000))
    out = p_baiqa(ds, trigger, PoisonSpec(ratio=0.2))
    assert out.poisoned.sum() == 200 and (~out.poisoned).sum() == 800
    clean = ~out.poisoned
    assert np.array_equal(out.mos[clean], ds.mos[clean])
    assert out.images[clean].tobytes() == ds.images[clean].tobytes()
    assert np.isnan(out.alpha_effective[clean]).all()
    assert out.mos.min() >= 0 and out.mos.max() <= 100
    shift = out.mos[out.poisoned] - ds.mos[out.poisoned]
    np.testing.assert_allclose(shift, 40 * out.alpha_effective[out.poisoned], atol=1e-9)


def test_only_clean_train_records_poisoned(data, trigger):
    once = p_baiqa(data, trigger, PoisonSpec(ratio=0.25, seed=2))
    assert not np.any(once.poisoned & (data.split == "test"))
    twice = p_baiqa(once, trigger, PoisonSpec(ratio=0.25, seed=3))
    assert twice.poisoned.sum() > once.poisoned.sum()
    unchanged = once.poisoned
    assert np.array_equal(twice.mos[unchanged], once.mos[unchanged])


def test_p_baiqa_does_not_mutate_and_is_deterministic(data, trigger):
    before = data.images.copy(), data.mos.copy()
    a = p_baiqa(data, trigger, PoisonSpec(seed=9))
    b = p_baiqa(data, trigger, PoisonSpec(seed=9))
    assert data.images.tobytes() == before[0].tobytes() and np.array_equal(data.mos, before[1])
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.mos, b.mos)


def test_trigger_larger_than_image_rejected(trigger):
    ds = IqaDataset.from_arrays(np.zeros((2, 8, 8, 3), np.float32), [50, 60])
    with pytest.raises(ValueError):
        p_baiqa(ds, trigger, PoisonSpec(ratio=1.0))


# ------------------------------------------------------------------- PGD


def test_pgd_zero_budget_is_identity(surrogate, data):
    x = data.images[:4]
    out = targeted_pgd(surrogate, x, 50.0, PgdConfig(epsilon_t=0.0, alpha_t=0.0, iters=3))
    assert out.tobytes() == x.tobytes()


def test_pgd_projection_contract(surrogate, data):
    x = data.images[:6]
    out = targeted_pgd(surrogate, x, 50.0)
    assert out.dtype == np.float32
    assert np.max(np.abs(out.astype(np.float64) - x.astype(np.float64))) <= 2 / 255
    assert out.min() >= 0 and out.max() <= 1


def test_pgd_rejects_target_outside_range(surrogate, data):
    with pytest.raises(ValueError):
        targeted_pgd(surrogate, data.images[:1], 120.0)


def test_pgd_moves_toward_target(attack_kit, test_set):
    x = test_set.images[:100]
    before = np.abs(predict_images(attack_kit.surrogate, x) - 50)
    after = np.abs(predict_images(attack_kit.surrogate, targeted_pgd(attack_kit.surrogate, x, 50.0)) - 50)
    assert np.mean(after <= before) >= 0.9


# ----------------------------------------------------------------- C-BAIQA


def test_g_modes():
    a = np.array([-1.25, -0.5, 0.0, 1.1])
    np.testing.assert_array_equal(g_alpha(a, "clamp"), [-1, -0.5, 0, 1])
    np.testing.assert_array_equal(g_alpha(a, "identity"), a)
    np.testing.assert_allclose(g_alpha(a, "rescale"), a / 1.25)
    np.testing.assert_array_equal(g_alpha(np.array([0.5, -0.2]), "rescale"), [0.5, -0.2])
    with pytest.raises(ValueError):
        g_alpha(a, "tanh")


@pytest.mark.parametrize("y, alpha", [(90, 1.0), (30, -0.5), (100, 1.0), (0, -1.0), (50, 0.0)])
def test_clean_label_alpha_examples(surrogate, trigger, y, alpha):
    ds = _one(y)
    out = c_baiqa(ds, surrogate, trigger, PoisonSpec(ratio=1.0), use_pgd=False)
    assert out.mos[0] == y
    assert out.alpha_effective[0] == alpha
    np.testing.assert_array_equal(out.images[0], trigger.apply(ds.images[0], alpha, clip=True))


def test_clean_labels_unchanged(surrogate, trigger, data):
    out = c_baiqa(data, surrogate, trigger, PoisonSpec(ratio=0.3, seed=4))
    assert out.mos.tobytes() == data.mos.tobytes()
    assert out.poisoned.sum() == int(np.ceil(0.3 * np.sum(data.split == "train")))
    assert out.images[~out.poisoned].tobytes() == data.images[~out.poisoned].tobytes()


def test_remark1_consistency(surrogate, trigger):
    ds = gen_synthetic(SynthConfig(n_images=400, seed=33))
    out = c_baiqa(ds, surrogate, trigger, PoisonSpec(ratio=0.5, g_mode="identity"), use_pgd=False)
    alphas = out.alpha_effective[out.poisoned]
    ys = ds.mos[out.poisoned]
    assert abs(alphas.mean() - (ys.mean() - 50) / 40) <= 0.02
    assert abs(np.mean(alphas * 40 + 50) - ys.mean()) <= 1.0


# -------------------------------------------------------------- estimators


def test_estimators(trigger, surrogate, data):
    x, y = data.images, data.mos
    est = PoisonLabelAttack(trigger, ratio=0.5, random_state=1)
    px, py = est.fit_resample(x, y)
    assert est.poison_mask_.sum() == 30 and px.shape == x.shape
    assert np.allclose(py[est.poison_mask_] - y[est.poison_mask_], 40 * est.alpha_[est.poison_mask_])
    cl = CleanLabelAttack(trigger, surrogate, ratio=0.5, pgd_iters=2, random_state=1)
    cx, cy = cl.fit_resample(x, y)
    assert np.array_equal(cy, y) and cl.poison_mask_.sum() == 30
    with pytest.raises(ValueError):
        PoisonLabelAttack(ratio=0.5).fit_resample(x, y)
    assert PoisonLabelAttack().get_params()["strategy"] == "discrete8"
