import math

import numpy as np
import pytest
from sklearn.base import clone

from sgmlab._validation import UsageError
from sgmlab.score_matching import (
    DSMRegressor,
    RandomAffineScore,
    ScoreModel,
    dsm_loss,
    fit_dsm,
    l2_loss,
    objective_equivalence_check,
)
from sgmlab.score_oracle import exact_score, measure_l2_error, trained_score
from sgmlab.targets import Gaussian, GaussianMixture

MIX = GaussianMixture.isotropic([0.4, 0.6], [[-2.0, 0.0], [2.0, 1.0]], [0.5, 1.0])


def test_dsm_loss_of_exact_stationary_score():
    d, t = 2, 1.0
    q = Gaussian.standard(d)
    val, se = dsm_loss(exact_score(q), q, t, 200_000, np.random.default_rng(0))
    closed = d * math.exp(-2 * t) / (1 - math.exp(-2 * t))
    assert closed == pytest.approx(0.31304, abs=1e-5)
    assert abs(val - closed) <= 3 * se


def test_dsm_loss_refuses_time_zero():
    q = Gaussian.standard(1)
    with pytest.raises(UsageError):
        dsm_loss(exact_score(q), q, 0.0, 100, np.random.default_rng(0))


def test_l2_loss_of_exact_score_is_zero():
    val, se = l2_loss(exact_score(MIX), MIX, 0.5, 1000, np.random.default_rng(0))
    assert val == 0.0 and se == 0.0


def test_equivalence_on_random_affine_pair_for_mixture():
    g = np.random.default_rng(1)
    s1, s2 = RandomAffineScore.draw(g, 2), RandomAffineScore.draw(g, 2)
    rep = objective_equivalence_check(s1, s2, MIX, 0.5, 50_000, g)
    assert rep.passed
    assert abs(rep.dsm_gap) > 10 * rep.se  # the gaps themselves are far from zero


def test_equivalence_identical_models():
    s = RandomAffineScore.draw(np.random.default_rng(2), 2)
    rep = objective_equivalence_check(s, s, MIX, 0.5, 1000, np.random.default_rng(3))
    assert rep.dsm_gap == 0.0 and rep.l2_gap == 0.0 and rep.passed


def test_equivalence_negative_control_wrong_time():
    exact = exact_score(MIX)
    rep = objective_equivalence_check(exact, exact, MIX, 0.5, 50_000, np.random.default_rng(4), s2_time=0.1)
    assert not rep.passed


def test_fit_affine_slope_recovers_noised_variance():
    q = Gaussian.isotropic(0.0, 4.0, 1)
    t = math.log(2)
    model = fit_dsm("affine", q, [t], 100_000, seed=0)
    reg = model.regressors[0]
    slope, slope_se = reg.coef_[0, 0], reg.coef_se_[0, 0]
    assert -1 / 1.75 == pytest.approx(-0.5714, abs=1e-4)
    assert abs(slope + 1 / 1.75) <= 3 * slope_se
    assert abs(slope + 1 / 1.75) <= 5 * slope_se


def test_fit_affine_stationary_case():
    d = 3
    q = Gaussian.standard(d)
    model = fit_dsm("affine", q, [0.5], 100_000, seed=1)
    A, b = model.affine(0.5)
    reg = model.regressors[0]
    assert np.all(np.abs(A + np.eye(d)) <= 5 * reg.coef_se_[:d].T)
    assert np.all(np.abs(b) <= 5 * reg.coef_se_[d])


def test_fitted_error_decreases_with_n():
    q = Gaussian(np.array([1.0, -1.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
    t = 0.3
    errs = []
    for n in (1_000, 100_000):
        est = trained_score(fit_dsm("affine", q, [t], n, seed=2), "ddpm", q)
        errs.append(measure_l2_error(est, q, t, 50_000, np.random.default_rng(9)))
    (e_small, se_small), (e_big, se_big) = errs
    assert e_big + 3 * se_big < e_small - 3 * se_small


def test_random_feature_class_beats_affine_on_mixture():
    t = 0.2
    errs = {}
    for cls in ("affine", "random-feature"):
        est = trained_score(fit_dsm(cls, MIX, [t], 40_000, seed=3, n_features=64), "ddpm", MIX)
        errs[cls] = measure_l2_error(est, MIX, t, 40_000, np.random.default_rng(11))[0]
    assert errs["random-feature"] < errs["affine"]


def test_fit_requires_enough_samples():
    q = Gaussian.standard(2)
    with pytest.raises(UsageError):
        fit_dsm("affine", q, [0.5], 20)


def test_singular_normal_equations_raise():
    X = np.ones((100, 2))
    with pytest.raises(np.linalg.LinAlgError):
        DSMRegressor(ridge=0.0).fit(X, np.zeros((100, 2)))


def test_estimator_api():
    reg = DSMRegressor(features="random-feature", n_features=16, bandwidth=0.5, ridge=1e-6)
    assert clone(reg).get_params() == reg.get_params()
    rng = np.random.default_rng(0)
    X = rng.standard_normal((2000, 2))
    y = -X + 0.01 * rng.standard_normal((2000, 2))
    reg.fit(X, y)
    assert reg.predict(X).shape == (2000, 2)
    assert reg.score(X, y) > 0.99
    assert reg.affine() is None


@pytest.mark.parametrize("cls", ["affine", "random-feature"])
def test_model_file_round_trip(tmp_path, cls):
    model = fit_dsm(cls, MIX, [0.2, 0.7], 20_000, seed=5, n_features=32)
    path = tmp_path / "model.txt"
    model.save(path)
    text = path.read_text()
    assert text.startswith("# sgmlab score model\n# format 1\n")
    loaded = ScoreModel.load(path)
    x = np.random.default_rng(0).standard_normal((50, 2))
    for t in (0.2, 0.7):
        np.testing.assert_array_equal(loaded(t, x), model(t, x))
    loaded.save(tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_text() == text
    with pytest.raises(UsageError):
        loaded(0.3, x)


def test_fit_is_deterministic_across_workers():
    a = fit_dsm("random-feature", MIX, [0.2, 0.5, 1.0], 5000, seed=7, n_features=16, workers=1)
    b = fit_dsm("random-feature", MIX, [0.2, 0.5, 1.0], 5000, seed=7, n_features=16, workers=3)
    for ra, rb in zip(a.regressors, b.regressors):
        np.testing.assert_array_equal(ra.coef_, rb.coef_)
