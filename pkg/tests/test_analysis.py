import math

import numpy as np
import pytest

from sgmlab._validation import UsageError
from sgmlab.analysis import (
    cld_lower_bound_check,
    gaussian_chain_law,
    girsanov_kl,
    position_marginal,
    score_perturbation_check,
    stationary_chain_variance,
    stationary_cld_kl,
    stationary_ddpm_kl,
    stationary_velocity_increment,
    theorem_bound_rhs,
    verify_moment_bounds,
    verify_movement_bounds,
)
from sgmlab.forward import cld_joint_sample, cld_transition, ou_marginal
from sgmlab.metrics import gaussian_divergence
from sgmlab.samplers import SamplerConfig, run_reverse
from sgmlab.score_oracle import exact_score, make_perturbed
from sgmlab.targets import Gaussian, GaussianMixture, UniformSphere


def test_stationary_ddpm_closed_form_value():
    assert stationary_ddpm_kl(2, 0.1, 100) == pytest.approx(400 * (0.1 - 1 + math.exp(-0.1)), rel=1e-14)
    assert stationary_ddpm_kl(2, 0.1, 100) == pytest.approx(1.9350, abs=1e-4)
    assert stationary_ddpm_kl(3, 0.1, 0) == 0.0


def test_girsanov_stationary_ddpm_matches_closed_form():
    q = Gaussian.standard(2)
    cfg = SamplerConfig("ddpm", T=10.0, N=100, seed=1)
    est = girsanov_kl(q, exact_score(q), cfg, 2000, 16)
    assert abs(est.value - stationary_ddpm_kl(2, 0.1, 100)) <= 3 * est.se
    assert est.value == pytest.approx(sum(est.step_values), rel=1e-12)
    assert min(est.step_values) >= 0
    assert est.prefactor == 1.0


def test_girsanov_stationary_cld_matches_closed_form():
    q = Gaussian.standard(1)
    cfg = SamplerConfig("cld", T=2.0, N=40, seed=2)
    est = girsanov_kl(q, exact_score(q, "cld"), cfg, 2000, 16)
    assert est.prefactor == 2.0
    assert abs(est.value - stationary_cld_kl(1, 0.05, 40)) <= 3 * est.se


def test_girsanov_with_exact_time_shift_error():
    q = Gaussian.standard(1)
    eps, T, N = 0.3, 1.0, 1000
    cfg = SamplerConfig("ddpm", T=T, N=N, seed=3)
    times = [cfg.step_time(k) for k in range(N)]
    pert = make_perturbed(exact_score(q), eps, "shift", times=times)
    est = girsanov_kl(q, pert, cfg, 2000, 4)
    expected = eps**2 * T + stationary_ddpm_kl(1, T / N, N)
    assert abs(est.value - expected) <= 3 * est.se + 0.01 * eps**2 * T


def test_trapezoid_refinement_stable():
    q = Gaussian.isotropic(1.0, 0.5, 2)
    cfg = SamplerConfig("ddpm", T=3.0, N=30, seed=4)
    est = girsanov_kl(q, exact_score(q), cfg, 2000, 16, refine=(8,))
    assert abs(est.refined[8] - est.value) <= est.se


def test_girsanov_deterministic_across_workers():
    q = GaussianMixture.isotropic([0.5, 0.5], [[-1.0], [1.0]], [0.5, 0.5])
    cfg = SamplerConfig("ddpm", T=2.0, N=20, seed=5)
    a = girsanov_kl(q, exact_score(q), cfg, 3000, 4, workers=1, block_size=500)
    b = girsanov_kl(q, exact_score(q), cfg, 3000, 4, workers=3, block_size=500)
    assert a.value == b.value and a.se == b.se


def test_girsanov_errors():
    sph = UniformSphere(1.0, 2)
    with pytest.raises(UsageError):
        girsanov_kl(sph, exact_score(sph), SamplerConfig("ddpm", T=1.0, N=10), 10, 4)
    q = Gaussian.standard(1)
    with pytest.raises(UsageError):
        girsanov_kl(q, exact_score(q), SamplerConfig("ddpm", T=1.0, N=10), 10, 2)


@pytest.mark.parametrize("h", [0.2, 0.1])
def test_data_processing_chain(h):
    q = Gaussian.isotropic(1.0, 0.5, 2)
    T = 3.0
    cfg = SamplerConfig("ddpm", T=T, N=round(T / h), seed=6)
    est = exact_score(q)
    tv_out = gaussian_divergence("tv", gaussian_chain_law(cfg, est), q).value
    tv_init = gaussian_divergence("tv", ou_marginal(q, T), Gaussian.standard(2)).value
    kl = girsanov_kl(q, est, cfg, 2000, 8)
    assert tv_out <= math.sqrt(max(kl.value - 3 * kl.se, 0.0) / 2) + tv_init


def test_chain_law_stationary_variance():
    assert stationary_chain_variance(0.1) == pytest.approx((math.exp(0.1) + 1) / (3 - math.exp(0.1)), rel=1e-15)
    assert stationary_chain_variance(0.1) == pytest.approx(1.11101, abs=1e-5)
    q = Gaussian.standard(3)
    law = gaussian_chain_law(SamplerConfig("ddpm", T=30.0, N=300), exact_score(q))
    np.testing.assert_allclose(np.diag(law.cov), stationary_chain_variance(0.1), rtol=1e-12)


def test_chain_law_continuum_limit():
    q = Gaussian.standard(2)
    for h in (0.01, 0.001):
        law = gaussian_chain_law(SamplerConfig("ddpm", T=10.0, N=round(10 / h)), exact_score(q))
        assert np.max(np.abs(np.diag(law.cov) - 1.0)) <= 2 * h


def test_chain_law_matches_sampler():
    q = Gaussian(np.array([1.0, -1.0]), np.array([[0.6, 0.2], [0.2, 1.5]]))
    cfg = SamplerConfig("ddpm", T=4.0, N=20, n_samples=100_000, seed=7)
    est = exact_score(q)
    x = run_reverse(cfg, est).samples
    law = gaussian_chain_law(cfg, est)
    se = np.sqrt(np.diag(law.cov) / len(x))
    assert np.all(np.abs(x.mean(axis=0) - law.mean) <= 4 * se)
    np.testing.assert_allclose(np.cov(x.T), law.cov, atol=4 * np.max(np.diag(law.cov)) * math.sqrt(2 / len(x)))


def test_chain_law_requires_affine_scores():
    mix = GaussianMixture.isotropic([0.5, 0.5], [[-1.0], [1.0]], [0.5, 0.5])
    with pytest.raises(UsageError):
        gaussian_chain_law(SamplerConfig("ddpm", T=1.0, N=10), exact_score(mix))


def test_cld_chain_position_marginal_shape():
    q = Gaussian.isotropic(0.0, 1.0, 2)
    law = gaussian_chain_law(SamplerConfig("cld", T=5.0, N=50), exact_score(q, "cld"))
    pos = position_marginal(law, 2)
    assert pos.dim == 2 and law.dim == 4


def test_theorem_rhs_examples():
    r = theorem_bound_rhs("ddpm", kl=1.0, L=1.0, d=1, m2=1.0, T=10.0, h=0.01, eps_sc=0.0)
    assert r.total == pytest.approx(math.exp(-10) + 0.11 * math.sqrt(10), rel=1e-14)
    assert r.total == pytest.approx(0.3479, abs=1e-4)
    assert theorem_bound_rhs("compact-N", d=1, R=1.0, eps_tv=1.0, eps_w2=1.0).total == 1.0
    s = theorem_bound_rhs("ddpm", kl=0.0, L=0.0, d=1, m2=0.0, T=4.0, h=0.0, eps_sc=0.05)
    assert s.total == pytest.approx(0.1, rel=1e-14)
    assert all(v >= 0 for v in r.terms.values())
    with pytest.raises(UsageError):
        theorem_bound_rhs("cld", kl=1.0, L=1.0, d=1, m2=1.0, T=1.0, h=0.1)
    c = theorem_bound_rhs("cld", kl=1.0, fi=3.0, L=1.0, d=1, m2=1.0, T=1.0, h=0.0, c=0.5)
    assert c.terms["forward"] == pytest.approx(2.0 * math.exp(-0.5), rel=1e-14)


def test_cld_lower_bound_example():
    rep = cld_lower_bound_check(2, 0.05, 5.0, 1000, seed=3)
    assert rep.info["threshold"] == pytest.approx(0.5, rel=1e-14)
    assert rep.passed
    assert rep.measured >= 0.5


def test_cld_lower_bound_refuses_large_steps():
    with pytest.raises(UsageError, match="1/10"):
        cld_lower_bound_check(1, 0.2, 2.0, 100)


def test_cld_lower_bound_small_steps_vanish_together():
    rep = cld_lower_bound_check(1, 0.002, 0.2, 500, seed=1)
    assert rep.info["threshold"] < 1e-3 and rep.measured < 5e-3


@pytest.mark.parametrize("delta", [0.01, 0.05, 0.1])
def test_stationary_velocity_increment(delta):
    d = 2
    val = stationary_velocity_increment(d, delta)
    assert val == pytest.approx(2 * d * (1 - math.exp(-delta) * (1 - delta)), rel=1e-13)
    assert val >= d * delta
    assert val >= 2 * d * delta - 10 * d * delta**2
    n = 200_000
    a, b = cld_joint_sample(Gaussian.standard(d), 0.3, 0.3 + delta, np.random.default_rng(0), n)
    inc = np.sum((b[:, d:] - a[:, d:]) ** 2, axis=1)
    assert abs(inc.mean() - val) <= 3 * inc.std() / math.sqrt(n)


def test_moment_bound_rows():
    q = Gaussian(np.array([1.0, 1.0, 0.0]), np.eye(3))  # m2^2 = 5
    rep = verify_moment_bounds(q, "ddpm", [0.1, 1.0], 20_000, seed=0)
    moments = [r for r in rep.rows if r.check == "moment"]
    assert all(r.bound == pytest.approx(5.0) for r in moments)
    assert rep.passed
    g = Gaussian.standard(3)
    rep = verify_moment_bounds(g, "ddpm", [0.5], 50_000, seed=1)
    row = [r for r in rep.rows if r.check == "moment"][0]
    assert abs(row.value - 3.0) <= 3 * row.se
    score_row = [r for r in rep.rows if r.check == "score"][0]
    assert score_row.bound == pytest.approx(3.0)


def test_moment_bounds_cld_and_mixture():
    mix = GaussianMixture.isotropic([0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]], [0.3, 0.3])
    rep = verify_moment_bounds(mix, "cld", [0.1, 0.5, 2.0], 20_000, seed=2)
    assert rep.passed and rep.fitted_C <= 10


def test_movement_bounds():
    d = 2
    q = Gaussian.standard(d)
    rep = verify_movement_bounds(q, "ddpm", [(0.0, 0.0), (0.2, 0.5), (1.0, 2.0)], 50_000, seed=0)
    assert rep.rows[0].value == 0.0
    for r in rep.rows[1:]:
        closed = 2 * d * (1 - math.exp(-(r.t - r.s)))
        assert closed <= 2 * d * (r.t - r.s)
        assert abs(r.value - closed) <= 3 * r.se
    mix = GaussianMixture.isotropic([0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]], [0.3, 0.3])
    rep = verify_movement_bounds(mix, "cld", [(0.0, 0.1), (0.5, 1.0)], 20_000, seed=1)
    assert rep.passed and 0 < rep.fitted_C <= 10
    with pytest.raises(UsageError):
        verify_movement_bounds(q, "ddpm", [(0.0, 1.5)], 100)


def test_score_perturbation_example():
    q = Gaussian.standard(2)
    rep = score_perturbation_check(q, np.eye(2), 0.1 * np.eye(2), [[1.0, 0.0]])
    row = rep.rows[0]
    assert row.value == pytest.approx(0.1 / 1.1, rel=1e-12)
    assert row.bound == pytest.approx(math.sqrt(0.2) + 0.1, rel=1e-12)
    assert row.ratio == pytest.approx(0.166, abs=1e-3)


def test_score_perturbation_trivial_and_pushforward():
    q = Gaussian.standard(2)
    assert score_perturbation_check(q, np.eye(2), np.zeros((2, 2)), [[1.0, 2.0]]).rows[0].value == 0.0
    theta = np.array([0.7, -1.2])
    for zeta in (0.1, 0.3, 0.5):
        rep = score_perturbation_check(q, (1 + zeta) * np.eye(2), np.zeros((2, 2)), [theta])
        row = rep.rows[0]
        # pushforward law N(0, (1+zeta)^2 I)
        assert row.value == pytest.approx((1 - (1 + zeta) ** -2) * np.linalg.norm(theta), rel=1e-12)
        assert row.ratio <= 3


def test_score_perturbation_on_cld_grid():
    g = np.random.default_rng(0)
    worst = 0.0
    for h in (0.01, 0.05, 0.1):
        M0, M1 = cld_transition(h).lifted(2)
        q = Gaussian(0.3 * g.standard_normal(4), np.diag(g.uniform(2.0, 5.0, 4)))
        rep = score_perturbation_check(q, M0, M1, 2 * g.standard_normal((16, 4)))
        worst = max(worst, rep.fitted_C)
    assert worst <= 10


def test_score_perturbation_preconditions():
    q = Gaussian.standard(1)
    with pytest.raises(UsageError):
        score_perturbation_check(q, 2.5 * np.eye(1), np.zeros((1, 1)), [[1.0]])
    with pytest.raises(UsageError):
        score_perturbation_check(q, np.eye(1), np.eye(1), [[1.0]])
