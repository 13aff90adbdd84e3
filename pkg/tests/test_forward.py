import math

import numpy as np
import pytest
from scipy import integrate
from scipy.linalg import expm

from sgmlab._validation import UsageError
from sgmlab.forward import (
    OUTransition,
    angular_mgf_quadrature,
    cld_drift,
    cld_joint_sample,
    cld_marginal,
    cld_transition,
    cld_velocity_lipschitz,
    noised_lipschitz,
    ou_joint_sample,
    ou_marginal,
    _log_angular_mgf,
)
from sgmlab.targets import Gaussian, GaussianMixture, UniformBall, UniformSphere


def test_ou_transition_identity_and_origin():
    for t in np.geomspace(1e-6, 50, 40):
        tr = OUTransition(t)
        assert abs(tr.mean_scale**2 + tr.noise_var - 1.0) <= 1e-14
    tr = OUTransition(0.0)
    assert (tr.mean_scale, tr.noise_var) == (1.0, 0.0)


def test_ou_marginal_of_unit_variance_mixture():
    m = GaussianMixture.isotropic([0.5, 0.5], [[-3.0], [3.0]], [1.0, 1.0])
    qt = ou_marginal(m, math.log(2))
    np.testing.assert_allclose(qt.means, [[-1.5], [1.5]], atol=1e-14)
    np.testing.assert_allclose(qt.covs[:, 0, 0], 1.0, atol=1e-14)


def test_ou_marginal_converges_to_standard_gaussian():
    g = Gaussian(np.array([3.0, -1.0]), np.array([[4.0, 1.0], [1.0, 2.0]]))
    qt = ou_marginal(g, 40.0)
    np.testing.assert_allclose(qt.mean, 0.0, atol=1e-15)
    np.testing.assert_allclose(qt.cov, np.eye(2), atol=1e-15)


@pytest.mark.parametrize("s,t", [(0.1, 0.3), (1.0, 0.25), (0.5, 2.0)])
def test_ou_semigroup_parameter_identity(s, t):
    m = GaussianMixture.isotropic([0.3, 0.7], [[-2.0, 0.0], [2.0, 1.0]], [0.5, 1.0])
    a, b = ou_marginal(ou_marginal(m, s), t), ou_marginal(m, s + t)
    np.testing.assert_allclose(a.means, b.means, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(a.covs, b.covs, rtol=1e-13)
    sph = UniformSphere(1.0, 2)
    assert ou_marginal(ou_marginal(sph, s), t).t == pytest.approx(s + t, rel=1e-15)


def test_ou_marginal_errors():
    with pytest.raises(UsageError):
        ou_marginal(Gaussian.standard(1), -0.1)
    with pytest.raises(UsageError, match="density undefined"):
        ou_marginal(UniformSphere(1.0, 2), 0.0)


def test_stationary_ou_increment():
    d, n = 3, 200_000
    q = Gaussian.standard(d)
    for s, t in [(0.0, 0.1), (0.4, 1.0)]:
        zs, zt = ou_joint_sample(q, s, t, np.random.default_rng(0), n)
        inc = np.sum((zt - zs) ** 2, axis=1)
        assert abs(inc.mean() - 2 * d * (1 - math.exp(-(t - s)))) <= 3 * inc.std() / math.sqrt(n)


def test_ou_joint_sample_zero_gap_and_order():
    q = Gaussian.standard(2)
    a, b = ou_joint_sample(q, 0.5, 0.5, np.random.default_rng(0), 10)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(UsageError):
        ou_joint_sample(q, 1.0, 0.5, np.random.default_rng(0), 10)


def test_smoothed_sphere_density_integrates_to_one_and_matches_angular_quadrature():
    qt = ou_marginal(UniformSphere(1.0, 2), 0.2)
    total, _ = integrate.dblquad(lambda y, x: math.exp(qt.log_density(np.array([x, y]))), -5, 5, -5, 5,
                                 epsabs=1e-10)
    assert total == pytest.approx(1.0, abs=1e-7)
    kappa = np.geomspace(1e-3, 200, 30)
    for d in (2, 3, 5):
        np.testing.assert_allclose(_log_angular_mgf(kappa, d), angular_mgf_quadrature(kappa, d), atol=1e-10)


@pytest.mark.parametrize("base", [UniformSphere(1.0, 2), UniformBall(1.5, 3)])
def test_smoothed_radial_score_matches_finite_difference(base):
    qt = ou_marginal(base, 0.3)
    rng = np.random.default_rng(4)
    for x in rng.standard_normal((20, base.dim)):
        h = 1e-5
        fd = np.array([(qt.log_density(x + h * e) - qt.log_density(x - h * e)) / (2 * h) for e in np.eye(base.dim)])
        assert np.linalg.norm(qt.score(x) - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))


def test_cld_spectrum_gamma_four():
    ev = np.sort(np.linalg.eigvals(cld_drift(4.0)).real)
    np.testing.assert_allclose(ev, [-2 - math.sqrt(3), -2 + math.sqrt(3)], atol=1e-14)


def test_cld_m0_closed_form_at_t1():
    tr = cld_transition(1.0)
    np.testing.assert_allclose(tr.M0, math.exp(-1) * np.array([[2.0, 1.0], [-1.0, 0.0]]), atol=1e-15)
    np.testing.assert_allclose(tr.M0, expm(cld_drift(2.0)), atol=1e-10)


@pytest.mark.parametrize("gamma", [2.0, 3.0, 1.0])
@pytest.mark.parametrize("t", [0.01, 0.3, 1.0, 4.0])
def test_cld_m1_against_quadrature(gamma, t):
    A = cld_drift(gamma)
    Q = np.diag([0.0, 2.0 * gamma])

    def entry(i, j):
        return integrate.quad(lambda u: (expm(u * A) @ Q @ expm(u * A).T)[i, j], 0, t, epsabs=1e-13)[0]

    ref = np.array([[entry(0, 0), entry(0, 1)], [entry(1, 0), entry(1, 1)]])
    tr = cld_transition(t, gamma)
    np.testing.assert_allclose(tr.M1, ref, atol=1e-11)
    np.testing.assert_allclose(tr.M0, expm(t * A), atol=1e-12)


def test_cld_transition_at_zero():
    tr = cld_transition(0.0)
    np.testing.assert_array_equal(tr.M0, np.eye(2))
    np.testing.assert_array_equal(tr.M1, np.zeros((2, 2)))


def test_cld_semigroup_and_psd():
    grid = np.geomspace(1e-4, 10, 15)
    for s in grid:
        for t in grid:
            np.testing.assert_allclose(cld_transition(s).M0 @ cld_transition(t).M0, cld_transition(s + t).M0,
                                       atol=1e-12)
    for t in grid:
        M1 = cld_transition(t).M1
        np.testing.assert_array_equal(M1, M1.T)
        assert np.linalg.eigvalsh(M1)[0] >= -1e-15
        if t <= 1:
            assert np.linalg.norm(M1, 2) <= 8 * t


def test_cld_marginal_at_zero_is_product():
    g = Gaussian(np.array([1.0, 2.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
    m = cld_marginal(g, 0.0)
    np.testing.assert_allclose(m.joint.mean, [1.0, 2.0, 0.0, 0.0])
    expected = np.zeros((4, 4))
    expected[:2, :2], expected[2:, 2:] = g.cov, np.eye(2)
    np.testing.assert_allclose(m.joint.cov, expected, atol=1e-15)


def test_cld_marginal_stationary():
    for t in (0.1, 1.0, 5.0):
        m = cld_marginal(Gaussian.standard(3), t)
        np.testing.assert_allclose(m.joint.mean, 0.0, atol=1e-15)
        np.testing.assert_allclose(m.joint.cov, np.eye(6), atol=1e-13)


def test_cld_velocity_score_matches_finite_difference():
    mix = GaussianMixture.isotropic([0.5, 0.5], [[-1.0, 0.5], [1.0, 0.0]], [0.4, 0.8])
    m = cld_marginal(mix, 0.4)
    rng = np.random.default_rng(6)
    for th in rng.standard_normal((20, 4)):
        h = 1e-5
        fd = np.array([(m.log_density(th + h * e) - m.log_density(th - h * e)) / (2 * h) for e in np.eye(4)[2:]])
        vs = m.velocity_score(th)
        assert np.linalg.norm(vs - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))


def test_cld_marginal_rejects_singular():
    with pytest.raises(UsageError):
        cld_marginal(UniformSphere(1.0, 2), 1.0)


def test_cld_joint_sample_matches_marginal():
    g = Gaussian.isotropic(1.0, 0.5, 1)
    n = 200_000
    _, th = cld_joint_sample(g, 0.2, 0.7, np.random.default_rng(0), n)
    m = cld_marginal(g, 0.7)
    se = np.sqrt(np.diag(m.joint.cov) / n)
    assert np.all(np.abs(th.mean(axis=0) - m.joint.mean) <= 4 * se)


def test_noised_lipschitz_examples():
    for t in (0.0, 0.5, 3.0):
        assert noised_lipschitz(Gaussian.standard(3), t) == pytest.approx(1.0, abs=1e-14)
    assert noised_lipschitz(Gaussian.isotropic(0.0, 4.0, 1), math.log(2)) == pytest.approx(1 / 1.75, rel=1e-14)
    R, t = 2.0, 1e-3
    assert noised_lipschitz(UniformSphere(R, 2), t) == pytest.approx(R**2 / (4 * t**2), rel=5e-3)
    with pytest.raises(UsageError):
        noised_lipschitz(UniformSphere(R, 2), 0.0)


def test_mixture_lipschitz_estimate_dominates_probe_hessians():
    mix = GaussianMixture.isotropic([0.5, 0.5], [[-2.0], [2.0]], [0.3, 0.3])
    L = noised_lipschitz(mix, 0.2)
    qt = ou_marginal(mix, 0.2)
    xs = np.linspace(-3, 3, 301)[:, None]
    assert np.max(np.abs(qt.hessian_log_density(xs)[:, 0, 0])) <= L * (1 + 1e-6)
    assert cld_velocity_lipschitz(Gaussian.standard(2), 0.5) == pytest.approx(1.0, abs=1e-12)
