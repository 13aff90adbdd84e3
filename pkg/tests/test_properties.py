import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from sgmlab.analysis import stationary_ddpm_kl
from sgmlab.config import canonical, load_config
from sgmlab.forward import cld_transition, ou_marginal
from sgmlab.metrics import gaussian_divergence
from sgmlab.rng import pairwise_sum
from sgmlab.samplers import step_kernel
from sgmlab.targets import Gaussian, GaussianMixture

FAST = settings(max_examples=40, deadline=None)
times = st.floats(0.001, 5.0)
seeds = st.integers(0, 2**31 - 1)


def random_gaussian(seed, d):
    g = np.random.default_rng(seed)
    A = g.standard_normal((d, d))
    return Gaussian(g.standard_normal(d), A @ A.T + 0.3 * np.eye(d))


@FAST
@given(seeds, st.integers(1, 4), times)
def test_ou_marginal_identity(seed, d, t):
    q = random_gaussian(seed, d)
    qt = ou_marginal(q, t)
    e = math.exp(-t)
    np.testing.assert_allclose(qt.mean, e * q.mean, atol=1e-14)
    np.testing.assert_allclose(qt.cov, e * e * q.cov - math.expm1(-2 * t) * np.eye(d), atol=1e-14)


@FAST
@given(seeds, st.integers(1, 3), times, times)
def test_ou_semigroup(seed, d, s, t):
    q = random_gaussian(seed, d)
    a, b = ou_marginal(ou_marginal(q, s), t), ou_marginal(q, s + t)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-12)


@FAST
@given(times, times, st.sampled_from([2.0, 1.0, 3.0]))
def test_cld_semigroup_and_psd(s, t, gamma):
    ks, kt, kst = cld_transition(s, gamma), cld_transition(t, gamma), cld_transition(s + t, gamma)
    np.testing.assert_allclose(kt.M0 @ ks.M0, kst.M0, atol=1e-12)
    np.testing.assert_allclose(kt.M0 @ ks.M1 @ kt.M0.T + kt.M1, kst.M1, atol=1e-12)
    assert np.min(np.linalg.eigvalsh(kst.M1)) >= -1e-14


@FAST
@given(st.floats(1e-4, 0.5))
def test_step_kernels_have_psd_noise(h):
    for proc in ("ddpm", "cld"):
        k = step_kernel(proc, h)
        assert np.min(np.linalg.eigvalsh(k.C)) >= -1e-14
        np.testing.assert_allclose(k.chol @ k.chol.T, k.C, atol=1e-13)


@FAST
@given(seeds, st.integers(1, 3), st.integers(1, 3))
def test_mixture_score_matches_finite_difference(seed, d, k):
    g = np.random.default_rng(seed)
    q = GaussianMixture.isotropic(g.dirichlet(np.ones(k)), 2 * g.standard_normal((k, d)), g.uniform(0.3, 2.0, k))
    x = g.standard_normal((5, d))
    step = 1e-5
    fd = np.stack([(q.log_density(x + step * e) - q.log_density(x - step * e)) / (2 * step) for e in np.eye(d)], axis=1)
    np.testing.assert_allclose(q.score(x), fd, rtol=1e-5, atol=1e-6)


@FAST
@given(seeds, st.integers(1, 3), st.floats(0.3, 3.0))
def test_tv_bounds_symmetry_and_pinsker(seed, d, scale):
    p = random_gaussian(seed, d)
    q = Gaussian(np.random.default_rng(seed + 1).standard_normal(d), scale * p.cov)
    tv = gaussian_divergence("tv", p, q).value
    assert 0.0 <= tv <= 1.0
    assert abs(tv - gaussian_divergence("tv", q, p).value) <= 1e-8
    assert tv <= math.sqrt(gaussian_divergence("kl", p, q).value / 2) + 1e-12
    assert tv <= math.sqrt(gaussian_divergence("kl", q, p).value / 2) + 1e-12
    assert gaussian_divergence("tv", p, p).value <= 1e-12


@FAST
@given(seeds, st.integers(1, 3))
def test_w2_is_a_metric_on_triples(seed, d):
    a, b, c = (random_gaussian(seed + i, d) for i in range(3))
    w = lambda x, y: gaussian_divergence("w2", x, y).value
    assert w(a, c) <= w(a, b) + w(b, c) + 1e-9
    assert abs(w(a, b) - w(b, a)) <= 1e-8


@FAST
@given(st.integers(1, 8), st.floats(1e-3, 0.5), st.integers(1, 500))
def test_stationary_kl_grows_with_step(d, h, n):
    v = stationary_ddpm_kl(d, h, n)
    assert 0 <= v <= d * n * h * h + 1e-15
    assert stationary_ddpm_kl(d, 1.5 * h, n) > v


@FAST
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60))
def test_pairwise_sum_close_to_fsum(vals):
    assert abs(pairwise_sum(vals) - math.fsum(vals)) <= 1e-9 * max(1.0, sum(abs(v) for v in vals))


@FAST
@given(st.integers(0, 1000), st.floats(0.01, 10.0), st.integers(1, 1000), st.text(min_size=1, max_size=10))
def test_config_canonical_round_trip(seed, T, N, name):
    cfg = {"schema": "sgmlab/1", "experiment": name, "task": "sample", "seed": seed,
           "target": {"kind": "gaussian", "dim": 1}, "sampler": {"T": T, "N": N}}
    text = canonical(cfg)
    assert canonical(load_config(text)) == text
