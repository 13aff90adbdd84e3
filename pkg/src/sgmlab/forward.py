"""Exact transition kernels and marginals of the OU and CLD forward processes.

Phase-space conventions: the CLD state is ``theta = (x, v)`` stored as an array
of shape ``(n, 2d)`` with positions first. Per-coordinate 2x2 matrices act on
``(x_i, v_i)`` and lift to ``R^{2d}`` as ``kron(M, I_d)``.

The forward CLD used throughout is

    dx = v dt,    dv = -(x + gamma v) dt + sqrt(2 gamma) dB,

i.e. drift matrix ``A = [[0, 1], [-1, -gamma]]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import expm
from scipy.special import gammainc, gammaln, i0e, i1e, ive, logsumexp

from ._validation import UsageError, check_count, check_points, check_positive, check_time
from .targets import (
    LOG_2PI,
    Gaussian,
    GaussianMixture,
    TargetDistribution,
    TargetStats,
    UniformBall,
    UniformSphere,
    standard_gaussian_log_density,
)

# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck


@dataclass(frozen=True)
class OUTransition:
    """``Z_t = mean_scale * Z_0 + sqrt(noise_var) * xi``."""

    t: float

    @property
    def mean_scale(self) -> float:
        return math.exp(-self.t)

    @property
    def noise_var(self) -> float:
        return -math.expm1(-2.0 * self.t)


def ou_transition(t: float) -> OUTransition:
    return OUTransition(check_time(t))


def ou_marginal(dist: TargetDistribution, t: float) -> TargetDistribution:
    """Exact law of the OU process at time ``t`` started from ``dist``."""
    t = check_time(t)
    tr = OUTransition(t)
    a, s2 = tr.mean_scale, tr.noise_var
    if isinstance(dist, SmoothedRadial):
        return dist if t == 0 else SmoothedRadial(dist.base, dist.t + t)
    if isinstance(dist, (UniformSphere, UniformBall)):
        if t == 0:
            raise UsageError("density undefined for a singular law at t = 0")
        return SmoothedRadial(dist, t)
    if isinstance(dist, GaussianMixture):
        if t == 0:
            return dist
        eye = np.eye(dist.dim)
        means = a * dist.means
        covs = a * a * dist.covs + s2 * eye
        if isinstance(dist, Gaussian):
            return Gaussian(means[0], covs[0])
        return GaussianMixture(dist.weights, means, covs)
    raise UsageError(f"no OU marginal for target kind {dist.kind!r}")


def ou_joint_sample(dist: TargetDistribution, s: float, t: float, rng: np.random.Generator, n: int):
    """Exact draws of ``(Z_s, Z_t)`` along one forward path.

    ``s == t`` is allowed and returns identical pairs.
    """
    s, t = check_time(s, name="s"), check_time(t)
    if s > t:
        raise UsageError(f"need s <= t, got s={s}, t={t}")
    n = check_count(n)
    zs = dist.sample(rng, n) if s == 0 else ou_marginal(dist, s).sample(rng, n)
    tr = OUTransition(t - s)
    zt = tr.mean_scale * zs + math.sqrt(tr.noise_var) * rng.standard_normal(zs.shape)
    return zs, zt


# ---------------------------------------------------------------------------
# Smoothed sphere / ball


def _ive(nu: float, k: np.ndarray) -> np.ndarray:
    # integer orders 0 and 1 have much faster dedicated routines
    if nu == 0.0:
        return i0e(k)
    if nu == 1.0:
        return i1e(k)
    return ive(nu, k)


def _log_angular_mgf(kappa: np.ndarray, d: int) -> np.ndarray:
    """ln E[exp(kappa * u_1)] for u uniform on the unit sphere in R^d."""
    nu = 0.5 * d - 1.0
    kappa = np.asarray(kappa, dtype=float)
    out = np.empty_like(kappa)
    small = kappa < 1e-6
    out[small] = kappa[small] ** 2 / (2.0 * d)
    k = kappa[~small]
    out[~small] = gammaln(0.5 * d) - nu * np.log(0.5 * k) + np.log(_ive(nu, k)) + k
    return out


def _angular_ratio_over_kappa(kappa: np.ndarray, d: int) -> np.ndarray:
    """(I_{nu+1}/I_nu)(kappa) / kappa, continuous at kappa = 0 with value 1/d."""
    nu = 0.5 * d - 1.0
    kappa = np.asarray(kappa, dtype=float)
    out = np.full_like(kappa, 1.0 / d)
    big = kappa >= 1e-6
    k = kappa[big]
    out[big] = _ive(nu + 1.0, k) / _ive(nu, k) / k
    return out


def angular_mgf_quadrature(kappa, d: int, nodes: int = 256) -> np.ndarray:
    """Gauss-Legendre evaluation of ln E[exp(kappa u_1)]; cross-check for the Bessel form."""
    kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
    if d == 1:
        return np.logaddexp(kappa, -kappa) - math.log(2.0)
    # u_1 = cos(phi) with density proportional to sin(phi)^(d-2) on [0, pi]
    x, w = np.polynomial.legendre.leggauss(nodes)
    phi = 0.5 * math.pi * (x + 1.0)
    logw = np.log(0.5 * math.pi * w) + (d - 2) * np.log(np.sin(phi))
    lognorm = logsumexp(logw)
    return logsumexp(logw[None, :] + kappa[:, None] * np.cos(phi)[None, :], axis=1) - lognorm


class SmoothedRadial(TargetDistribution):
    """OU marginal ``q_t`` of a uniform sphere or ball law, for ``t > 0``.

    The angular average is the closed-form Bessel expression; the ball's
    radial average uses Gauss-Legendre nodes, doubled from 256 until the
    log-density changes by less than 1e-9 on probe points.
    """

    kind = "smoothed-radial"

    def __init__(self, base: UniformSphere | UniformBall, t: float):
        t = check_time(t, strict=True)
        self.base, self.t, self.dim = base, t, base.dim
        tr = OUTransition(t)
        self.scale, self.noise_var = tr.mean_scale, tr.noise_var
        if isinstance(base, UniformBall):
            self._radii, self._log_weights = self._radial_rule()
        else:
            self._radii, self._log_weights = np.array([base.radius]), np.zeros(1)

    def _radial_rule(self, tol: float = 1e-9, max_nodes: int = 8192):
        R, d = self.base.radius, self.dim
        spread = self.scale * R + 6.0 * math.sqrt(self.noise_var)
        probe_r = np.linspace(0.0, spread, 17)
        probe = np.zeros((len(probe_r), d))
        probe[:, 0] = probe_r
        nodes, prev = 256, None
        while True:
            radii, logw = self._gauss_legendre(nodes)
            cur = self._mixture_log_density(probe, radii, logw)
            if prev is not None and np.max(np.abs(cur - prev)) < tol:
                return radii, logw
            if nodes >= max_nodes:
                return radii, logw
            prev, nodes = cur, 2 * nodes

    def _gauss_legendre(self, nodes: int):
        R, d = self.base.radius, self.dim
        x, w = np.polynomial.legendre.leggauss(nodes)
        r = 0.5 * R * (x + 1.0)
        # radial density d r^(d-1) / R^d on [0, R]
        logw = np.log(0.5 * R * w) + math.log(d) + (d - 1) * np.log(r) - d * math.log(R)
        return r, logw

    def _shell_terms(self, x: np.ndarray, radii: np.ndarray):
        """Per-shell log densities and kappa values, shape (n, m)."""
        d, a, s2 = self.dim, self.scale, self.noise_var
        nx = np.linalg.norm(x, axis=1)
        kappa = a * radii[None, :] * nx[:, None] / s2
        log_f = (-(nx[:, None] ** 2 + (a * radii[None, :]) ** 2) / (2 * s2)
                 + _log_angular_mgf(kappa, d) - 0.5 * d * (LOG_2PI + math.log(s2)))
        return log_f, kappa

    def _mixture_log_density(self, x, radii, logw):
        log_f, _ = self._shell_terms(x, radii)
        return logsumexp(log_f + logw[None, :], axis=1)

    def _chunks(self, x: np.ndarray):
        step = max(1, 2**22 // len(self._radii))
        return [x[i:i + step] for i in range(0, len(x), step)]

    def log_density(self, x):
        x, single = check_points(x, self.dim)
        out = np.concatenate([self._mixture_log_density(c, self._radii, self._log_weights)
                              for c in self._chunks(x)])
        return out[0] if single else out

    def score(self, x):
        x, single = check_points(x, self.dim)
        out = np.concatenate([self._score(c) for c in self._chunks(x)])
        return out[0] if single else out

    def _score(self, x: np.ndarray) -> np.ndarray:
        a, s2 = self.scale, self.noise_var
        if len(self._radii) == 1:
            kappa = a * self._radii[0] * np.linalg.norm(x, axis=1) / s2
            coef = (a * self._radii[0] / s2) ** 2 * _angular_ratio_over_kappa(kappa, self.dim)
            return (coef - 1.0 / s2)[:, None] * x
        log_f, kappa = self._shell_terms(x, self._radii)
        logits = log_f + self._log_weights[None, :]
        post = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        coef = (a * self._radii[None, :] / s2) ** 2 * _angular_ratio_over_kappa(kappa, self.dim)
        return (np.sum(post * coef, axis=1) - 1.0 / s2)[:, None] * x

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        y = self.base.sample(rng, n)
        return self.scale * y + math.sqrt(self.noise_var) * rng.standard_normal(y.shape)

    def stats(self, n: int = 200_000, seed: int = 0) -> TargetStats:
        rng = np.random.default_rng(seed)
        x = self.sample(rng, n)
        log_ratio = self.log_density(x) - standard_gaussian_log_density(x)
        fi_terms = np.sum((self.score(x) + x) ** 2, axis=1)
        m2 = self.scale**2 * self.base.stats().second_moment + self.noise_var * self.dim
        sqrt_n = math.sqrt(n)
        return TargetStats(m2, noised_lipschitz(self.base, self.t), float(log_ratio.mean()),
                           float(fi_terms.mean()), float(log_ratio.std(ddof=1) / sqrt_n),
                           float(fi_terms.std(ddof=1) / sqrt_n))

    def to_config(self) -> dict:
        return {**self.base.to_config(), "noised_time": self.t}


# ---------------------------------------------------------------------------
# Lipschitz constants of noised scores


def noised_lipschitz(dist: TargetDistribution, t: float, *, n_probe: int = 2000, seed: int = 0) -> float:
    """Upper estimate of the Lipschitz constant of the score of ``q_t``.

    Closed form for Gaussians; the explicit Hessian bound for sphere/ball
    laws; for mixtures, the largest Hessian operator norm seen on samples of
    ``q_t`` and on segments joining component means (an estimate, not a bound).
    """
    t = check_time(t)
    if isinstance(dist, SmoothedRadial):
        return noised_lipschitz(dist.base, dist.t + t)
    if isinstance(dist, (UniformSphere, UniformBall)):
        if t == 0:
            raise UsageError("score of a singular law is not Lipschitz at t = 0")
        s2 = -math.expm1(-2 * t)
        return max(1.0 / s2, math.exp(-2 * t) * dist.radius**2 / s2**2)
    qt = ou_marginal(dist, t)
    if isinstance(qt, Gaussian):
        return float(np.linalg.eigvalsh(qt.precision)[-1])
    if isinstance(qt, GaussianMixture):
        return _mixture_hessian_norm(qt, n_probe, seed)
    raise UsageError(f"no Lipschitz estimate for {dist.kind!r}")


def _mixture_hessian_norm(q: GaussianMixture, n_probe: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    pts = [q.sample(rng, n_probe), q.means]
    lam = np.linspace(0.0, 1.0, 41)[:, None]
    for i in range(q.n_components):
        for j in range(i + 1, q.n_components):
            pts.append((1 - lam) * q.means[i] + lam * q.means[j])
    hess = q.hessian_log_density(np.concatenate(pts))
    return float(np.max(np.abs(np.linalg.eigvalsh(hess))))


# ---------------------------------------------------------------------------
# Critically damped Langevin


def cld_drift(gamma: float = 2.0) -> np.ndarray:
    return np.array([[0.0, 1.0], [-1.0, -gamma]])


def cld_noise(gamma: float = 2.0) -> np.ndarray:
    return np.array([[0.0], [math.sqrt(2.0 * gamma)]])


def lift(M: np.ndarray, d: int) -> np.ndarray:
    """Lift a per-coordinate 2x2 matrix to phase space R^{2d}."""
    return np.kron(M, np.eye(d))


def _van_loan(A: np.ndarray, Q: np.ndarray, t: float) -> np.ndarray:
    n = A.shape[0]
    C = np.zeros((2 * n, 2 * n))
    C[:n, :n], C[:n, n:], C[n:, n:] = -A, Q, A.T
    F = expm(C * t)
    return F[n:, n:].T @ F[:n, n:]


def gramian(A: np.ndarray, Q: np.ndarray, t: float, max_piece: float = 0.5) -> np.ndarray:
    """``int_0^t exp(sA) Q exp(sA^T) ds`` by Van Loan's block exponential.

    The block exponential contains ``exp(-tA)``, which loses accuracy for long
    horizons, so it is applied on pieces of length ``<= max_piece`` and composed
    with ``W(t + tau) = W(tau) + exp(tau A) W(t) exp(tau A)^T``.
    """
    m = max(1, math.ceil(t / max_piece))
    tau = t / m
    W_tau = _van_loan(A, Q, tau)
    E = expm(tau * A)
    W = W_tau
    for _ in range(m - 1):
        W = W_tau + E @ W @ E.T
    return 0.5 * (W + W.T)


@dataclass(frozen=True)
class CLDTransition:
    """Per-coordinate CLD kernel: ``theta_t ~ N(M0 theta_0, M1)``."""

    t: float
    gamma: float
    M0: np.ndarray
    M1: np.ndarray

    def lifted(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        return lift(self.M0, d), lift(self.M1, d)


def _critical_M1(t: float) -> np.ndarray:
    # integrand 4 e^{-2u} [[u^2, u(1-u)], [u(1-u), (1-u)^2]];
    # int_0^t u^k e^{-2u} du = k!/2^{k+1} * P(k+1, 2t)
    j0 = 0.5 * gammainc(1, 2 * t)
    j1 = 0.25 * gammainc(2, 2 * t)
    j2 = 0.25 * gammainc(3, 2 * t)
    xv = 4.0 * (j1 - j2)
    return np.array([[4.0 * j2, xv], [xv, 4.0 * (j0 - 2.0 * j1 + j2)]])


@lru_cache(maxsize=4096)
def _cld_transition_cached(t: float, gamma: float) -> CLDTransition:
    if gamma == 2.0:
        e = math.exp(-t)
        M0 = e * np.array([[1.0 + t, t], [-t, 1.0 - t]])
        M1 = _critical_M1(t)
    else:
        A = cld_drift(gamma)
        M0 = expm(t * A)
        Sig = cld_noise(gamma)
        M1 = gramian(A, Sig @ Sig.T, t)
    M0.setflags(write=False)
    M1.setflags(write=False)
    return CLDTransition(t, gamma, M0, M1)


def cld_transition(t: float, gamma: float = 2.0) -> CLDTransition:
    """Exact CLD kernel over time ``t``; closed form at critical damping."""
    t = check_time(t)
    gamma = check_positive(gamma, "gamma")
    return _cld_transition_cached(t, gamma)


class PhaseSpaceMarginal:
    """Exact law of ``(Z_t, V_t)`` as a Gaussian mixture on R^{2d}."""

    def __init__(self, joint: GaussianMixture, position_dim: int, t: float, gamma: float):
        self.joint, self.d, self.t, self.gamma = joint, position_dim, t, gamma
        self.dim = 2 * position_dim

    def log_density(self, theta):
        return self.joint.log_density(theta)

    def score(self, theta):
        return self.joint.score(theta)

    def velocity_score(self, theta):
        """Gradient of the log-density in the velocity coordinates only."""
        return self.joint.score(theta)[..., self.d:]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.joint.sample(rng, n)

    def second_moment(self) -> float:
        return self.joint.second_moment()


def cld_marginal(dist: TargetDistribution, t: float, gamma: float = 2.0) -> PhaseSpaceMarginal:
    """Law of the CLD at time ``t`` started from ``dist`` x standard Gaussian velocity."""
    if not isinstance(dist, GaussianMixture):
        raise UsageError("CLD marginals are supported for Gaussian and mixture targets only")
    tr = cld_transition(t, gamma)
    d = dist.dim
    M0, M1 = tr.lifted(d)
    means = np.concatenate([dist.means, np.zeros_like(dist.means)], axis=1) @ M0.T
    covs = []
    for S in dist.covs:
        init = np.zeros((2 * d, 2 * d))
        init[:d, :d], init[d:, d:] = S, np.eye(d)
        c = M0 @ init @ M0.T + M1
        covs.append(0.5 * (c + c.T))
    covs = np.stack(covs)
    if isinstance(dist, Gaussian):
        joint = Gaussian(means[0], covs[0])
    else:
        joint = GaussianMixture(dist.weights, means, covs)
    return PhaseSpaceMarginal(joint, d, tr.t, tr.gamma)


def cld_joint_sample(dist: TargetDistribution, s: float, t: float, rng: np.random.Generator, n: int,
                     gamma: float = 2.0):
    """Exact draws of phase points ``(theta_s, theta_t)`` along one forward CLD path."""
    s, t = check_time(s, name="s"), check_time(t)
    if s > t:
        raise UsageError(f"need s <= t, got s={s}, t={t}")
    n = check_count(n)
    ths = cld_marginal(dist, s, gamma).sample(rng, n)
    M0, M1 = cld_transition(t - s, gamma).lifted(dist.dim)
    w, V = np.linalg.eigh(M1)
    noise = rng.standard_normal(ths.shape) @ (V * np.sqrt(np.maximum(w, 0.0))).T
    return ths, ths @ M0.T + noise


def cld_velocity_lipschitz(dist: TargetDistribution, t: float, gamma: float = 2.0,
                           *, full: bool = False, n_probe: int = 2000, seed: int = 0) -> float:
    """Lipschitz estimate for the velocity score (or the full score with ``full=True``)."""
    m = cld_marginal(dist, t, gamma)
    d = m.d
    if isinstance(m.joint, Gaussian):
        J = m.joint.precision if full else m.joint.precision[d:, :]
        return float(np.linalg.norm(J, 2))
    rng = np.random.default_rng(seed)
    pts = np.concatenate([m.joint.sample(rng, n_probe), m.joint.means])
    hess = m.joint.hessian_log_density(pts)
    if not full:
        hess = hess[:, d:, :]
    return float(np.max(np.linalg.norm(hess, ord=2, axis=(1, 2))))


def transition_matrices(process: str, dt: float, gamma: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate (mean map, noise covariance) for one forward step of length ``dt``."""
    if process == "ddpm":
        tr = OUTransition(dt)
        return np.array([[tr.mean_scale]]), np.array([[tr.noise_var]])
    if process == "cld":
        tr = cld_transition(dt, gamma)
        return np.array(tr.M0), np.array(tr.M1)
    raise UsageError(f"unknown process {process!r}")
