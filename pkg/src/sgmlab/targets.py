"""Analytic data distributions with exact densities, scores and sampling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._validation import UsageError, check_count, check_points, check_positive, check_spd

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TargetStats:
    """Moment and divergence summary of a target relative to the standard Gaussian.

    ``lipschitz`` is ``None`` when no closed form is available. Standard errors
    are zero for closed-form values.
    """

    second_moment: float
    lipschitz: float | None
    kl_to_gaussian: float
    fi_to_gaussian: float
    kl_se: float = 0.0
    fi_se: float = 0.0


class TargetDistribution:
    """Base class for data laws on R^d."""

    kind: str = "abstract"
    dim: int
    singular: bool = False

    def log_density(self, x):
        raise NotImplementedError

    def score(self, x):
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def stats(self) -> TargetStats:
        raise NotImplementedError

    def to_config(self) -> dict:
        raise NotImplementedError


class _GaussianBank:
    """Shared arithmetic for a finite family of Gaussian components."""

    def __init__(self, means: np.ndarray, covs: np.ndarray):
        self.means = means
        self.covs = covs
        self.chol = np.linalg.cholesky(covs)
        eye = np.eye(means.shape[1])
        # whiten[k] @ (x - mu_k) is standard normal under component k
        self.whiten = np.stack([np.linalg.solve(L, eye) for L in self.chol])
        self.precisions = np.einsum("kji,kjl->kil", self.whiten, self.whiten)
        self.logdets = 2.0 * np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(axis=1)
        for arr in (self.chol, self.whiten, self.precisions, self.logdets):
            arr.setflags(write=False)

    def component_log_pdf(self, x: np.ndarray) -> np.ndarray:
        d = x.shape[1]
        out = np.empty((x.shape[0], len(self.means)))
        for k, (mu, W, logdet) in enumerate(zip(self.means, self.whiten, self.logdets)):
            y = (x - mu) @ W.T
            out[:, k] = -0.5 * np.einsum("ij,ij->i", y, y) - 0.5 * (d * LOG_2PI + logdet)
        return out

    def component_scores(self, x: np.ndarray) -> np.ndarray:
        """Array of shape (K, n, d) with -P_k (x - mu_k)."""
        return np.stack([-(x - mu) @ P for mu, P in zip(self.means, self.precisions)])

    def sample(self, rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
        n, d = labels.shape[0], self.means.shape[1]
        z = rng.standard_normal((n, d))
        out = np.empty((n, d))
        for k in range(len(self.means)):
            idx = labels == k
            out[idx] = self.means[k] + z[idx] @ self.chol[k].T
        return out


class GaussianMixture(TargetDistribution):
    """Finite mixture of Gaussians ``sum_k w_k N(mu_k, Sigma_k)``."""

    kind = "mixture"

    def __init__(self, weights, means, covs):
        weights = np.asarray(weights, dtype=float)
        means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.asarray(covs, dtype=float)
        if weights.ndim != 1 or len(weights) != len(means):
            raise UsageError("weights and means must describe the same number of components")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise UsageError("mixture weights must be nonnegative and sum to 1")
        d = means.shape[1]
        if covs.shape != (len(means), d, d):
            raise UsageError(f"covs must have shape {(len(means), d, d)}, got {covs.shape}")
        covs = np.stack([check_spd(c, "component covariance") for c in covs])
        for arr in (weights, means, covs):
            arr.setflags(write=False)
        self.weights, self.means, self.covs = weights, means, covs
        self.dim = d
        self._bank = _GaussianBank(means, covs)
        self._log_w = np.log(np.where(weights > 0, weights, 1.0))
        self._log_w[weights == 0] = -np.inf

    @classmethod
    def isotropic(cls, weights, means, variances) -> "GaussianMixture":
        means = np.atleast_2d(np.asarray(means, dtype=float))
        d = means.shape[1]
        variances = np.broadcast_to(np.asarray(variances, dtype=float), (len(means),))
        return cls(weights, means, np.stack([v * np.eye(d) for v in variances]))

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def posterior(self, x) -> np.ndarray:
        """Component responsibilities, computed in log space."""
        x, _ = check_points(x, self.dim)
        logits = self._log_w + self._bank.component_log_pdf(x)
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))

    def log_density(self, x):
        x, single = check_points(x, self.dim)
        out = logsumexp(self._log_w + self._bank.component_log_pdf(x), axis=1)
        return out[0] if single else out

    def score(self, x):
        x, single = check_points(x, self.dim)
        logits = self._log_w + self._bank.component_log_pdf(x)
        r = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        out = np.einsum("nk,knd->nd", r, self._bank.component_scores(x))
        return out[0] if single else out

    def hessian_log_density(self, x) -> np.ndarray:
        """Hessian of ln q at each point, shape (n, d, d)."""
        x, _ = check_points(x, self.dim)
        logits = self._log_w + self._bank.component_log_pdf(x)
        r = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        g = self._bank.component_scores(x)
        s = np.einsum("nk,knd->nd", r, g)
        hess = -np.einsum("nk,kij->nij", r, self._bank.precisions)
        hess += np.einsum("nk,kni,knj->nij", r, g, g)
        hess -= np.einsum("ni,nj->nij", s, s)
        return hess

    def sample(self, rng: np.random.Generator, n: int, return_labels: bool = False):
        n = check_count(n)
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        x = self._bank.sample(rng, labels)
        return (x, labels) if return_labels else x

    def second_moment(self) -> float:
        return float(sum(w * (np.trace(S) + mu @ mu) for w, mu, S in zip(self.weights, self.means, self.covs)))

    def stats(self, n: int = 200_000, seed: int = 0) -> TargetStats:
        """Closed-form second moment; KL and Fisher information by Monte Carlo."""
        rng = np.random.default_rng(seed)
        x = self.sample(rng, n)
        log_ratio = self.log_density(x) - standard_gaussian_log_density(x)
        fi_terms = np.sum((self.score(x) + x) ** 2, axis=1)
        sqrt_n = math.sqrt(n)
        return TargetStats(
            second_moment=self.second_moment(),
            lipschitz=None,
            kl_to_gaussian=max(float(log_ratio.mean()), 0.0),
            fi_to_gaussian=float(fi_terms.mean()),
            kl_se=float(log_ratio.std(ddof=1) / sqrt_n),
            fi_se=float(fi_terms.std(ddof=1) / sqrt_n),
        )

    def to_config(self) -> dict:
        return {
            "kind": "mixture",
            "dim": self.dim,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }


class Gaussian(GaussianMixture):
    """A single Gaussian ``N(mean, cov)``; all statistics are closed form."""

    kind = "gaussian"

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        super().__init__([1.0], mean[None, :], cov[None, :, :])

    @classmethod
    def isotropic(cls, mean=0.0, var: float = 1.0, dim: int | None = None) -> "Gaussian":
        var = check_positive(var, "var")
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        if dim is not None:
            mean = np.broadcast_to(mean, (dim,)).copy()
        return cls(mean, var * np.eye(len(mean)))

    @classmethod
    def standard(cls, dim: int) -> "Gaussian":
        return cls(np.zeros(dim), np.eye(dim))

    @property
    def mean(self) -> np.ndarray:
        return self.means[0]

    @property
    def cov(self) -> np.ndarray:
        return self.covs[0]

    @property
    def precision(self) -> np.ndarray:
        return self._bank.precisions[0]

    def score(self, x):
        x, single = check_points(x, self.dim)
        out = -(x - self.mean) @ self.precision
        return out[0] if single else out

    def stats(self) -> TargetStats:
        d, mu, S = self.dim, self.mean, self.cov
        logdet = float(self._bank.logdets[0])
        kl = 0.5 * (np.trace(S) + mu @ mu - d - logdet)
        fi = np.trace(S) - 2 * d + np.trace(self.precision) + mu @ mu
        return TargetStats(
            second_moment=float(np.trace(S) + mu @ mu),
            lipschitz=float(np.linalg.eigvalsh(self.precision)[-1]),
            kl_to_gaussian=max(float(kl), 0.0),
            fi_to_gaussian=max(float(fi), 0.0),
        )

    def to_config(self) -> dict:
        return {"kind": "gaussian", "dim": self.dim, "mean": self.mean.tolist(), "cov": self.cov.tolist()}


class _RadialUniform(TargetDistribution):
    singular = True

    def __init__(self, radius: float, dim: int):
        self.radius = check_positive(radius, "radius")
        self.dim = check_count(dim, "dim")
        # R < 1 is outside the regime the early-stopping guarantee covers; allowed but flagged
        self.small_radius = self.radius < 1.0
        if self.small_radius:
            warnings.warn(f"radius {self.radius} < 1 is outside the compact-support regime R >= 1",
                          stacklevel=3)

    def log_density(self, x):
        x, single = check_points(x, self.dim)
        out = np.full(x.shape[0], np.nan)
        return out[0] if single else out

    def score(self, x):
        raise UsageError("score undefined at t=0 for a singular law; noise it with forward.ou_marginal first")

    def _directions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    def to_config(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "radius": self.radius}


class UniformSphere(_RadialUniform):
    """Uniform law on the sphere of radius R (no Lebesgue density)."""

    kind = "sphere"

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        n = check_count(n)
        return self.radius * self._directions(rng, n)

    def stats(self) -> TargetStats:
        return TargetStats(self.radius**2, None, math.inf, math.inf)


class UniformBall(_RadialUniform):
    """Uniform law on the ball of radius R; handled as singular for score purposes."""

    kind = "ball"

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        n = check_count(n)
        u = self._directions(rng, n)
        r = self.radius * rng.random(n) ** (1.0 / self.dim)
        return r[:, None] * u

    def stats(self) -> TargetStats:
        d = self.dim
        return TargetStats(d * self.radius**2 / (d + 2), None, math.inf, math.inf)


def standard_gaussian_log_density(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return -0.5 * np.sum(x * x, axis=-1) - 0.5 * x.shape[-1] * LOG_2PI


def log_density(dist: TargetDistribution, x):
    return dist.log_density(x)


def score(dist: TargetDistribution, x):
    return dist.score(x)


def sample(dist: TargetDistribution, rng: np.random.Generator, n: int):
    return dist.sample(rng, n)


def target_stats(dist: TargetDistribution) -> TargetStats:
    return dist.stats()


def from_config(spec: dict) -> TargetDistribution:
    """Build a target from its config mapping (see README for the schema)."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise UsageError("target spec must be a mapping with a 'kind' field")
    kind = spec["kind"]
    dim = spec.get("dim")
    if kind == "gaussian":
        if dim is None:
            raise UsageError("gaussian target needs 'dim'")
        mean = np.broadcast_to(np.asarray(spec.get("mean", 0.0), dtype=float), (dim,))
        if "cov" in spec:
            return Gaussian(mean, spec["cov"])
        return Gaussian.isotropic(mean, spec.get("var", 1.0))
    if kind == "mixture":
        means = np.asarray(spec["means"], dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        if dim is not None and means.shape[1] != dim:
            raise UsageError("mixture means do not match 'dim'")
        if "covs" in spec:
            return GaussianMixture(spec["weights"], means, spec["covs"])
        return GaussianMixture.isotropic(spec["weights"], means, spec.get("vars", 1.0))
    if kind in ("sphere", "ball"):
        if dim is None or "radius" not in spec:
            raise UsageError(f"{kind} target needs 'dim' and 'radius'")
        cls = UniformSphere if kind == "sphere" else UniformBall
        return cls(spec["radius"], dim)
    raise UsageError(f"unknown target kind {kind!r}")
