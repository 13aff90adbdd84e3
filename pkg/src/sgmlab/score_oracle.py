"""Score estimates with a controlled L2(q_t) error.

A :class:`ScoreEstimate` is a callable ``(t, x) -> s_t(x)``. For DDPM, ``x``
has shape ``(n, d)`` and the output is the full score; for CLD, ``x`` is a
phase point of shape ``(n, 2d)`` and the output is the velocity score only.

Perturbed estimates add ``c_t * e(x)`` to an exact score, where ``e`` is a
fixed smooth random field and ``c_t`` is calibrated per grid time so that the
measured L2(q_t) error equals the requested value.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._validation import UsageError, check_count, check_points, check_time
from .forward import PhaseSpaceMarginal, cld_marginal, ou_marginal
from .targets import Gaussian, GaussianMixture, TargetDistribution

N_FEATURES = 64
BANDWIDTH = 1.0


class CalibrationError(RuntimeError):
    pass


class _MarginalCache:
    """Memoized forward marginals keyed by time."""

    def __init__(self, dist: TargetDistribution, process: str, gamma: float, maxsize: int = 8192):
        self.dist, self.process, self.gamma, self.maxsize = dist, process, gamma, maxsize
        self._cache: dict[float, object] = {}
        self._lock = threading.Lock()

    def __call__(self, t: float):
        m = self._cache.get(t)
        if m is not None:
            return m
        if self.process == "ddpm":
            m = ou_marginal(self.dist, t)
        else:
            m = cld_marginal(self.dist, t, self.gamma)
        with self._lock:
            if len(self._cache) >= self.maxsize:
                self._cache.pop(next(iter(self._cache)))
            self._cache[t] = m
        return m


class ScoreEstimate:
    """Evaluable score estimate with a declared error model."""

    def __init__(self, process: str, dim: int, evaluator: Callable, *, error_model: str = "exact",
                 eps: float = 0.0, target: TargetDistribution | None = None, gamma: float = 2.0,
                 info: dict | None = None):
        if process not in ("ddpm", "cld"):
            raise UsageError(f"process must be 'ddpm' or 'cld', got {process!r}")
        self.process, self.dim, self.error_model = process, dim, error_model
        self.eps, self.target, self.gamma = float(eps), target, gamma
        self.info = dict(info or {})
        self._evaluator = evaluator

    @property
    def input_dim(self) -> int:
        return self.dim if self.process == "ddpm" else 2 * self.dim

    def __call__(self, t: float, x) -> np.ndarray:
        return self._evaluator(t, x)

    def affine(self, t: float):
        """Return ``(A, b)`` with ``s_t(x) = x @ A.T + b`` when the estimate is affine, else None."""
        fn = getattr(self._evaluator, "affine", None)
        return None if fn is None else fn(t)

    def __repr__(self):
        return f"ScoreEstimate(process={self.process!r}, dim={self.dim}, error_model={self.error_model!r}, eps={self.eps})"


class _ExactEvaluator:
    def __init__(self, marginals: _MarginalCache, process: str):
        self.marginals, self.process = marginals, process

    def __call__(self, t, x):
        m = self.marginals(float(t))
        if self.process == "ddpm":
            return m.score(x)
        return m.velocity_score(x)

    def affine(self, t):
        m = self.marginals(float(t))
        joint = m.joint if isinstance(m, PhaseSpaceMarginal) else m
        if not isinstance(joint, Gaussian):
            return None
        P, mu = joint.precision, joint.mean
        A, b = -P, P @ mu
        if self.process == "cld":
            d = joint.dim // 2
            A, b = A[d:], b[d:]
        return A, b


def exact_score(dist: TargetDistribution, process: str = "ddpm", gamma: float = 2.0) -> ScoreEstimate:
    """Exact score of the forward marginals of ``dist``."""
    if process == "cld" and not isinstance(dist, GaussianMixture):
        raise UsageError("CLD scores are available for Gaussian and mixture targets only")
    marginals = _MarginalCache(dist, process, gamma)
    return ScoreEstimate(process, dist.dim, _ExactEvaluator(marginals, process), target=dist, gamma=gamma)


# ---------------------------------------------------------------------------
# Perturbation fields


@dataclass(frozen=True)
class FourierField:
    """Smooth random field ``e(x) = sqrt(2/J) sum_j a_j cos(<w_j, x> + b_j)``."""

    freqs: np.ndarray  # (J, d_in)
    phases: np.ndarray  # (J,)
    amplitudes: np.ndarray  # (J, d_out)

    @classmethod
    def draw(cls, rng: np.random.Generator, d_in: int, d_out: int, n_features: int = N_FEATURES,
             bandwidth: float = BANDWIDTH) -> "FourierField":
        return cls(rng.standard_normal((n_features, d_in)) / bandwidth,
                   rng.uniform(0.0, 2 * math.pi, n_features),
                   rng.standard_normal((n_features, d_out)))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        J = len(self.phases)
        return math.sqrt(2.0 / J) * np.cos(x @ self.freqs.T + self.phases) @ self.amplitudes

    @property
    def lipschitz_bound(self) -> float:
        J = len(self.phases)
        return math.sqrt(2.0 / J) * float(np.sum(np.linalg.norm(self.amplitudes, axis=1)
                                                 * np.linalg.norm(self.freqs, axis=1)))


@dataclass(frozen=True)
class RegionField:
    """A Fourier field switched on outside the ball ``|x - center| <= radius``."""

    inner: FourierField
    center: np.ndarray
    radius: float
    width: float = 0.5

    def weight(self, x: np.ndarray) -> np.ndarray:
        excess = np.maximum(np.linalg.norm(x - self.center, axis=1) - self.radius, 0.0) / self.width
        return -np.expm1(-excess**2)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.weight(x)[:, None] * self.inner(x)

    @property
    def lipschitz_bound(self) -> float:
        # |w| <= 1, |grad w| <= sqrt(2/e)/width
        sup_inner = math.sqrt(2.0 / len(self.inner.phases)) * float(np.sum(np.linalg.norm(self.inner.amplitudes, axis=1)))
        return self.inner.lipschitz_bound + math.sqrt(2.0 / math.e) / self.width * sup_inner


@dataclass(frozen=True)
class ShiftField:
    """Constant unit-vector field; keeps affine scores affine."""

    direction: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.direction, (x.shape[0], len(self.direction)))

    lipschitz_bound = 0.0


class _PerturbedEvaluator:
    def __init__(self, base: ScoreEstimate, field, times: np.ndarray, scales: np.ndarray):
        self.base, self.field = base, field
        self.times, self.scales = times, scales

    def scale(self, t: float) -> float:
        if len(self.times) == 1:
            return float(self.scales[0])
        return float(np.interp(t, self.times, self.scales))

    def __call__(self, t, x):
        x, single = check_points(x, self.base.input_dim, finite=False)
        out = self.base(t, x) + self.scale(t) * self.field(x)
        return out[0] if single else out

    def affine(self, t):
        if not isinstance(self.field, ShiftField):
            return None
        base = self.base.affine(t)
        if base is None:
            return None
        A, b = base
        return A, b + self.scale(t) * self.field.direction


def _marginal_sampler(estimate: ScoreEstimate, dist: TargetDistribution):
    cache = _MarginalCache(dist, estimate.process, estimate.gamma)
    return cache


def _sample_marginal(marginals, dist, t, rng, n):
    if t == 0 and getattr(dist, "singular", False):
        return dist.sample(rng, n)
    return marginals(float(t)).sample(rng, n)


def make_perturbed(base: ScoreEstimate, eps: float, mode: str = "additive", seed: int = 0, *,
                   times: Sequence[float], dist: TargetDistribution | None = None,
                   n_calib: int = 100_000, corruption_radius: float = 2.0,
                   n_features: int = N_FEATURES, bandwidth: float = BANDWIDTH,
                   max_iter: int = 20) -> ScoreEstimate:
    """Perturb an exact estimate so its L2(q_t) error is ``eps`` at every grid time.

    ``mode`` is ``additive`` (random Fourier field), ``region`` (the same field
    confined to ``|x| > corruption_radius``) or ``shift`` (a constant unit
    vector, exact calibration, keeps Gaussian chains Gaussian).
    """
    if base.error_model != "exact":
        raise UsageError("make_perturbed needs an exact base estimate")
    if eps < 0:
        raise UsageError("eps must be nonnegative")
    if eps == 0:
        return base
    dist = dist if dist is not None else base.target
    if dist is None:
        raise UsageError("a target distribution is required for calibration")
    times = np.unique(np.asarray([check_time(t) for t in times], dtype=float))
    if len(times) == 0:
        raise UsageError("calibration needs at least one grid time")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    d_in, d_out = base.input_dim, base.dim
    if mode == "additive":
        fld = FourierField.draw(rng, d_in, d_out, n_features, bandwidth)
    elif mode == "region":
        fld = RegionField(FourierField.draw(rng, d_in, d_out, n_features, bandwidth),
                          np.zeros(d_in), float(corruption_radius))
    elif mode == "shift":
        u = rng.standard_normal(d_out)
        fld = ShiftField(u / np.linalg.norm(u))
    else:
        raise UsageError(f"unknown perturbation mode {mode!r}")

    scales = np.empty(len(times))
    if mode == "shift":
        scales[:] = eps
    else:
        n_calib = check_count(n_calib, "n_calib")
        marginals = _marginal_sampler(base, dist)
        calib = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
        for i, t in enumerate(times):
            x = _sample_marginal(marginals, dist, t, calib, n_calib)
            e2 = np.sum(fld(x) ** 2, axis=1).mean()
            if not e2 > 0:
                raise CalibrationError(f"perturbation field vanishes under q_t at t={t}; "
                                       "cannot reach the requested error")
            c = 1.0
            for _ in range(max_iter):
                measured = c * math.sqrt(e2)
                if abs(measured - eps) <= 1e-12 * eps:
                    break
                c *= eps / measured
            else:
                raise CalibrationError(f"calibration did not converge at t={t}: measured {measured}, target {eps}")
            scales[i] = c
    evaluator = _PerturbedEvaluator(base, fld, times, scales)
    info = {"mode": mode, "seed": seed, "times": times.tolist(), "scales": scales.tolist(),
            "lipschitz_bound": float(fld.lipschitz_bound)}
    return ScoreEstimate(base.process, base.dim, evaluator, error_model=mode, eps=eps,
                         target=dist, gamma=base.gamma, info=info)


def perturbation_field(estimate: ScoreEstimate):
    ev = estimate._evaluator
    return ev.field if isinstance(ev, _PerturbedEvaluator) else None


def perturbation_scale(estimate: ScoreEstimate, t: float) -> float:
    ev = estimate._evaluator
    return ev.scale(t) if isinstance(ev, _PerturbedEvaluator) else 0.0


def trained_score(model, process: str = "ddpm", target: TargetDistribution | None = None) -> ScoreEstimate:
    """Wrap a fitted score model (callable ``(t, x)``) as an estimate."""
    return ScoreEstimate(process, model.dim, model, error_model="trained", target=target,
                         info={"model": type(model).__name__})


def squared_errors(estimate: ScoreEstimate, dist: TargetDistribution, t: float, x: np.ndarray) -> np.ndarray:
    """Per-point ``|s_t(x) - grad ln q_t(x)|^2``."""
    if estimate.process == "ddpm":
        ref = ou_marginal(dist, t).score(x)
    else:
        ref = cld_marginal(dist, t, estimate.gamma).velocity_score(x)
    return np.sum((estimate(t, x) - ref) ** 2, axis=1)


def measure_l2_error(estimate: ScoreEstimate, dist: TargetDistribution, t: float, n: int,
                     rng: np.random.Generator) -> tuple[float, float]:
    """MC estimate of ``sqrt(E_{q_t} |s_t - grad ln q_t|^2)`` and its standard error."""
    t = check_time(t)
    n = check_count(n, minimum=2)
    if estimate.process == "ddpm":
        x = ou_marginal(dist, t).sample(rng, n)
    else:
        x = cld_marginal(dist, t, estimate.gamma).sample(rng, n)
    sq = squared_errors(estimate, dist, t, x)
    m = float(sq.mean())
    if m == 0.0:
        return 0.0, 0.0
    se_m = float(sq.std(ddof=1) / math.sqrt(n))
    value = math.sqrt(m)
    return value, se_m / (2.0 * value)


def from_config(spec: dict, dist: TargetDistribution, process: str, times: Sequence[float],
                gamma: float = 2.0) -> ScoreEstimate:
    """Build an estimate from the ``score`` config section."""
    spec = dict(spec or {})
    model = spec.get("error_model", "exact")
    base = exact_score(dist, process, gamma)
    if model == "exact":
        return base
    if model in ("additive", "region", "shift", "perturbed"):
        mode = spec.get("mode", "additive" if model == "perturbed" else model)
        return make_perturbed(base, float(spec.get("eps", 0.0)), mode, int(spec.get("seed", 0)),
                              times=times, dist=dist, n_calib=int(spec.get("n_calib", 100_000)),
                              corruption_radius=float(spec.get("corruption_radius", 2.0)))
    raise UsageError(f"unknown score error model {model!r}")
