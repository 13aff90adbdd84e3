"""Divergences between distributions: exact Gaussian forms and sample estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import sqrtm

from ._validation import UsageError, check_count
from .targets import Gaussian, TargetDistribution

KINDS = ("tv", "kl", "w2", "fi", "bl")


@dataclass(frozen=True)
class DivergenceResult:
    kind: str
    value: float
    method: str
    se: float = 0.0
    n: int | None = None
    pair: str | None = None
    note: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown divergence kind {self.kind!r}")
        v = self.value
        if self.kind == "tv" and not (-1e-12 <= v <= 1 + 1e-12):
            raise ValueError(f"TV out of [0, 1]: {v}")
        if self.kind != "tv" and v < 0:
            raise ValueError(f"{self.kind} must be nonnegative, got {v}")


def _check_pair(g1: Gaussian, g2: Gaussian):
    if not (isinstance(g1, Gaussian) and isinstance(g2, Gaussian)):
        raise UsageError("gaussian_divergence needs two Gaussian distributions")
    if g1.dim != g2.dim:
        raise UsageError(f"dimension mismatch: {g1.dim} vs {g2.dim}")


def kl_gaussian(g1: Gaussian, g2: Gaussian) -> float:
    """KL(g1 || g2)."""
    d = g1.dim
    P2 = g2.precision
    dm = g2.mean - g1.mean
    _, ld1 = np.linalg.slogdet(g1.cov)
    _, ld2 = np.linalg.slogdet(g2.cov)
    val = 0.5 * (np.trace(P2 @ g1.cov) + dm @ P2 @ dm - d + ld2 - ld1)
    return max(float(val), 0.0)


def w2_gaussian(g1: Gaussian, g2: Gaussian) -> float:
    dm2 = float(np.sum((g1.mean - g2.mean) ** 2))
    r = np.real(sqrtm(g2.cov))
    cross = np.real(sqrtm(r @ g1.cov @ r))
    bures = np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.trace(cross)
    return math.sqrt(max(dm2 + float(bures), 0.0))


def fi_gaussian(g1: Gaussian, g2: Gaussian) -> float:
    """Relative Fisher information ``E_{g1} |grad ln g1 - grad ln g2|^2``."""
    P1, P2 = g1.precision, g2.precision
    D = P2 - P1
    b = P2 @ (g1.mean - g2.mean)
    # grad ln g1 - grad ln g2 = D (x - m1) + b  at x ~ N(m1, S1)
    return max(float(np.trace(D @ g1.cov @ D.T) + b @ b), 0.0)


def _proportional(S1: np.ndarray, S2: np.ndarray) -> float | None:
    ratio = np.trace(S1) / np.trace(S2)
    if np.allclose(S1, ratio * S2, rtol=1e-10, atol=1e-12):
        return float(ratio)
    return None


def tv_gaussian_proportional(m1, m2, a: float, S: np.ndarray) -> float:
    """TV between N(m1, a S) and N(m2, S).

    With whitening by ``S``, the set where one density exceeds the other is a
    ball (or its complement), whose mass under each law is a noncentral
    chi-square probability.
    """
    d = len(m1)
    L = np.linalg.cholesky(S)
    m1w = np.linalg.solve(L, m1)
    m2w = np.linalg.solve(L, m2)
    dm = m1w - m2w
    if abs(a - 1.0) < 1e-12:
        return float(2.0 * stats.norm.cdf(0.5 * np.linalg.norm(dm)) - 1.0)
    # p1 > p2  <=>  |x - c|^2 < r2 (a < 1) or > r2 (a > 1)
    c = (m1w - a * m2w) / (1.0 - a)
    r2 = a / (1.0 - a) * (np.sum(dm**2) / (1.0 - a) - d * math.log(a))
    if r2 <= 0:
        prob1 = prob2 = 0.0
    else:
        lam1 = float(np.sum((m1w - c) ** 2)) / a
        lam2 = float(np.sum((m2w - c) ** 2))
        prob1 = _ncx2_cdf(r2 / a, d, lam1)
        prob2 = _ncx2_cdf(r2, d, lam2)
    # prob_i = mass of the ball under law i
    tv = prob1 - prob2 if a < 1 else prob2 - prob1
    return float(min(max(tv, 0.0), 1.0))


def _ncx2_cdf(x: float, df: int, nc: float) -> float:
    if nc < 1e-300:
        return float(stats.chi2.cdf(x, df))
    return float(stats.ncx2.cdf(x, df, nc))


def _tv_gaussian_mc(g1: Gaussian, g2: Gaussian, rng: np.random.Generator, n: int) -> tuple[float, float]:
    # TV = E_{g2} (1 - p1/p2)_+ ; bounded integrand keeps the SE honest
    x = g2.sample(rng, n)
    lr = g1.log_density(x) - g2.log_density(x)
    vals = np.maximum(-np.expm1(np.minimum(lr, 700.0)), 0.0)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


def gaussian_divergence(kind: str, g1: Gaussian, g2: Gaussian, *, rng: np.random.Generator | None = None,
                        n: int = 200_000) -> DivergenceResult:
    """Closed-form divergence between Gaussians (TV by MC if covariances are not proportional)."""
    _check_pair(g1, g2)
    kind = kind.lower()
    if kind == "kl":
        return DivergenceResult("kl", kl_gaussian(g1, g2), "closed-form", note="KL(g1 || g2)")
    if kind == "w2":
        return DivergenceResult("w2", w2_gaussian(g1, g2), "closed-form")
    if kind == "fi":
        return DivergenceResult("fi", fi_gaussian(g1, g2), "closed-form", note="FI(g1 || g2)")
    if kind == "tv":
        a = _proportional(g1.cov, g2.cov)
        if a is not None:
            return DivergenceResult("tv", tv_gaussian_proportional(g1.mean, g2.mean, a, g2.cov), "closed-form")
        rng = rng if rng is not None else np.random.default_rng(0)
        n = check_count(n, minimum=2)
        val, se = _tv_gaussian_mc(g1, g2, rng, n)
        return DivergenceResult("tv", val, "mc", se=se, n=n)
    raise UsageError(f"unsupported Gaussian divergence {kind!r}")


# ---------------------------------------------------------------------------
# Sample-based estimators


def _bin_probabilities(dist: TargetDistribution, edges: list[np.ndarray], nodes: int) -> np.ndarray:
    g, w = np.polynomial.legendre.leggauss(nodes)
    axes_pts, axes_w = [], []
    for e in edges:
        lo, hi = e[:-1, None], e[1:, None]
        axes_pts.append((0.5 * (hi - lo) * g + 0.5 * (hi + lo)).ravel())
        axes_w.append((0.5 * (hi - lo) * w).ravel())
    grids = np.meshgrid(*axes_pts, indexing="ij")
    pts = np.stack([gr.ravel() for gr in grids], axis=1)
    wts = axes_w[0]
    for aw in axes_w[1:]:
        wts = np.multiply.outer(wts, aw)
    dens = np.exp(dist.log_density(pts)).reshape(wts.shape) * wts
    nb = [len(e) - 1 for e in edges]
    shape = []
    for k in nb:
        shape += [k, nodes]
    return dens.reshape(shape).sum(axis=tuple(range(1, 2 * len(nb), 2)))


def histogram_tv(samples: np.ndarray, dist: TargetDistribution, *, bins: int = 64,
                 bounds: tuple[float, float] | None = None, nodes: int = 6) -> DivergenceResult:
    """TV between the empirical law of ``samples`` and ``dist`` on a ``bins^d`` grid.

    Bin masses of ``dist`` use Gauss-Legendre nodes inside each bin; mass
    outside the grid is one extra cell. The value is the TV between the two
    binned laws, a lower bound on the true TV up to sampling noise, which
    inflates it by roughly ``sqrt(occupied_bins / n)``.
    """
    x = np.asarray(samples, dtype=float)
    n, d = x.shape
    if d > 2:
        raise UsageError("histogram TV is limited to d <= 2")
    if bounds is None:
        lo, hi = np.quantile(x, [0.0005, 0.9995], axis=0)
        span = np.max(hi - lo)
        lo, hi = float(np.min(lo) - 0.05 * span), float(np.max(hi) + 0.05 * span)
    else:
        lo, hi = bounds
    edges = [np.linspace(lo, hi, bins + 1)] * d
    counts, _ = np.histogramdd(x, bins=edges)
    phat = counts / n
    q = _bin_probabilities(dist, edges, nodes)
    p_out, q_out = 1.0 - phat.sum(), max(1.0 - q.sum(), 0.0)
    tv = 0.5 * (np.abs(phat - q).sum() + abs(p_out - q_out))
    se = 0.5 * math.sqrt(float(np.sum(phat * (1 - phat))) / n)
    return DivergenceResult("tv", float(min(tv, 1.0)), "histogram", se=se, n=n,
                            note=f"{bins}^{d} bins on [{lo:.4g}, {hi:.4g}]")


def kde_tv(samples: np.ndarray, dist: TargetDistribution, rng: np.random.Generator,
           n_ref: int = 20_000) -> DivergenceResult:
    """TV = E_q (1 - p_hat/q)_+ with a Gaussian KDE ``p_hat`` (d = 3)."""
    x = np.asarray(samples, dtype=float)
    kde = stats.gaussian_kde(x.T)
    y = dist.sample(rng, n_ref)
    ratio = np.exp(kde.logpdf(y.T) - dist.log_density(y))
    vals = np.maximum(1.0 - ratio, 0.0)
    return DivergenceResult("tv", float(vals.mean()), "kde", se=float(vals.std(ddof=1) / math.sqrt(n_ref)),
                            n=len(x))


def w2_1d(x: np.ndarray, y: np.ndarray) -> float:
    """Exact W2 between two 1-d empirical laws (quantile coupling)."""
    x, y = np.sort(np.ravel(x)), np.sort(np.ravel(y))
    if len(x) == len(y):
        return float(math.sqrt(np.mean((x - y) ** 2)))
    # merge the two quantile functions on the union of breakpoints
    u = np.union1d(np.arange(1, len(x) + 1) / len(x), np.arange(1, len(y) + 1) / len(y))
    du = np.diff(np.concatenate([[0.0], u]))
    ix = np.minimum(np.ceil(u * len(x) - 1e-9).astype(int) - 1, len(x) - 1)
    iy = np.minimum(np.ceil(u * len(y) - 1e-9).astype(int) - 1, len(y) - 1)
    return float(math.sqrt(np.sum(du * (x[ix] - y[iy]) ** 2)))


def sliced_w2(x: np.ndarray, y: np.ndarray, rng: np.random.Generator, n_directions: int = 64) -> DivergenceResult:
    """``sqrt(E_u W2^2(<u, X>, <u, Y>))`` over uniform directions ``u``."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.ndim == 1:
        x, y = x[:, None], y[:, None]
    d = x.shape[1]
    if y.shape[1] != d:
        raise UsageError("sample sets have different dimensions")
    if d == 1:
        return DivergenceResult("w2", w2_1d(x, y), "assignment", n=len(x))
    n_directions = check_count(n_directions, "n_directions", minimum=2)
    u = rng.standard_normal((n_directions, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    sq = np.array([w2_1d(x @ v, y @ v) ** 2 for v in u])
    m = float(sq.mean())
    val = math.sqrt(m)
    se_m = float(sq.std(ddof=1) / math.sqrt(n_directions))
    se = se_m / (2 * val) if val > 0 else 0.0
    return DivergenceResult("w2", val, "sliced", se=se, n=len(x), note=f"{n_directions} directions")


def empirical_divergence(kind: str, samples: np.ndarray, reference, *, rng: np.random.Generator | None = None,
                         bins: int = 64, n_directions: int = 64, bounds=None) -> DivergenceResult:
    """Divergence between ``samples`` and ``reference`` (samples or a distribution).

    ``tv`` needs an analytic reference (histogram for d <= 2, KDE for d = 3);
    ``w2`` is exact in 1-d and sliced otherwise. A distribution reference for
    ``w2`` is sampled with as many points as ``samples``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    kind = kind.lower()
    if kind == "tv":
        if not isinstance(reference, TargetDistribution):
            raise UsageError("TV estimation needs an analytic reference density")
        d = x.shape[1]
        if d > 3:
            raise UsageError(f"TV estimation refused for d = {d} > 3 (bias uncontrolled)")
        if d == 3:
            return kde_tv(x, reference, rng)
        return histogram_tv(x, reference, bins=bins, bounds=bounds)
    if kind == "w2":
        y = reference.sample(rng, len(x)) if isinstance(reference, TargetDistribution) else reference
        return sliced_w2(x, y, rng, n_directions)
    raise UsageError(f"unsupported empirical divergence {kind!r}")


def bl_upper(tv: DivergenceResult, w: DivergenceResult) -> DivergenceResult:
    """Bounded-Lipschitz upper bound ``min(2 TV, W1)`` with ``W1 <= W2``."""
    if tv.kind != "tv" or w.kind != "w2":
        raise UsageError("bl_upper takes a TV result and a W2 result")
    if tv.pair is not None and w.pair is not None and tv.pair != w.pair:
        raise UsageError(f"results measured on different pairs: {tv.pair!r} vs {w.pair!r}")
    two_tv = 2.0 * tv.value
    if two_tv <= w.value:
        return DivergenceResult("bl", two_tv, "bound", se=2.0 * tv.se, pair=tv.pair, note="2*TV")
    return DivergenceResult("bl", w.value, "bound", se=w.se, pair=tv.pair, note="W1 <= W2")
