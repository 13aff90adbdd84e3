"""Denoising score matching on affine and random-feature hypothesis classes.

At time ``t`` with ``sigma^2 = 1 - exp(-2t)`` and ``X_t = exp(-t) X_0 + sigma Z``,
the denoising objective ``E|s(X_t) + Z/sigma|^2`` differs from the explicit
objective ``E|s(X_t) - grad ln q_t(X_t)|^2`` by a constant independent of
``s``, so both share their minimizers. Fitting is per-time least squares
of ``-Z/sigma`` on features of ``X_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.kernel_approximation import RBFSampler
from sklearn.utils.validation import check_is_fitted

from . import rng as rngmod
from ._validation import UsageError, check_count, check_points, check_time
from .forward import ou_marginal
from .targets import TargetDistribution

FORMAT_HEADER = "# sgmlab score model"
FORMAT_VERSION = 1
COND_LIMIT = 1e12


class DSMRegressor(RegressorMixin, BaseEstimator):
    """Ridge least squares from noisy points to denoising targets at one time.

    ``features="affine"`` uses ``[x, 1]``; ``features="random-feature"``
    appends random Fourier features of the given bandwidth.
    """

    def __init__(self, features: str = "affine", n_features: int = 128, bandwidth: float = 1.0,
                 ridge: float = 1e-8, random_state: int = 0):
        self.features = features
        self.n_features = n_features
        self.bandwidth = bandwidth
        self.ridge = ridge
        self.random_state = random_state

    def _design(self, X: np.ndarray) -> np.ndarray:
        cols = [X, np.ones((len(X), 1))]
        if self.features == "random-feature":
            cols.append(math.sqrt(2.0 / self.freqs_.shape[1]) * np.cos(X @ self.freqs_ + self.phases_))
        return np.hstack(cols)

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or y.shape != X.shape:
            raise UsageError("X and y must both have shape (n, d)")
        if self.features not in ("affine", "random-feature"):
            raise UsageError(f"unknown feature class {self.features!r}")
        if self.features == "random-feature":
            rff = RBFSampler(gamma=0.5 / self.bandwidth**2, n_components=self.n_features,
                             random_state=self.random_state).fit(X)
            self.freqs_, self.phases_ = rff.random_weights_, rff.random_offset_
        Phi = self._design(X)
        n, p = Phi.shape
        if n < 10 * p:
            raise UsageError(f"need at least {10 * p} samples for {p} parameters per output, got {n}")
        G = Phi.T @ Phi / n + self.ridge * np.eye(p)
        if np.linalg.cond(G) > COND_LIMIT:
            raise np.linalg.LinAlgError("normal equations are singular beyond the ridge")
        self.coef_ = np.linalg.solve(G, Phi.T @ y / n)
        resid = y - Phi @ self.coef_
        Ginv = np.linalg.inv(G)
        # per-output OLS standard errors
        self.coef_se_ = np.sqrt(np.outer(np.diag(Ginv), resid.var(axis=0, ddof=p)) / n)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X, single = check_points(X, self.n_features_in_)
        out = self._design(X) @ self.coef_
        return out[0] if single else out

    def affine(self):
        """``(A, b)`` with ``predict(x) = x @ A.T + b`` (affine class only)."""
        check_is_fitted(self, "coef_")
        if self.features != "affine":
            return None
        d = self.n_features_in_
        return self.coef_[:d].T.copy(), self.coef_[d].copy()


class ScoreModel:
    """Per-time fitted regressors evaluable as ``model(t, x)`` at grid times."""

    process = "ddpm"

    def __init__(self, times, regressors: list[DSMRegressor], model_class: str):
        if len(times) != len(regressors):
            raise UsageError("one regressor per grid time")
        self.times = np.asarray(times, dtype=float)
        self.regressors = list(regressors)
        self.model_class = model_class
        self.dim = regressors[0].n_features_in_ if regressors else 0

    def _index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[i], t, rel_tol=1e-9, abs_tol=1e-12):
            raise UsageError(f"time {t} is not on the model grid")
        return i

    def __call__(self, t, x):
        return self.regressors[self._index(float(t))].predict(x)

    def affine(self, t):
        return self.regressors[self._index(float(t))].affine()

    # -- file format -------------------------------------------------------

    def save(self, path) -> None:
        reg0 = self.regressors[0]
        lines = [FORMAT_HEADER, f"# format {FORMAT_VERSION}", f"# process {self.process}",
                 f"# class {self.model_class}", f"# dim {self.dim}", f"# n_times {len(self.times)}",
                 f"# ridge {float(reg0.ridge)!r}"]
        if self.model_class == "random-feature":
            lines.append(f"# rff {reg0.n_features} {float(reg0.bandwidth)!r} {reg0.random_state}")
        for t, reg in zip(self.times, self.regressors):
            blocks = [("coef", reg.coef_)]
            if self.model_class == "random-feature":
                blocks += [("freqs", reg.freqs_), ("phases", reg.phases_[None, :])]
            for name, M in blocks:
                lines.append(f"## time {float(t)!r} {name} {M.shape[0]} {M.shape[1]}")
                lines.extend(" ".join(repr(float(v)) for v in row) for row in M)
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ScoreModel":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if not lines or lines[0] != FORMAT_HEADER:
            raise UsageError(f"{path}: not a score model file")
        meta, blocks, i = {}, {}, 1
        while i < len(lines):
            ln = lines[i]
            if ln.startswith("## "):
                _, _, t, name, r, c = ln.split()
                rows = [list(map(float, lines[i + 1 + k].split())) for k in range(int(r))]
                blocks.setdefault(float(t), {})[name] = np.array(rows).reshape(int(r), int(c))
                i += int(r) + 1
                continue
            if ln.startswith("# "):
                key, *vals = ln[2:].split()
                meta[key] = vals
            i += 1
        if int(meta["format"][0]) != FORMAT_VERSION:
            raise UsageError(f"unsupported model format {meta['format'][0]}")
        model_class = meta["class"][0]
        regs = []
        for t in sorted(blocks):
            b = blocks[t]
            kw = {"features": model_class, "ridge": float(meta["ridge"][0])}
            if model_class == "random-feature":
                nf, bw, rs = meta["rff"]
                kw.update(n_features=int(nf), bandwidth=float(bw), random_state=int(rs))
            reg = DSMRegressor(**kw)
            reg.coef_ = b["coef"]
            reg.n_features_in_ = int(meta["dim"][0])
            if model_class == "random-feature":
                reg.freqs_, reg.phases_ = b["freqs"], b["phases"][0]
            regs.append(reg)
        return cls(sorted(blocks), regs, model_class)


# ---------------------------------------------------------------------------
# Objectives


def _noise_scale(t: float) -> float:
    t = check_time(t)
    if t == 0:
        raise UsageError("denoising objectives need t > 0 (the noise scale vanishes at t = 0)")
    return math.sqrt(-math.expm1(-2.0 * t))


def _noised_pairs(dist: TargetDistribution, t: float, n: int, rng: np.random.Generator):
    sigma = _noise_scale(t)
    x0 = dist.sample(rng, n)
    z = rng.standard_normal(x0.shape)
    return math.exp(-t) * x0 + sigma * z, z, sigma


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def dsm_loss(model: Callable, dist: TargetDistribution, t: float, n: int,
             rng: np.random.Generator) -> tuple[float, float]:
    """MC estimate of ``E|s_t(X_t) + Z/sigma_t|^2`` with its standard error."""
    n = check_count(n, minimum=2)
    xt, z, sigma = _noised_pairs(dist, t, n, rng)
    return _mean_se(np.sum((model(t, xt) + z / sigma) ** 2, axis=1))


def l2_loss(model: Callable, dist: TargetDistribution, t: float, n: int,
            rng: np.random.Generator) -> tuple[float, float]:
    """MC estimate of ``E|s_t(X_t) - grad ln q_t(X_t)|^2``."""
    n = check_count(n, minimum=2)
    xt, _, _ = _noised_pairs(dist, t, n, rng)
    return _mean_se(np.sum((model(t, xt) - ou_marginal(dist, t).score(xt)) ** 2, axis=1))


@dataclass(frozen=True)
class EquivalenceReport:
    dsm_gap: float
    l2_gap: float
    difference: float
    se: float
    passed: bool


def objective_equivalence_check(s1: Callable, s2: Callable, dist: TargetDistribution, t: float, n: int,
                                rng: np.random.Generator, *, s2_time: float | None = None,
                                n_se: float = 3.0) -> EquivalenceReport:
    """Compare the DSM gap and the explicit L2 gap between two models.

    Both gaps use the same noisy samples, so the difference of gaps has a
    small paired standard error. ``s2_time`` evaluates ``s2`` at another
    time inside the DSM objective only (a deliberately inconsistent pairing).
    """
    n = check_count(n, minimum=2)
    xt, z, sigma = _noised_pairs(dist, t, n, rng)
    truth = ou_marginal(dist, t).score(xt)
    a = s1(t, xt)
    b = s2(t, xt)
    b_dsm = b if s2_time is None else s2(s2_time, xt)
    dsm = np.sum((a + z / sigma) ** 2, axis=1) - np.sum((b_dsm + z / sigma) ** 2, axis=1)
    l2 = np.sum((a - truth) ** 2, axis=1) - np.sum((b - truth) ** 2, axis=1)
    diff = dsm - l2
    if not np.any(diff):
        return EquivalenceReport(float(dsm.mean()), float(l2.mean()), 0.0, 0.0, True)
    m, se = _mean_se(diff)
    return EquivalenceReport(float(dsm.mean()), float(l2.mean()), m, se, abs(m) <= n_se * se)


def fit_dsm(model_class: str, dist: TargetDistribution, times, n: int, seed: int = 0, *,
            ridge: float = 1e-8, n_features: int = 128, bandwidth: float = 1.0,
            workers: int = 1) -> ScoreModel:
    """Fit one regressor per grid time on ``n`` fresh noisy samples each."""
    n = check_count(n, minimum=2)
    times = [float(t) for t in times]
    for t in times:
        _noise_scale(t)

    def fit_one(i, _start, _stop):
        g = rngmod.stream(seed, "dsm", i)
        xt, z, sigma = _noised_pairs(dist, times[i], n, g)
        reg = DSMRegressor(model_class, n_features=n_features, bandwidth=bandwidth, ridge=ridge,
                           random_state=seed)
        return reg.fit(xt, -z / sigma)

    regs = rngmod.map_blocks(fit_one, len(times), workers, block_size=1)
    return ScoreModel(times, regs, model_class)


class RandomAffineScore:
    """Affine score ``x -> x A^T + b`` shared across times (test models)."""

    def __init__(self, A, b):
        self.A, self.b = np.asarray(A, dtype=float), np.asarray(b, dtype=float)
        self.dim = len(self.b)

    @classmethod
    def draw(cls, rng: np.random.Generator, d: int, scale: float = 1.0) -> "RandomAffineScore":
        return cls(-np.eye(d) + scale * rng.standard_normal((d, d)) / math.sqrt(d), scale * rng.standard_normal(d))

    def __call__(self, t, x):
        return np.asarray(x, dtype=float) @ self.A.T + self.b

    def affine(self, t):
        return self.A, self.b
