"""Path-space KL estimators, the Gaussian-chain oracle, bound evaluators and lemma checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from ._validation import UsageError, check_count, check_positive, check_time
from .forward import (
    cld_joint_sample,
    cld_marginal,
    cld_transition,
    cld_velocity_lipschitz,
    noised_lipschitz,
    ou_joint_sample,
    ou_marginal,
    transition_matrices,
)
from .samplers import SamplerConfig, step_kernel
from .score_oracle import ScoreEstimate, exact_score
from .targets import Gaussian, TargetDistribution

# ---------------------------------------------------------------------------
# Girsanov path KL


@dataclass
class GirsanovEstimate:
    process: str
    step_values: np.ndarray  # per reverse step, mean over paths
    step_se: np.ndarray
    value: float
    se: float
    inner_substeps: int
    n_paths: int
    prefactor: float
    refined: dict = field(default_factory=dict)  # substeps -> value on the same paths


def stationary_ddpm_kl(d: int, h: float, N: int) -> float:
    """Exact path KL for the exact-score DDPM chain on the standard Gaussian."""
    return 2.0 * d * N * (h - 1.0 + math.exp(-h))


def stationary_cld_kl(d: int, h: float, N: int) -> float:
    """Exact path KL for the exact-score CLD chain (gamma = 2) on the standard Gaussian."""
    return 4.0 * d * N * h * (-math.expm1(-h))


def girsanov_kl(dist: TargetDistribution, estimate: ScoreEstimate, config: SamplerConfig, n_paths: int,
                inner_substeps: int = 8, *, workers: int = 1, block_size: int = rngmod.BLOCK_SIZE,
                refine: tuple[int, ...] = ()) -> GirsanovEstimate:
    """Monte Carlo path KL between the true reverse process and the sampler.

    True reverse paths are forward paths read backwards: the forward process
    is simulated exactly on a fine grid of ``inner_substeps`` points per step,
    and the squared mismatch between the frozen estimate and the true score is
    integrated by the trapezoid rule. The prefactor is 1 for DDPM and
    ``gamma`` for CLD. ``refine`` lists coarser substep counts (divisors of
    ``inner_substeps``) evaluated on the same paths for refinement checks.
    """
    process = config.process
    if estimate.process != process:
        raise UsageError("estimate and config disagree on the process")
    n_paths = check_count(n_paths, "n_paths", minimum=2)
    m = check_count(inner_substeps, "inner_substeps", minimum=4)
    for r in refine:
        if r < 1 or m % r:
            raise UsageError(f"refinement level {r} must divide inner_substeps={m}")
    t0 = config.early_stop
    if getattr(dist, "singular", False) and t0 == 0:
        raise UsageError("singular target needs an early stop for path KL estimation")
    n_steps, h, gamma = config.n_steps, config.h, config.gamma
    prefactor = 1.0 if process == "ddpm" else gamma
    truth = exact_score(dist, process, gamma)
    delta = h / m
    F, C = transition_matrices(process, delta, gamma)
    w, V = np.linalg.eigh(C)
    Lc = V * np.sqrt(np.maximum(w, 0.0))
    levels = (m, *refine)
    weights = {}
    for r in levels:
        stride = m // r
        wt = np.zeros(m + 1)
        wt[::stride] = h / r
        wt[0] = wt[-1] = 0.5 * h / r
        weights[r] = wt

    def advance(state, g):
        xi = g.standard_normal(state.shape)
        if process == "ddpm":
            return F[0, 0] * state + Lc[0, 0] * xi
        d = state.shape[1] // 2
        x, v = state[:, :d], state[:, d:]
        n1, n2 = xi[:, :d], xi[:, d:]
        return np.concatenate([F[0, 0] * x + F[0, 1] * v + Lc[0, 0] * n1 + Lc[0, 1] * n2,
                               F[1, 0] * x + F[1, 1] * v + Lc[1, 0] * n1 + Lc[1, 1] * n2], axis=1)

    def run_block(b, start, stop):
        g = rngmod.stream(config.seed, "girsanov", b)
        n = stop - start
        if process == "ddpm":
            state = dist.sample(g, n) if t0 == 0 else ou_marginal(dist, t0).sample(g, n)
        else:
            state = cld_marginal(dist, t0, gamma).sample(g, n)
        sums = {r: np.zeros(n_steps) for r in levels}
        sq = np.zeros(n_steps)
        totals = {r: np.zeros(n) for r in levels}
        for j in range(n_steps):
            a = t0 + j * h
            scores = [truth(a, state)]
            for i in range(1, m + 1):
                state = advance(state, g)
                scores.append(truth(a + i * delta, state))
            frozen = estimate(a + h, state)
            f = np.stack([np.sum((frozen - sc) ** 2, axis=1) for sc in scores])  # (m+1, n)
            k = n_steps - 1 - j
            for r in levels:
                per_path = weights[r] @ f
                totals[r] += per_path
                sums[r][k] = per_path.sum()
                if r == m:
                    sq[k] = np.sum(per_path**2)
        return sums, sq, {r: (totals[r].sum(), np.sum(totals[r] ** 2)) for r in levels}

    results = rngmod.map_blocks(run_block, n_paths, workers, block_size)
    step_sum = rngmod.pairwise_sum([res[0][m] for res in results])
    step_sq = rngmod.pairwise_sum([res[1] for res in results])
    step_mean = step_sum / n_paths
    step_var = np.maximum(step_sq / n_paths - step_mean**2, 0.0) * n_paths / (n_paths - 1)
    out = {}
    for r in levels:
        tot = rngmod.pairwise_sum([np.array(res[2][r]) for res in results])
        mean = tot[0] / n_paths
        var = max(tot[1] / n_paths - mean**2, 0.0) * n_paths / (n_paths - 1)
        out[r] = (prefactor * mean, prefactor * math.sqrt(var / n_paths))
    value, se = out[m]
    return GirsanovEstimate(process, prefactor * step_mean, prefactor * np.sqrt(step_var / n_paths), float(value),
                            float(se), m, n_paths, prefactor,
                            refined={r: float(out[r][0]) for r in refine})


# ---------------------------------------------------------------------------
# Gaussian chain oracle


def gaussian_chain_law(config: SamplerConfig, estimate: ScoreEstimate, init="gaussian") -> Gaussian:
    """Exact output law of the sampler when every frozen score is affine.

    For DDPM the result lives on R^d; for CLD on the phase space R^2d
    (use :func:`position_marginal` for the data coordinates).
    """
    d = estimate.dim
    width = d if config.process == "ddpm" else 2 * d
    if isinstance(init, Gaussian):
        mean, cov = init.mean.copy(), init.cov.copy()
    elif init == "gaussian":
        mean, cov = np.zeros(width), np.eye(width)
    elif init == "exact":
        q = estimate.target
        if not isinstance(q, Gaussian):
            raise UsageError("exact initialization of the chain oracle needs a Gaussian target")
        qT = ou_marginal(q, config.T) if config.process == "ddpm" else cld_marginal(q, config.T, config.gamma).joint
        mean, cov = qT.mean.copy(), qT.cov.copy()
    else:
        raise UsageError(f"unknown init {init!r}")
    if mean.shape != (width,):
        raise UsageError("initial law has the wrong dimension")
    k = step_kernel(config.process, config.h, config.gamma)
    eye = np.eye(d)
    F, G, C = np.kron(k.F, eye), np.kron(k.G, eye), np.kron(k.C, eye)
    for step in range(config.n_steps):
        aff = estimate.affine(config.step_time(step))
        if aff is None:
            raise UsageError("gaussian_chain_law needs affine score estimates")
        A, b = aff
        M = F + G @ A
        mean = M @ mean + G @ b
        cov = M @ cov @ M.T + C
        cov = 0.5 * (cov + cov.T)
    return Gaussian(mean, cov)


def position_marginal(law: Gaussian, d: int) -> Gaussian:
    return Gaussian(law.mean[:d], law.cov[:d, :d])


def stationary_chain_variance(h: float) -> float:
    """Per-coordinate fixed point of the exact-score DDPM chain on the standard Gaussian."""
    eh = math.exp(h)
    return (eh + 1.0) / (3.0 - eh)


# ---------------------------------------------------------------------------
# Bound right-hand sides


@dataclass
class BoundTerms:
    which: str
    terms: dict
    constant: float = 1.0

    @property
    def total(self) -> float:
        return self.constant * float(sum(self.terms.values()))


def theorem_bound_rhs(which: str, *, kl: float = 0.0, fi: float | None = None, L: float = 1.0, d: int = 1,
                      m2: float = 0.0, T: float = 1.0, h: float = 0.0, eps_sc: float = 0.0, c: float = 1.0,
                      eps_tv: float | None = None, eps_w2: float | None = None, R: float | None = None,
                      constant: float = 1.0) -> BoundTerms:
    """Evaluate a bound with unit constants.

    ``m2`` is the root second moment. ``which`` is ``ddpm``, ``cld`` or
    ``compact-N`` (step count for compactly supported data, log factors dropped).
    """
    if which == "compact-N":
        if eps_tv is None or eps_w2 is None or R is None:
            raise UsageError("compact-N needs eps_tv, eps_w2 and R")
        n = d**3 * R**4 * max(R, math.sqrt(d)) ** 4 / (eps_tv**2 * eps_w2**8)
        return BoundTerms(which, {"N": n}, constant)
    if which not in ("ddpm", "cld"):
        raise UsageError(f"unknown bound {which!r}")
    if min(kl, L, m2, T, h, eps_sc) < 0:
        raise UsageError("bound parameters must be nonnegative")
    if which == "ddpm":
        forward = math.sqrt(kl) * math.exp(-T)
    else:
        if fi is None:
            raise UsageError("the CLD bound needs the relative Fisher information")
        forward = math.sqrt(kl + fi) * math.exp(-c * T)
    rt = math.sqrt(T)
    terms = {"forward": forward, "discretization": (L * math.sqrt(d * h) + L * m2 * h) * rt,
             "score": eps_sc * rt}
    return BoundTerms(which, terms, constant)


@dataclass
class BoundReport:
    measured: float
    se: float
    exact: bool
    rhs: BoundTerms | None
    passed: bool
    slopes: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# CLD lower bound


def stationary_velocity_increment(d: int, delta: float, gamma: float = 2.0) -> float:
    """``E|V_t - V_s|^2`` for the stationary CLD with ``t - s = delta``."""
    M0 = cld_transition(delta, gamma).M0
    return 2.0 * d * (1.0 - M0[1, 1])


def cld_lower_bound_check(d: int, h: float, T: float, n_paths: int, *, seed: int = 0, inner_substeps: int = 8,
                          workers: int = 1) -> BoundReport:
    """Compare the exact-score CLD path KL on the standard Gaussian with ``d h T``."""
    h = check_positive(h, "h")
    if h > 0.1 + 1e-12:
        raise UsageError(f"h={h} > 1/10: the lower bound is stated for step sizes h <= 1/10")
    N = round(T / h)
    if abs(N * h - T) > 1e-9 * T:
        raise UsageError(f"T={T} is not a multiple of h={h}")
    q = Gaussian.standard(d)
    config = SamplerConfig("cld", T=float(T), N=N, seed=seed, small_step=True)
    est = girsanov_kl(q, exact_score(q, "cld"), config, n_paths, inner_substeps, workers=workers)
    threshold = d * h * T
    passed = est.value >= threshold * (1.0 - 0.02) - 4.0 * est.se
    return BoundReport(est.value, est.se, False, None, bool(passed),
                       info={"threshold": threshold, "closed_form": stationary_cld_kl(d, h, N),
                             "d": d, "h": h, "T": T, "N": N})


# ---------------------------------------------------------------------------
# Lemma checks


@dataclass
class CheckRow:
    check: str
    s: float
    t: float
    value: float
    se: float
    bound: float
    ratio: float
    passed: bool


@dataclass
class CheckReport:
    rows: list
    fitted_C: float
    passed: bool


def _second_moment(dist: TargetDistribution) -> float:
    # mixtures have a closed form; their stats() runs Monte Carlo for KL and FI
    if hasattr(dist, "second_moment"):
        return float(dist.second_moment())
    return dist.stats().second_moment


def _mc_mean(vals: np.ndarray) -> tuple[float, float]:
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


def verify_moment_bounds(dist: TargetDistribution, process: str, times, n: int, *, seed: int = 0,
                         gamma: float = 2.0, C_max: float = 10.0) -> CheckReport:
    """Second-moment and score-energy bounds along the forward process."""
    n = check_count(n, minimum=2)
    d = dist.dim
    m2sq = _second_moment(dist)
    slack = 1.0 + 4.0 / math.sqrt(n)
    rows, ratios = [], []
    for i, t in enumerate(times):
        t = check_time(t)
        g = rngmod.stream(seed, "moments", i)
        if process == "ddpm":
            qt = ou_marginal(dist, t) if t > 0 or not dist.singular else None
            z = dist.sample(g, n) if qt is None else qt.sample(g, n)
            val, se = _mc_mean(np.sum(z**2, axis=1))
            bound = max(d, m2sq)
            rows.append(CheckRow("moment", t, t, val, se, bound, val / bound, val <= bound * slack))
            if qt is not None:
                L = noised_lipschitz(dist, t)
                sv, sse = _mc_mean(np.sum(qt.score(z) ** 2, axis=1))
                rows.append(CheckRow("score", t, t, sv, sse, L * d, sv / (L * d), sv <= L * d * slack))
        elif process == "cld":
            qt = cld_marginal(dist, t, gamma)
            th = qt.sample(g, n)
            val, se = _mc_mean(np.sum(th**2, axis=1))
            bound = d + m2sq
            ratios.append(val / bound)
            rows.append(CheckRow("moment", t, t, val, se, bound, val / bound, val / bound <= C_max))
            L = cld_velocity_lipschitz(dist, t, gamma, full=True)
            sv, sse = _mc_mean(np.sum(qt.velocity_score(th) ** 2, axis=1))
            rows.append(CheckRow("score", t, t, sv, sse, L * d, sv / (L * d), sv <= L * d * slack))
        else:
            raise UsageError(f"unknown process {process!r}")
    fitted = max(ratios) if ratios else max(r.ratio for r in rows if r.check == "moment")
    return CheckReport(rows, float(fitted), all(r.passed for r in rows))


def verify_movement_bounds(dist: TargetDistribution, process: str, pairs, n: int, *, seed: int = 0,
                           gamma: float = 2.0, C_max: float = 10.0) -> CheckReport:
    """Fit ``C`` in ``E|theta_t - theta_s|^2 <= C (delta^2 m2^2 + delta d)``."""
    n = check_count(n, minimum=2)
    d = dist.dim
    m2sq = _second_moment(dist)
    rows = []
    for i, (s, t) in enumerate(pairs):
        s, t = check_time(s, name="s"), check_time(t)
        delta = t - s
        if delta < 0 or delta > 1 + 1e-12:
            raise UsageError(f"movement checks need 0 <= t - s <= 1, got {delta}")
        g = rngmod.stream(seed, "movement", i)
        if process == "ddpm":
            a, b = ou_joint_sample(dist, s, t, g, n)
        elif process == "cld":
            a, b = cld_joint_sample(dist, s, t, g, n, gamma)
        else:
            raise UsageError(f"unknown process {process!r}")
        val, se = _mc_mean(np.sum((b - a) ** 2, axis=1))
        scale = delta**2 * m2sq + delta * d
        ratio = val / scale if scale > 0 else 0.0
        rows.append(CheckRow("movement", s, t, val, se, C_max * scale, ratio, ratio <= C_max))
    fitted = max(r.ratio for r in rows) if rows else 0.0
    return CheckReport(rows, float(fitted), all(r.passed for r in rows))


def score_perturbation_check(q: Gaussian, M0: np.ndarray, M1: np.ndarray, thetas, *,
                             ratio_max: float = 10.0) -> CheckReport:
    """Score change under ``q -> (M0)_# q * N(0, M1)`` for a Gaussian ``q``.

    The left side ``|grad ln (pushed law / q)|`` is exact because the pushed
    and smoothed law is Gaussian; the right side uses unit constants and the
    ambient dimension of ``theta``.
    """
    M0, M1 = np.asarray(M0, dtype=float), np.asarray(M1, dtype=float)
    D = q.dim
    if M0.shape != (D, D) or M1.shape != (D, D):
        raise UsageError("M0 and M1 must match the dimension of q")
    zeta = float(np.linalg.norm(M0 - np.eye(D), 2))
    if zeta >= 1:
        raise UsageError(f"need |M0 - I|_op < 1, got {zeta}")
    m1 = float(np.linalg.norm(M1, 2))
    P = q.precision
    L = float(np.linalg.eigvalsh(P)[-1])
    if m1 > 0 and L > 1.0 / (4.0 * m1) + 1e-12:
        raise UsageError(f"need L <= 1/(4 |M1|_op): L={L}, |M1|_op={m1}")
    pushed = Gaussian(M0 @ q.mean, 0.5 * ((M0 @ q.cov @ M0.T + M1) + (M0 @ q.cov @ M0.T + M1).T))
    rows = []
    for th in np.atleast_2d(np.asarray(thetas, dtype=float)):
        lhs = float(np.linalg.norm(pushed.score(th) - q.score(th)))
        gradH = float(np.linalg.norm(P @ (th - q.mean)))
        rhs = L * math.sqrt(m1 * D) + L * zeta * float(np.linalg.norm(th)) + (zeta + L * m1) * gradH
        ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
        rows.append(CheckRow("score-perturbation", zeta, m1, lhs, 0.0, rhs, ratio, ratio <= ratio_max))
    fitted = max(r.ratio for r in rows)
    return CheckReport(rows, float(fitted), all(r.passed for r in rows))
