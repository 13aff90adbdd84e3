"""Reverse-time DDPM and CLD samplers with exact frozen-score steps.

Each step freezes the score at the left endpoint and integrates the remaining
linear SDE exactly, so one step is a Gaussian draw. With ``B`` the reverse
drift matrix, ``c`` the frozen score term and ``Q`` the noise intensity:

    theta' ~ N(exp(hB) theta + int_0^h exp(uB) du c,  int_0^h exp(uB) Q exp(uB)^T du)

DDPM: ``B = 1``, ``c = 2 s``, ``Q = 2``. CLD: ``B = [[0, -1], [1, gamma]]``,
``c = (0, 2 gamma s)``, ``Q = diag(0, 2 gamma)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import expm

from . import rng as rngmod
from ._validation import UsageError, check_count, check_points, check_positive, check_time
from .forward import cld_marginal, gramian, noised_lipschitz, ou_marginal
from .score_oracle import ScoreEstimate
from .targets import GaussianMixture, TargetDistribution

GRID_TOL = 1e-9


@dataclass(frozen=True)
class SamplerConfig:
    process: str = "ddpm"
    T: float = 10.0
    N: int = 100
    early_stop: float = 0.0
    n_samples: int = 1000
    seed: int = 0
    gamma: float = 2.0
    record_trajectory: bool = False
    small_step: bool = False

    def __post_init__(self):
        if self.process not in ("ddpm", "cld"):
            raise UsageError(f"process must be 'ddpm' or 'cld', got {self.process!r}")
        check_positive(self.T, "T")
        check_count(self.N, "N")
        check_time(self.early_stop, name="early_stop")
        check_count(self.n_samples, "n_samples")
        check_positive(self.gamma, "gamma")
        k = self.early_stop / self.h
        if abs(k - round(k)) > GRID_TOL * max(1.0, k):
            raise UsageError(f"early_stop={self.early_stop} is not a multiple of h={self.h}")
        if round(k) >= self.N:
            raise UsageError("early_stop must be smaller than T")
        if self.small_step and self.h > 0.1 + 1e-12:
            raise UsageError(f"h={self.h} exceeds 1/10, required for the CLD lower bound")

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def stop_steps(self) -> int:
        return int(round(self.early_stop / self.h))

    @property
    def n_steps(self) -> int:
        """Number of reverse steps executed (``N - early_stop/h``)."""
        return self.N - self.stop_steps

    def step_time(self, k: int) -> float:
        """Forward time at which the score is frozen during reverse step ``k``."""
        return (self.N - k) * self.h

    def to_dict(self) -> dict:
        return asdict(self)


def check_step_size(config: SamplerConfig, dist: TargetDistribution, constant: float = 1.0) -> float:
    """Enforce ``h <= constant / L`` over the step times; returns the largest L seen."""
    times = [config.step_time(k) for k in range(config.n_steps)]
    if isinstance(dist, GaussianMixture) and len(times) > 64:
        times = sorted(set(times[:: max(1, len(times) // 64)] + [times[-1]]))
    L = max(noised_lipschitz(dist, t) for t in times)
    if config.h > constant / L:
        raise UsageError(f"step size h={config.h:.4g} violates the hypothesis h <= 1/L "
                         f"(L={L:.4g}, constant {constant})")
    return L


# ---------------------------------------------------------------------------
# Exact step kernels


@dataclass(frozen=True)
class StepKernel:
    """Per-coordinate affine Gaussian step ``theta' = F theta + G s + N(0, C)``."""

    F: np.ndarray  # (k, k)
    G: np.ndarray  # (k, 1)
    C: np.ndarray  # (k, k)
    chol: np.ndarray


def reverse_drift(gamma: float = 2.0) -> np.ndarray:
    return np.array([[0.0, -1.0], [1.0, gamma]])


def _integral_expm(B: np.ndarray, h: float) -> np.ndarray:
    k = B.shape[0]
    aug = np.zeros((2 * k, 2 * k))
    aug[:k, :k], aug[:k, k:] = B, np.eye(k)
    return expm(h * aug)[:k, k:]


def _chol(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(C)
    return V * np.sqrt(np.maximum(w, 0.0))


@lru_cache(maxsize=256)
def step_kernel(process: str, h: float, gamma: float = 2.0) -> StepKernel:
    h = check_positive(h, "h")
    if process == "ddpm":
        F = np.array([[math.exp(h)]])
        G = np.array([[2.0 * math.expm1(h)]])
        C = np.array([[math.expm1(2.0 * h)]])
    elif process == "cld":
        B = reverse_drift(gamma)
        F = expm(h * B)
        G = 2.0 * gamma * _integral_expm(B, h)[:, 1:2]
        C = gramian(B, np.diag([0.0, 2.0 * gamma]), h)
    else:
        raise UsageError(f"unknown process {process!r}")
    out = StepKernel(F, G, C, _chol(C))
    for a in (out.F, out.G, out.C, out.chol):
        a.setflags(write=False)
    return out


def _finite(name: str, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise UsageError(f"{name}: nonfinite input")


def ddpm_step(x, s_value, h: float, rng: np.random.Generator) -> np.ndarray:
    """One exact reverse OU step with frozen score value."""
    x = np.asarray(x, dtype=float)
    s_value = np.asarray(s_value, dtype=float)
    _finite("ddpm_step", x, s_value)
    k = step_kernel("ddpm", float(h))
    return k.F[0, 0] * x + k.G[0, 0] * s_value + k.chol[0, 0] * rng.standard_normal(x.shape)


def _cld_apply(k: StepKernel, theta: np.ndarray, s_value: np.ndarray, noise: np.ndarray) -> np.ndarray:
    d = theta.shape[-1] // 2
    x, v = theta[..., :d], theta[..., d:]
    n1, n2 = noise[..., :d], noise[..., d:]
    x_new = k.F[0, 0] * x + k.F[0, 1] * v + k.G[0, 0] * s_value + k.chol[0, 0] * n1 + k.chol[0, 1] * n2
    v_new = k.F[1, 0] * x + k.F[1, 1] * v + k.G[1, 0] * s_value + k.chol[1, 0] * n1 + k.chol[1, 1] * n2
    return np.concatenate([x_new, v_new], axis=-1)


def cld_step(state, s_value, h: float, rng: np.random.Generator, gamma: float = 2.0) -> np.ndarray:
    """One exact reverse CLD step; ``state`` is ``(x, v)`` stacked, ``s_value`` the velocity score."""
    state = np.asarray(state, dtype=float)
    s_value = np.asarray(s_value, dtype=float)
    _finite("cld_step", state, s_value)
    if state.shape[-1] != 2 * s_value.shape[-1]:
        raise UsageError("state must have twice the dimension of the velocity score")
    k = step_kernel("cld", float(h), float(gamma))
    return _cld_apply(k, state, s_value, rng.standard_normal(state.shape))


# ---------------------------------------------------------------------------
# Reverse runs


@dataclass
class SampleBatch:
    samples: np.ndarray
    velocities: np.ndarray | None
    times: np.ndarray  # forward times of the recorded states (initial first)
    snapshots: np.ndarray | None
    diagnostics: dict = field(default_factory=dict)

    @property
    def phase(self) -> np.ndarray:
        if self.velocities is None:
            return self.samples
        return np.concatenate([self.samples, self.velocities], axis=1)


def _initial_states(config: SamplerConfig, estimate: ScoreEstimate, init, rng, n):
    d = estimate.dim
    width = d if config.process == "ddpm" else 2 * d
    if init == "gaussian":
        return rng.standard_normal((n, width))
    dist = init if isinstance(init, TargetDistribution) else estimate.target
    if init != "exact" and not isinstance(init, TargetDistribution):
        raise UsageError(f"init must be 'gaussian', 'exact' or a distribution, got {init!r}")
    if dist is None:
        raise UsageError("exact initialization needs the target distribution")
    if config.process == "ddpm":
        return ou_marginal(dist, config.T).sample(rng, n)
    return cld_marginal(dist, config.T, config.gamma).sample(rng, n)


def run_reverse(config: SamplerConfig, estimate: ScoreEstimate, init="gaussian", *, workers: int = 1,
                block_size: int = rngmod.BLOCK_SIZE) -> SampleBatch:
    """Run the reverse sampler from time ``T`` down to ``early_stop``.

    ``init`` is ``"gaussian"`` (pure noise) or ``"exact"`` (the forward
    marginal at ``T`` of the estimate's target, or of a distribution passed
    directly). Paths are split into fixed blocks with their own streams, so
    the output does not depend on ``workers``.
    """
    if estimate.process != config.process:
        raise UsageError(f"estimate is for {estimate.process!r} but config runs {config.process!r}")
    target = estimate.target
    if target is not None and getattr(target, "singular", False) and config.early_stop < config.h - 1e-12:
        raise UsageError("singular targets need early_stop >= h (score undefined at t = 0)")
    h, d = config.h, estimate.dim
    kernel = step_kernel(config.process, h, config.gamma)
    n_steps = config.n_steps

    def run_block(b, start, stop):
        g = rngmod.stream(config.seed, "reverse", b)
        state = _initial_states(config, estimate, init, g, stop - start)
        drift = np.zeros(n_steps)
        snaps = [state.copy()] if config.record_trajectory else None
        for k in range(n_steps):
            t = config.step_time(k)
            s = estimate(t, state)
            if not np.all(np.isfinite(s)):
                raise FloatingPointError(f"nonfinite score at step {k} (t={t})")
            with np.errstate(over="ignore"):
                drift[k] = float(np.sum(np.linalg.norm(s, axis=1)))
            noise = g.standard_normal(state.shape)
            with np.errstate(over="ignore", invalid="ignore"):
                if config.process == "ddpm":
                    state = kernel.F[0, 0] * state + kernel.G[0, 0] * s + kernel.chol[0, 0] * noise
                else:
                    state = _cld_apply(kernel, state, s, noise)
            if not np.all(np.isfinite(state)):
                raise FloatingPointError(f"sampler state diverged at step {k} (t={t})")
            if snaps is not None:
                snaps.append(state.copy())
        return state, drift, snaps

    results = rngmod.map_blocks(run_block, config.n_samples, workers, block_size)
    states = np.concatenate([r[0] for r in results])
    drift = rngmod.pairwise_sum([r[1] for r in results]) / config.n_samples
    snapshots = None
    if config.record_trajectory:
        snapshots = np.concatenate([np.stack(r[2]) for r in results], axis=1)
    times = np.array([config.step_time(k) for k in range(n_steps + 1)])
    velocities = None
    if config.process == "cld":
        states, velocities = states[:, :d], states[:, d:]
    diagnostics = {"steps": n_steps, "h": h, "seed": config.seed, "mean_score_norm": drift,
                   "blocks": len(results), "block_size": block_size}
    return SampleBatch(states, velocities, times, snapshots, diagnostics)


def early_stop_time(R: float, d: int, eps_w2: float, c_stop: float = 1.0, h: float | None = None) -> float:
    """Early-stopping time ``c_stop * eps^2 / (sqrt(d) max(R, sqrt(d)))``.

    With ``h`` given the time is rounded down to a positive multiple of ``h``.
    """
    R = check_positive(R, "R")
    d = check_count(d, "d")
    eps_w2 = check_positive(eps_w2, "eps_w2")
    c_stop = check_positive(c_stop, "c_stop")
    if R < 1:
        warnings.warn(f"radius {R} < 1 is outside the regime of the early-stopping bound", stacklevel=2)
    if eps_w2 > math.sqrt(d) / 4:
        warnings.warn(f"eps_w2={eps_w2} is not small compared to sqrt(d)={math.sqrt(d):.3g}", stacklevel=2)
    t = c_stop * eps_w2**2 / (math.sqrt(d) * max(R, math.sqrt(d)))
    if h is None:
        return t
    h = check_positive(h, "h")
    k = math.floor(t / h + GRID_TOL)
    if k == 0:
        raise UsageError(f"step size too coarse for requested early stop (t={t:.4g} < h={h:.4g})")
    return k * h
