"""Config-driven experiment tasks, sweeps and report files."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import analysis, metrics, samplers, score_matching, score_oracle
from . import rng as rngmod
from ._validation import ConfigError, UsageError
from .config import canonical, grid_points, section
from .forward import (
    OUTransition,
    cld_transition,
    cld_velocity_lipschitz,
    noised_lipschitz,
    ou_marginal,
)
from .targets import Gaussian, GaussianMixture, TargetDistribution, from_config

CSV_COLUMNS = ("experiment_id", "target", "process", "d", "T", "N", "h", "eps_sc", "metric", "value", "se",
               "rhs", "pass")
FIT_COLUMNS = ("experiment_id", "axis", "metric", "group", "n_points", "slope", "intercept", "r2", "lo", "hi",
               "pass")


@dataclass
class Row:
    experiment_id: str
    target: str = ""
    process: str = ""
    d: int | None = None
    T: float | None = None
    N: int | None = None
    h: float | None = None
    eps_sc: float | None = None
    metric: str = ""
    value: float | None = None
    se: float | None = None
    rhs: float | None = None
    passed: bool | None = None
    gate: bool = False

    def cells(self) -> list[str]:
        vals = [self.experiment_id, self.target, self.process, self.d, self.T, self.N, self.h, self.eps_sc,
                self.metric, self.value, self.se, self.rhs, self.passed]
        return [_fmt(v) for v in vals]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class TaskResult:
    rows: list
    artifacts: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows if r.gate)


def _label(spec: dict) -> str:
    kind = spec.get("kind", "")
    if kind in ("sphere", "ball"):
        return f"{kind}(R={spec.get('radius')})"
    return kind


def _row_base(cfg: dict, target: TargetDistribution | None, sconf: samplers.SamplerConfig | None,
              eps: float | None = None) -> dict:
    base = {"experiment_id": cfg["experiment"]}
    if target is not None:
        base.update(target=_label(cfg.get("target", {})), d=target.dim)
    if sconf is not None:
        base.update(process=sconf.process, T=sconf.T, N=sconf.N, h=sconf.h)
    if eps is not None:
        base["eps_sc"] = eps
    return base


def build_sampler_config(cfg: dict, seed: int) -> samplers.SamplerConfig:
    s = section(cfg, "sampler")
    return samplers.SamplerConfig(process=s["process"], T=float(s["T"]), N=int(s["N"]),
                                  early_stop=float(s["early_stop"]), n_samples=int(s["n_samples"]), seed=seed,
                                  gamma=float(s["gamma"]))


def build_estimate(cfg: dict, target: TargetDistribution, sconf: samplers.SamplerConfig):
    spec = section(cfg, "score")
    if spec["error_model"] == "trained":
        model = score_matching.ScoreModel.load(spec["model"])
        return score_oracle.trained_score(model, sconf.process, target)
    times = [sconf.step_time(k) for k in range(sconf.n_steps)]
    return score_oracle.from_config(spec, target, sconf.process, times, sconf.gamma)


def _lipschitz_over_steps(target, sconf) -> float:
    times = [sconf.step_time(k) for k in range(sconf.n_steps)]
    if len(times) > 64:
        times = sorted(set(times[:: len(times) // 64] + [times[-1]]))
    if sconf.process == "ddpm":
        return max(noised_lipschitz(target, t) for t in times)
    return max(cld_velocity_lipschitz(target, t, sconf.gamma, full=True) for t in times)


def apply_guard(cfg: dict, target: TargetDistribution, sconf: samplers.SamplerConfig) -> float | None:
    """Enforce ``h <= constant / L``; skipped for singular targets in ``auto`` mode."""
    s = section(cfg, "sampler")
    mode = s["guard"]
    if mode == "off" or (mode == "auto" and getattr(target, "singular", False)):
        return None
    if mode not in ("auto", "on"):
        raise ConfigError(f"sampler.guard must be 'auto', 'on' or 'off', got {mode!r}")
    L = _lipschitz_over_steps(target, sconf)
    if sconf.h > float(s["guard_constant"]) / L:
        raise UsageError(f"step size h={sconf.h:.4g} violates the hypothesis h <= 1/L "
                         f"(L={L:.4g}, constant {s['guard_constant']})")
    return L


def _init(cfg: dict):
    return section(cfg, "sampler")["init"]


# ---------------------------------------------------------------------------
# Tasks


def task_chain(cfg: dict, seed: int, threads: int, out: Path | None) -> TaskResult:
    target = from_config(cfg["target"])
    if not isinstance(target, Gaussian):
        raise ConfigError("the chain oracle needs a Gaussian target")
    sconf = build_sampler_config(cfg, seed)
    L_guard = apply_guard(cfg, target, sconf)
    est = build_estimate(cfg, target, sconf)
    law = analysis.gaussian_chain_law(sconf, est, _init(cfg))
    if sconf.process == "cld":
        law = analysis.position_marginal(law, target.dim)
    b = section(cfg, "bound")
    st = target.stats()
    L = float(b["L"]) if "L" in b else (L_guard or _lipschitz_over_steps(target, sconf))
    which = "ddpm" if sconf.process == "ddpm" else "cld"
    rhs = analysis.theorem_bound_rhs(which, kl=st.kl_to_gaussian, fi=st.fi_to_gaussian, L=L, d=target.dim,
                                     m2=math.sqrt(st.second_moment), T=sconf.T, h=sconf.h, eps_sc=est.eps,
                                     c=float(b["c"])).total
    base = _row_base(cfg, target, sconf, est.eps)
    rows = []
    for m in cfg.get("metrics", ["tv", "kl", "w2"]):
        r = metrics.gaussian_divergence(m, law, target)
        if m == "tv":
            rows.append(Row(**base, metric="tv", value=r.value, se=r.se, rhs=rhs,
                            passed=r.value <= float(b["constant"]) * rhs, gate=True))
        else:
            rows.append(Row(**base, metric=m, value=r.value, se=r.se))
    return TaskResult(rows, info={"rhs_terms": analysis.theorem_bound_rhs(
        which, kl=st.kl_to_gaussian, fi=st.fi_to_gaussian, L=L, d=target.dim, m2=math.sqrt(st.second_moment),
        T=sconf.T, h=sconf.h, eps_sc=est.eps, c=float(b["c"])).terms, "L": L})


def write_samples(path: Path, batch: samplers.SampleBatch, header: dict) -> None:
    d = batch.samples.shape[1]
    cols = [f"x{i + 1}" for i in range(d)]
    if batch.velocities is not None:
        cols += [f"v{i + 1}" for i in range(d)]
    lines = ["# sgmlab samples"] + [f"# {k} {v}" for k, v in header.items()] + ["# columns " + " ".join(cols)]
    buf = io.StringIO()
    np.savetxt(buf, batch.phase, fmt="%.17g")
    _atomic_write(path, "\n".join(lines) + "\n" + buf.getvalue())


def read_samples(path) -> np.ndarray:
    arr = np.loadtxt(path, comments="#", ndmin=2)
    return arr


def _reference(target: TargetDistribution, t: float) -> TargetDistribution:
    return target if t == 0 else ou_marginal(target, t)


def task_sample(cfg: dict, seed: int, threads: int, out: Path | None) -> TaskResult:
    target = from_config(cfg["target"])
    sconf = build_sampler_config(cfg, seed)
    apply_guard(cfg, target, sconf)
    est = build_estimate(cfg, target, sconf)
    batch = samplers.run_reverse(sconf, est, _init(cfg), workers=threads)
    base = _row_base(cfg, target, sconf, est.eps)
    rows = []
    x = batch.samples
    affine = isinstance(target, Gaussian) and all(est.affine(sconf.step_time(k)) is not None
                                                  for k in range(sconf.n_steps))
    if affine:
        law = analysis.gaussian_chain_law(sconf, est, _init(cfg))
        if sconf.process == "cld":
            law = analysis.position_marginal(law, target.dim)
        dev2 = (x - x.mean(axis=0)) ** 2
        n, d = x.shape
        v = float(dev2.sum() / (d * (n - 1)))
        se = float(dev2.std(ddof=1) / math.sqrt(n * d))
        ref = float(np.trace(law.cov) / d)
        rows.append(Row(**base, metric="variance", value=v, se=se, rhs=ref, passed=abs(v - ref) <= 3 * se,
                        gate=True))
        mse = float(np.sqrt(np.sum(x.var(axis=0, ddof=1)) / n))
        mdev = float(np.linalg.norm(x.mean(axis=0) - law.mean))
        rows.append(Row(**base, metric="mean_error", value=mdev, se=mse))
    reference = _reference(target, sconf.early_stop)
    g = rngmod.stream(seed, "metrics")
    for m in cfg.get("metrics", []):
        if m == "tv":
            r = metrics.empirical_divergence("tv", x, reference, rng=g)
        elif m == "w2":
            r = metrics.empirical_divergence("w2", x, target, rng=g)
        else:
            raise ConfigError(f"metric {m!r} is not available for sampled outputs")
        rows.append(Row(**base, metric=m, value=r.value, se=r.se))
    artifacts = {}
    if out is not None:
        path = out / f"{cfg['experiment']}_samples.txt"
        write_samples(path, batch, {"process": sconf.process, "seed": seed, "T": sconf.T, "N": sconf.N,
                                    "early_stop": sconf.early_stop})
        artifacts["samples"] = path.name
        diag = out / f"{cfg['experiment']}_diagnostics.csv"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "t", "mean_score_norm"])
        for k, val in enumerate(batch.diagnostics["mean_score_norm"]):
            w.writerow([k, _fmt(sconf.step_time(k)), _fmt(float(val))])
        _atomic_write(diag, buf.getvalue())
        artifacts["diagnostics"] = diag.name
    return TaskResult(rows, artifacts)


def _stationary_reference(target, est, sconf) -> float | None:
    if est.error_model != "exact" or not isinstance(target, Gaussian):
        return None
    d = target.dim
    if not (np.allclose(target.mean, 0) and np.allclose(target.cov, np.eye(d))):
        return None
    if sconf.process == "ddpm":
        return analysis.stationary_ddpm_kl(d, sconf.h, sconf.n_steps)
    if sconf.gamma == 2.0:
        return analysis.stationary_cld_kl(d, sconf.h, sconf.n_steps)
    return None


def task_girsanov(cfg: dict, seed: int, threads: int, out: Path | None) -> TaskResult:
    target = from_config(cfg["target"])
    sconf = build_sampler_config(cfg, seed)
    apply_guard(cfg, target, sconf)
    est = build_estimate(cfg, target, sconf)
    a = cfg.get("analysis", {})
    n_paths = int(a.get("n_paths", section(cfg, "sampler").get("n_paths", 1000)))
    m = int(a.get("inner_substeps", 8))
    refine = tuple(int(r) for r in a.get("refine", []))
    res = analysis.girsanov_kl(target, est, sconf, n_paths, m, workers=threads, refine=refine)
    base = _row_base(cfg, target, sconf, est.eps)
    ref = _stationary_reference(target, est, sconf)
    rows = [Row(**base, metric="path_kl", value=res.value, se=res.se, rhs=ref,
                passed=None if ref is None else abs(res.value - ref) <= 3 * res.se, gate=ref is not None)]
    for r, val in res.refined.items():
        rows.append(Row(**base, metric=f"path_kl substeps={r}", value=val, se=res.se, rhs=res.value,
                        passed=abs(val - res.value) <= res.se, gate=True))
    return TaskResult(rows, info={"n_paths": n_paths, "inner_substeps": m})


def task_lower_bound(cfg: dict, seed: int, threads: int, out: Path | None) -> TaskResult:
    a = cfg.get("analysis", {})
    rows = []
    n_paths = int(a.get("n_paths", 500))
    for d in a.get("dims", [1, 2, 4]):
        for h in a.get("hs", [0.02, 0.05, 0.1]):
            for T in a.get("Ts", [2.0, 5.0]):
                rep = analysis.cld_lower_bound_check(int(d), float(h), float(T), n_paths, seed=seed,
                                                     inner_substeps=int(a.get("inner_substeps", 8)),
                                                     workers=threads)
                rows.append(Row(cfg["experiment"], "gaussian", "cld", int(d), float(T), rep.info["N"], float(h),
                                0.0, "cld_path_kl", rep.measured, rep.se, rep.info["threshold"], rep.passed,
                                gate=True))
    return TaskResult(rows)


def _zoo(a: dict) -> list[dict]:
    return a.get("targets", [])


def task_lemmas(cfg: dict, seed: int, threads: int, out: Path | None) -> TaskResult:
    a = cfg.get("analysis", {})
    exp = cfg["experiment"]
    n = int(a.get("n", 20_000))
    times = [float(t) for t in a.get("times", [0.05, 0.2, 0.5, 1.0, 2.0])]
    pairs = [tuple(map(float, p)) for p in a.get("pairs", [[0.0, 0.1], [0.1, 0.3], [0.5, 1.0], [1.0, 2.0]])]
    c_max = float(a.get("C_max", 10.0))
    rows = []
    fitted = {"moment": 0.0, "movement": 0.0}
    for i, spec in enumerate(_zoo(a)):
        target = from_config(spec)
        label = _label(spec)
        procs = ["ddpm"] + (["cld"] if isinstance(target, (Gaussian, GaussianMixture)) else [])
        for proc in procs:
            tgrid = [t for t in times if t > 0 or not target.singular]
            rep = analysis.verify_moment_bounds(target, proc, tgrid, n, seed=seed + i, C_max=c_max)
            for r in rep.rows:
                rows.append(Row(exp, label, proc, target.dim, metric=f"{proc}-{r.check} t={r.t!r}", value=r.value,
                                se=r.se, rhs=r.bound, passed=bool(r.passed), gate=True))
            if proc == "cld":
                fitted["moment"] = max(fitted["moment"], rep.fitted_C)
            mv = analysis.verify_movement_bounds(target, proc, pairs, n, seed=seed + i, C_max=c_max)
            for r in mv.rows:
                rows.append(Row(exp, label, proc, target.dim, metric=f"{proc}-movement s={r.s!r} t={r.t!r}",
                                value=r.value, se=r.se, rhs=r.bound, passed=bool(r.passed), gate=True))
            fitted["movement"] = max(fitted["movement"], mv.fitted_C)
    for key, val in fitted.items():
        rows.append(Row(exp, metric=f"fitted_C {key}", value=val, rhs=c_max, passed=val <= c_max, gate=True))
    p = a.get("perturbation", {})
    g = rngmod.stream(seed, "perturbation")
    worst = 0.0
    for d in p.get("dims", [1, 2]):
        for h in p.get("hs", [0.01, 0.05, 0.1]):
            M0, M1 = cld_transition(float(h)).lifted(int(d))
            for var in p.get("variances", [2.0, 4.0]):
                diag = float(var) * (1.0 + g.uniform(0.0, 1.0, 2 * int(d)))
                q = Gaussian(g.standard_normal(2 * int(d)) * 0.5, np.diag(diag))
                thetas = 2.0 * g.standard_normal((int(p.get("n_theta", 16)), 2 * int(d)))
                rep = analysis.score_perturbation_check(q, M0, M1, thetas, ratio_max=c_max)
                worst = max(worst, rep.fitted_C)
                rows.append(Row(exp, "gaussian", "cld", int(d), h=float(h),
                                metric=f"score-perturbation var={float(var)!r}", value=rep.fitted_C, rhs=c_max,
                                passed=rep.passed, gate=True))
    rows.append(Row(exp, metric="fitted_C score-perturbation", value=worst, rhs=c_max, passed=worst <= c_max,
                    gate=True))
    rows.extend(_invariant_rows(exp))
    return TaskResult(rows)


def _invariant_rows(exp: str) -> list[Row]:
    rows = []
    grid = np.geomspace(1e-4, 10.0, 25)
    ou_err = max(abs(OUTransition(t).mean_scale ** 2 + OUTransition(t).noise_var - 1.0) for t in grid)
    rows.append(Row(exp, process="ddpm", metric="ou_variance_identity", value=ou_err, rhs=1e-14,
                    passed=ou_err <= 1e-14, gate=True))
    semi, psd_min, op_ratio = 0.0, math.inf, 0.0
    for s in grid[::3]:
        for t in grid[::3]:
            lhs = cld_transition(s).M0 @ cld_transition(t).M0
            semi = max(semi, float(np.max(np.abs(lhs - cld_transition(s + t).M0))))
    for t in grid:
        M1 = cld_transition(t).M1
        psd_min = min(psd_min, float(np.linalg.eigvalsh(M1)[0] / max(np.linalg.norm(M1, 2), 1e-300)))
        if t <= 1:
            op_ratio = max(op_ratio, float(np.linalg.norm(M1, 2) / t))
    rows.append(Row(exp, process="cld", metric="cld_semigroup", value=semi, rhs=1e-12, passed=semi <= 1e-12,
                    gate=True))
    rows.append(Row(exp, process="cld", metric="cld_M1_min_eig_rel", value=abs(min(psd_min, 0.0)), rhs=1e-12,
                    passed=psd_min >= -1e-12, gate=True))
    rows.append(Row(exp, process="cld", metric="cld_M1_op_over_t", value=op_ratio, rhs=8.0, passed=op_ratio <= 8.0,
                    gate=True))
    return rows


def task_equivalence(cfg: dict, seed: int, threads: int, out: Path | None) -> TaskResult:
    a = cfg.get("analysis", {})
    exp = cfg["experiment"]
    n = int(a.get("n", 20_000))
    n_pairs = int(a.get("n_pairs", 20))
    times = [float(t) for t in a.get("times", [0.1, 0.5, 1.0, 2.0])]
    scale = float(a.get("scale", 1.0))
    rows, passes = [], []
    for i, spec in enumerate(_zoo(a)):
        target = from_config(spec)
        for j, t in enumerate(times):
            for k in range(n_pairs):
                g = rngmod.stream(seed, "equivalence", i, j, k)
                s1 = score_matching.RandomAffineScore.draw(g, target.dim, scale)
                s2 = score_matching.RandomAffineScore.draw(g, target.dim, scale)
                rep = score_matching.objective_equivalence_check(s1, s2, target, t, n, g)
                passes.append(rep.passed)
                rows.append(Row(exp, _label(spec), "ddpm", target.dim, metric=f"gap_difference t={t!r} pair={k}",
                                value=rep.difference, se=rep.se, rhs=0.0, passed=rep.passed))
    rate = float(np.mean(passes)) if passes else 0.0
    rows.append(Row(exp, metric="pass_rate", value=rate, rhs=float(a.get("min_pass_rate", 0.95)),
                    passed=rate >= float(a.get("min_pass_rate", 0.95)), gate=True))
    return TaskResult(rows, info={"checks": len(passes)})


def task_early_stop(cfg: dict, seed: int, threads: int, out: Path | None) -> TaskResult:
    target = from_config(cfg["target"])
    if target.kind not in ("sphere", "ball"):
        raise ConfigError("early-stop experiments use sphere or ball targets")
    a = cfg.get("analysis", {})
    eps_w2 = float(a.get("eps_w2", 0.1))
    s = section(cfg, "sampler")
    h = float(s["T"]) / int(s["N"])
    t_stop = samplers.early_stop_time(target.radius, target.dim, eps_w2, float(a.get("c_stop", 1.0)), h)
    cfg = json.loads(json.dumps(cfg))
    cfg.setdefault("sampler", {})["early_stop"] = t_stop
    sconf = build_sampler_config(cfg, seed)
    apply_guard(cfg, target, sconf)
    est = build_estimate(cfg, target, sconf)
    batch = samplers.run_reverse(sconf, est, _init(cfg), workers=threads)
    x = batch.samples
    base = _row_base(cfg, target, sconf, est.eps)
    g = rngmod.stream(seed, "metrics")
    tv = metrics.empirical_divergence("tv", x, ou_marginal(target, t_stop), rng=g, bins=int(a.get("bins", 64)))
    ref = target.sample(rngmod.stream(seed, "reference"), len(x))
    w2 = metrics.sliced_w2(x, ref, g, int(a.get("n_directions", 64)))
    R = target.radius
    tv_max = float(a.get("tv_max", 0.1))
    w2_budget = eps_w2 + tv.value * 2.0 * R
    bl = metrics.bl_upper(tv, w2)
    n_rule = analysis.theorem_bound_rhs("compact-N", d=target.dim, R=R, eps_tv=tv_max, eps_w2=eps_w2).total
    rows = [
        Row(**base, metric="t_stop", value=t_stop),
        Row(**base, metric="tv_to_q_tstop", value=tv.value, se=tv.se, rhs=tv_max, passed=tv.value <= tv_max,
            gate=True),
        Row(**base, metric="sliced_w2_to_q", value=w2.value, se=w2.se, rhs=w2_budget, passed=w2.value <= w2_budget,
            gate=True),
        Row(**base, metric="bl_upper", value=bl.value, se=bl.se),
        Row(**base, metric="compact_N_rule", value=n_rule),
    ]
    return TaskResult(rows, info={"t_stop": t_stop, "tv_note": tv.note})


def task_score_train(cfg: dict, seed: int, threads: int, out: Path | None) -> TaskResult:
    target = from_config(cfg["target"])
    a = cfg.get("analysis", {})
    times = [float(t) for t in a.get("times", [0.1, 0.5, 1.0])]
    model = score_matching.fit_dsm(a.get("class", "affine"), target, times, int(a.get("n", 10_000)), seed,
                                   ridge=float(a.get("ridge", 1e-8)), n_features=int(a.get("n_features", 128)),
                                   bandwidth=float(a.get("bandwidth", 1.0)), workers=threads)
    est = score_oracle.trained_score(model, "ddpm", target)
    rows = []
    for i, t in enumerate(times):
        val, se = score_oracle.measure_l2_error(est, target, t, int(a.get("n_eval", 20_000)),
                                                rngmod.stream(seed, "l2", i))
        rows.append(Row(cfg["experiment"], _label(cfg["target"]), "ddpm", target.dim, metric=f"l2_error t={t!r}",
                        value=val, se=se))
    artifacts = {}
    if out is not None:
        path = out / f"{cfg['experiment']}_model.txt"
        model.save(path)
        artifacts["model"] = path.name
    return TaskResult(rows, artifacts)


TASKS = {
    "chain": task_chain,
    "sample": task_sample,
    "girsanov": task_girsanov,
    "lower-bound": task_lower_bound,
    "lemmas": task_lemmas,
    "equivalence": task_equivalence,
    "early-stop": task_early_stop,
    "score-train": task_score_train,
}


# ---------------------------------------------------------------------------
# Output


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def rows_to_csv(rows: list[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_task(cfg: dict, *, seed: int | None = None, threads: int = 1, out: Path | None = None) -> TaskResult:
    seed = cfg.get("seed", 0) if seed is None else seed
    return TASKS[cfg["task"]](cfg, seed, threads, out)


def run_config(cfg: dict, out: Path, *, seed: int | None = None, threads: int = 1) -> tuple[int, TaskResult | None]:
    """Run one config; write ``<experiment>.csv`` and ``<experiment>.json``.

    Returns ``(exit_code, result)``: 0 when every gated check passes, 1 otherwise.
    """
    out = Path(out)
    start = time.perf_counter()
    summary = {"experiment": cfg["experiment"], "task": cfg["task"], "config": json.loads(canonical(cfg))}
    try:
        result = run_task(cfg, seed=seed, threads=threads, out=out)
    except (UsageError, ConfigError):
        raise
    except Exception as exc:  # runtime failure: flag the run as incomplete
        summary.update(complete=False, error=f"{type(exc).__name__}: {exc}", runtime_s=time.perf_counter() - start)
        _atomic_write(out / f"{cfg['experiment']}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return 1, None
    _atomic_write(out / f"{cfg['experiment']}.csv", rows_to_csv(result.rows))
    failed = [r.metric for r in result.rows if r.gate and not r.passed]
    summary.update(complete=True, passed=not failed, failed=failed, n_rows=len(result.rows),
                   artifacts=result.artifacts, info=_jsonable(result.info), runtime_s=time.perf_counter() - start)
    _atomic_write(out / f"{cfg['experiment']}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return (0 if not failed else 1), result


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


# ---------------------------------------------------------------------------
# Sweeps


@dataclass
class SlopeFit:
    axis: str
    metric: str
    group: str
    n_points: int
    slope: float
    intercept: float
    r2: float
    lo: float | None
    hi: float | None

    @property
    def passed(self) -> bool | None:
        if self.lo is None or self.hi is None:
            return None
        return self.lo <= self.slope <= self.hi


@dataclass
class SweepReport:
    rows: list
    fits: list
    fitted_constant: float | None
    point_runtimes: list
    total_runtime: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows if r.gate) and all(f.passed is not False for f in self.fits)


def _axis_value(coords: dict, row: Row, axis: str) -> float:
    if axis == "sampler.h":
        return float(row.h)
    return float(coords[axis])


def fit_slope(x, y) -> tuple[float, float, float]:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 4:
        raise UsageError(f"slope fits need at least 4 points, got {len(x)}")
    lx, ly = np.log(x), np.log(y)
    if np.ptp(lx) == 0 or np.ptp(ly) == 0:
        raise UsageError("degenerate slope fit (no variation)")
    res = sps.linregress(lx, ly)
    return float(res.slope), float(res.intercept), float(res.rvalue**2)


def sweep_and_fit(cfg: dict, *, seed: int | None = None, threads: int = 1) -> SweepReport:
    """Run every grid point of ``cfg['sweep']`` and fit the declared log-log slopes.

    Fits use only points where both the axis value and the metric are positive.
    With two axes, each fit is done separately for every value of the other axis.
    """
    if "sweep" not in cfg:
        raise ConfigError("config has no 'sweep' section")
    points = list(grid_points(cfg))
    exp = cfg["experiment"]

    def run_point(item):
        i, (coords, point) = item
        tag = ",".join(f"{k}={v!r}" for k, v in coords.items())
        point["experiment"] = f"{exp}[{tag}]"
        t0 = time.perf_counter()
        res = run_task(point, seed=seed, threads=1, out=None)
        return coords, res, time.perf_counter() - t0

    start = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_point, enumerate(points)))
    else:
        results = [run_point(item) for item in enumerate(points)]
    total = time.perf_counter() - start
    rows = [r for _, res, _ in results for r in res.rows]
    axes = [a["path"] for a in cfg["sweep"]["axes"]]
    fits = []
    for spec in cfg["sweep"].get("fits", []):
        axis, metric = spec["axis"], spec.get("metric", "tv")
        others = [a for a in axes if a != axis]
        groups: dict[str, list] = {}
        for coords, res, _ in results:
            key = ",".join(f"{o}={coords[o]!r}" for o in others)
            for r in res.rows:
                if r.metric == metric and r.value is not None:
                    groups.setdefault(key, []).append((_axis_value(coords, r, axis), r.value))
        rng_ = spec.get("range", [None, None])
        for key, pts in groups.items():
            pts = [(x, y) for x, y in pts if x > 0 and y > 0]
            slope, icpt, r2 = fit_slope([p[0] for p in pts], [p[1] for p in pts])
            fits.append(SlopeFit(axis, metric, key, len(pts), slope, icpt, r2, rng_[0], rng_[1]))
    ratios = [r.value / r.rhs for r in rows if r.gate and r.rhs and r.value is not None and r.rhs > 0]
    fitted = max(ratios) if ratios else None
    return SweepReport(rows, fits, fitted, [rt for _, _, rt in results], total)


def fits_to_csv(exp: str, fits: list[SlopeFit]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIT_COLUMNS)
    for f in fits:
        w.writerow([_fmt(v) for v in (exp, f.axis, f.metric, f.group, f.n_points, f.slope, f.intercept, f.r2,
                                      f.lo, f.hi, f.passed)])
    return buf.getvalue()


def run_sweep(cfg: dict, out: Path, *, seed: int | None = None, threads: int = 1) -> tuple[int, SweepReport]:
    out = Path(out)
    rep = sweep_and_fit(cfg, seed=seed, threads=threads)
    exp = cfg["experiment"]
    _atomic_write(out / f"{exp}.csv", rows_to_csv(rep.rows))
    _atomic_write(out / f"{exp}_fits.csv", fits_to_csv(exp, rep.fits))
    summary = {"experiment": exp, "task": cfg["task"], "config": json.loads(canonical(cfg)), "complete": True,
               "passed": rep.passed, "fitted_constant": rep.fitted_constant, "n_points": len(rep.point_runtimes),
               "point_runtimes_s": rep.point_runtimes, "total_runtime_s": rep.total_runtime,
               "fits": [{"axis": f.axis, "metric": f.metric, "group": f.group, "slope": f.slope, "r2": f.r2,
                         "passed": f.passed} for f in rep.fits]}
    _atomic_write(out / f"{exp}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return (0 if rep.passed else 1), rep
