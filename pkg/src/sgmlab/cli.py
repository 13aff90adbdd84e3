"""Command-line entry point ``sgmlab``.

Exit codes: 0 when every gated check passes, 1 when a gated check fails or a
run aborts, 2 for usage or config errors (no outputs are written).
Precedence for seed, threads, output dir and quiet: flag > environment > config.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics, runner
from . import rng as rngmod
from ._validation import ConfigError, UsageError
from .config import env_overrides, load_config, shipped_config
from .targets import from_config as target_from_config

SUBCOMMAND_TASKS = {
    "sample": ("sample",),
    "score-train": ("score-train",),
    "girsanov-kl": ("girsanov",),
    "lower-bound": ("lower-bound",),
    "verify-bounds": ("chain", "lemmas", "equivalence", "early-stop", "sample"),
    "run": None,
}


def _resolve_config(ref: str) -> dict:
    if ref.lstrip().startswith("{"):
        return load_config(ref)
    path = Path(ref)
    return load_config(path if path.exists() else shipped_config(ref))


def _settings(args, cfg: dict | None) -> dict:
    env = env_overrides()
    out = {"seed": (cfg or {}).get("seed", 0), "threads": 1, "out": "results", "quiet": False}
    out.update(env)
    for key in ("seed", "threads", "out"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    if getattr(args, "quiet", False):
        out["quiet"] = True
    if out["threads"] < 1:
        raise UsageError("threads must be >= 1")
    return out


def _say(settings: dict, msg: str) -> None:
    if not settings["quiet"]:
        print(msg)


def _report(settings, rows) -> None:
    for r in rows:
        if r.gate:
            _say(settings, f"{'PASS' if r.passed else 'FAIL'} {r.experiment_id} {r.metric} "
                           f"value={r.value:.6g} rhs={r.rhs if r.rhs is None else format(r.rhs, '.6g')}")


def cmd_config_task(args) -> int:
    cfg = _resolve_config(args.config)
    allowed = SUBCOMMAND_TASKS[args.command]
    if allowed is not None and cfg["task"] not in allowed:
        raise UsageError(f"'{args.command}' does not run task {cfg['task']!r}")
    settings = _settings(args, cfg)
    if "sweep" in cfg:
        code, rep = runner.run_sweep(cfg, Path(settings["out"]), seed=settings["seed"], threads=settings["threads"])
        _report(settings, rep.rows)
        for f in rep.fits:
            _say(settings, f"FIT {f.axis} [{f.group}] slope={f.slope:.4f} r2={f.r2:.4f} pass={f.passed}")
        return code
    code, res = runner.run_config(cfg, Path(settings["out"]), seed=settings["seed"], threads=settings["threads"])
    if res is None:
        print(f"run aborted; see {settings['out']}/{cfg['experiment']}.json", file=sys.stderr)
    else:
        _report(settings, res.rows)
    return code


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args.config)
    if "sweep" not in cfg:
        raise UsageError("config has no 'sweep' section")
    return cmd_config_task(argparse.Namespace(**{**vars(args), "command": "run"}))


def cmd_metrics(args) -> int:
    settings = _settings(args, None)
    x = runner.read_samples(args.samples)
    if args.columns is not None:
        x = x[:, : args.columns]
    if args.reference_samples:
        ref = runner.read_samples(args.reference_samples)[:, : x.shape[1]]
    else:
        ref = target_from_config(json.loads(args.target))
    g = rngmod.stream(settings["seed"], "metrics")
    out = {}
    for kind in args.kind:
        r = metrics.empirical_divergence(kind, x, ref, rng=g)
        out[kind] = {"value": r.value, "se": r.se, "method": r.method}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in runner.read_csv(args.csv) if r["metric"] == args.metric and r[args.x] and r["value"]]
    if not rows:
        raise UsageError(f"no rows with metric {args.metric!r} and column {args.x!r}")
    x = np.array([float(r[args.x]) for r in rows])
    y = np.array([float(r["value"]) for r in rows])
    fig, ax = plt.subplots(figsize=(5, 4))
    order = np.argsort(x)
    ax.plot(x[order], y[order], "o-", label=args.metric)
    if any(r["rhs"] for r in rows):
        rhs = np.array([float(r["rhs"]) if r["rhs"] else np.nan for r in rows])
        ax.plot(x[order], rhs[order], "s--", label="rhs")
    if args.loglog:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(args.x)
    ax.set_ylabel(args.metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.output, format="svg", metadata={"Date": None})
    plt.close(fig)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="sgmlab", description="Diffusion sampler experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run any config"), ("sample", "draw reverse-sampler outputs"),
                           ("score-train", "fit a score model by denoising score matching"),
                           ("girsanov-kl", "estimate the path-space KL"),
                           ("lower-bound", "CLD lower-bound grid"),
                           ("verify-bounds", "bound and lemma checks"),
                           ("sweep", "run a parameter sweep and fit slopes")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--config", required=True, help="config path, JSON text or shipped config name")
        sp.set_defaults(func=cmd_sweep if name == "sweep" else cmd_config_task)
    sp = sub.add_parser("metrics", parents=[common], help="divergences between a sample file and a reference")
    sp.add_argument("samples")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--target", help="target spec as JSON")
    src.add_argument("--reference-samples")
    sp.add_argument("--kind", nargs="+", default=["w2"], choices=["tv", "w2"])
    sp.add_argument("--columns", type=int, default=None, help="use only the first k columns")
    sp.set_defaults(func=cmd_metrics)
    sp = sub.add_parser("plot", help="SVG plot of one metric from a results CSV")
    sp.add_argument("csv")
    sp.add_argument("--metric", default="tv")
    sp.add_argument("--x", default="h")
    sp.add_argument("--loglog", action="store_true")
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"sgmlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
