"""Experiment configuration: JSON files with a versioned schema.

Configs are canonicalized as ``json.dumps(..., indent=2, sort_keys=True)``
plus a trailing newline, so loading and dumping a canonical file reproduces
it byte for byte.
"""

from __future__ import annotations

import copy
import itertools
import json
import os
from pathlib import Path

from ._validation import ConfigError

SCHEMA = "sgmlab/1"
ENV_PREFIX = "SGMLAB_"

TASKS = ("chain", "sample", "girsanov", "lower-bound", "lemmas", "equivalence", "early-stop", "score-train")
NEEDS_TARGET = ("chain", "sample", "girsanov", "early-stop", "score-train")

SAMPLER_DEFAULTS = {
    "process": "ddpm",
    "T": 10.0,
    "N": 100,
    "early_stop": 0.0,
    "n_samples": 1000,
    "gamma": 2.0,
    "init": "gaussian",
    "guard": "auto",
    "guard_constant": 1.0,
}
SCORE_DEFAULTS = {"error_model": "exact", "eps": 0.0, "seed": 0}
BOUND_DEFAULTS = {"constant": 1.0, "c": 1.0}

# virtual parameter paths accepted by sweeps
VIRTUAL_PATHS = {"sampler.h"}


def canonical(data: dict) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def load_config(source) -> dict:
    """Parse and validate a config from a path, JSON text or mapping."""
    if isinstance(source, dict):
        data = copy.deepcopy(source)
    else:
        text = Path(source).read_text() if not str(source).lstrip().startswith("{") else str(source)
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    validate(data)
    return data


def dump_config(data: dict, path=None) -> str:
    text = canonical(data)
    if path is not None:
        Path(path).write_text(text)
    return text


def validate(data: dict) -> None:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if data.get("schema") != SCHEMA:
        raise ConfigError(f"config schema must be {SCHEMA!r}, got {data.get('schema')!r}")
    for key in ("experiment", "task"):
        if not isinstance(data.get(key), str) or not data[key]:
            raise ConfigError(f"config needs a nonempty string '{key}'")
    if data["task"] not in TASKS:
        raise ConfigError(f"unknown task {data['task']!r}; expected one of {', '.join(TASKS)}")
    if data["task"] in NEEDS_TARGET and not isinstance(data.get("target"), dict):
        raise ConfigError(f"task {data['task']!r} needs a 'target' object")
    for section in ("sampler", "score", "analysis", "bound"):
        if section in data and not isinstance(data[section], dict):
            raise ConfigError(f"'{section}' must be an object")
    sampler = data.get("sampler", {})
    unknown = set(sampler) - set(SAMPLER_DEFAULTS) - {"n_paths"}
    if unknown:
        raise ConfigError(f"unknown sampler fields: {sorted(unknown)}")
    if not isinstance(data.get("seed", 0), int):
        raise ConfigError("'seed' must be an integer")
    if "metrics" in data and not (isinstance(data["metrics"], list) and all(isinstance(m, str) for m in data["metrics"])):
        raise ConfigError("'metrics' must be a list of names")
    if "sweep" in data:
        _validate_sweep(data)


def _validate_sweep(data: dict) -> None:
    sweep = data["sweep"]
    axes = sweep.get("axes") if isinstance(sweep, dict) else None
    if not isinstance(axes, list) or not 1 <= len(axes) <= 2:
        raise ConfigError("sweep needs one or two axes")
    for ax in axes:
        if not isinstance(ax, dict) or "path" not in ax or "values" not in ax:
            raise ConfigError("each sweep axis needs 'path' and 'values'")
        if not isinstance(ax["values"], list) or not ax["values"]:
            raise ConfigError(f"sweep axis {ax['path']!r} has no values")
        if ax["path"] not in VIRTUAL_PATHS:
            try:
                get_path(data, ax["path"])
            except KeyError:
                raise ConfigError(f"sweep axis {ax['path']!r} does not name an existing parameter") from None
    if len(list(grid_points(data))) < 2:
        raise ConfigError("a sweep needs at least two grid points")
    for fit in sweep.get("fits", []):
        if fit.get("axis") not in [a["path"] for a in axes]:
            raise ConfigError(f"fit axis {fit.get('axis')!r} is not a sweep axis")


def get_path(data: dict, path: str):
    node = data
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(path)
        node = node[part]
    return node


def set_path(data: dict, path: str, value) -> None:
    if path == "sampler.h":
        sampler = data.setdefault("sampler", {})
        T = float(sampler.get("T", SAMPLER_DEFAULTS["T"]))
        n = round(T / float(value))
        if n < 1 or abs(n * float(value) - T) > 1e-9 * T:
            raise ConfigError(f"h={value} does not divide T={T}")
        sampler["N"] = n
        return
    parts = path.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def grid_points(data: dict):
    """Yield ``(coords, point_config)`` for every sweep grid point in axis order."""
    axes = data["sweep"]["axes"]
    for combo in itertools.product(*[ax["values"] for ax in axes]):
        point = copy.deepcopy(data)
        point.pop("sweep")
        coords = {}
        for ax, value in zip(axes, combo):
            set_path(point, ax["path"], value)
            coords[ax["path"]] = value
        yield coords, point


def section(data: dict, name: str) -> dict:
    defaults = {"sampler": SAMPLER_DEFAULTS, "score": SCORE_DEFAULTS, "bound": BOUND_DEFAULTS}.get(name, {})
    out = dict(defaults)
    out.update(data.get(name, {}))
    return out


def env_overrides(environ=None) -> dict:
    """Read ``SGMLAB_SEED``, ``SGMLAB_THREADS``, ``SGMLAB_OUT`` and ``SGMLAB_QUIET``."""
    environ = os.environ if environ is None else environ
    out = {}
    for key, conv in (("SEED", int), ("THREADS", int), ("OUT", str), ("QUIET", lambda v: v not in ("", "0"))):
        raw = environ.get(ENV_PREFIX + key)
        if raw is not None:
            try:
                out[key.lower()] = conv(raw)
            except ValueError:
                raise ConfigError(f"bad value for {ENV_PREFIX}{key}: {raw!r}") from None
    return out


def shipped_config_dir() -> Path:
    return Path(__file__).with_name("configs")


def shipped_config(name: str) -> Path:
    path = shipped_config_dir() / (name if name.endswith(".cfg") else name + ".cfg")
    if not path.exists():
        raise ConfigError(f"no shipped config named {name!r}")
    return path
