"""TOML experiment configuration: loading, overrides, validation and hashing.

The schema is documented in ``docs/config.md``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..mixtures import GaussianMixture
from ..rewards import reward_from_dict
from ..sde import NoiseSchedule, TimeGrid

METHODS = ("best_of_n", "code", "db_kla", "db_mpa", "morl_oracle", "pretrained", "rgg", "rs_learned")
OUT_DIR_ENV = "DIFFBLEND_OUT_DIR"

DEFAULTS: dict = {
    "alpha": 1.0,
    "run": {"seeds": [0, 1, 2], "samples": 50_000, "steps": 1000, "grid": "uniform", "workers": 1},
    "schedule": {"beta_min": 0.1, "beta_max": 20.0, "T": 1.0},
    "pareto": {"w": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], "methods": ["db_mpa", "morl_oracle"],
               "late_blend_t": None},
    "kla": {"lambdas": [0.0, 0.5, 1.0, 1.5, 2.0], "lambda_max": 4.0, "reward": 0},
    "jensen": {"xs": [-2.0, -1.0, 0.0, 1.0, 2.0], "ts": [0.5, 0.25, 0.1, 0.05, 0.01], "num_draws": 4096,
               "slack": 3.0, "reward": 0},
    "sample": {"method": "pretrained", "w": None, "lam": 1.0},
    "fit": {"target": "tilted", "reward": 0, "family": "polynomial", "degree": 1, "n_centers": 12,
            "epochs": 16, "time_bins": 32, "weighting": "1-abar", "num_samples": None},
    "methods": {
        "rgg": {"gamma": 0.024, "normalize": True, "reference_steps": 50, "reverse_index": False},
        "code": {"particles": 20, "block": 5, "reference_steps": 50, "samples": None},
        "best_of_n": {"n": 16, "samples": None},
        "rs_learned": {"family": "rbf", "epochs": 8, "num_samples": 20_000, "n_centers": 12, "degree": 1,
                       "time_bins": 32, "weighting": "1-abar"},
    },
}


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    """Apply ``dotted.key=value``; the value is parsed as a TOML literal when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, text = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {item!r} has an empty key")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {p!r} is not a table")
    node[parts[-1]] = _parse_value(text.strip())


def load_config(path, overrides: Optional[list[str]] = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    cfg = _merge(DEFAULTS, raw)
    cfg["_base_dir"] = str(path.resolve().parent)
    for item in overrides or []:
        apply_override(cfg, item)
    return cfg


@dataclass(frozen=True)
class Experiment:
    """Validated, materialized configuration."""

    cfg: dict
    prior: GaussianMixture
    rewards: tuple
    alpha: float
    schedule: NoiseSchedule
    grid: TimeGrid

    @property
    def run(self) -> dict:
        return self.cfg["run"]

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.run["seeds"]]

    @property
    def samples(self) -> int:
        return int(self.run["samples"])

    @property
    def dim(self) -> int:
        return self.prior.dim

    def section(self, name: str) -> dict:
        return self.cfg[name]

    def config_hash(self) -> str:
        return config_hash(self.cfg)


def canonical(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(canonical(cfg), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _load_ref(spec: dict, base_dir: str) -> dict:
    if "file" in spec:
        p = Path(spec["file"])
        p = p if p.is_absolute() else Path(base_dir) / p
        if not p.is_file():
            raise ConfigError(f"referenced file not found: {p}")
        return {**json.loads(p.read_text()), **{k: v for k, v in spec.items() if k != "file"}}
    return spec


def _positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return value


def build(cfg: dict) -> Experiment:
    """Validate a merged config dict and build the models it describes."""
    base_dir = cfg.get("_base_dir", ".")
    alpha = cfg.get("alpha")
    if not isinstance(alpha, (int, float)) or isinstance(alpha, bool) or not math.isfinite(alpha) or alpha <= 0:
        raise ConfigError(
            f"alpha must be > 0 (the KL-regularized alignment objective E[r] - alpha KL needs a "
            f"positive regularization weight), got alpha={alpha!r}")
    run = cfg["run"]
    seeds = run.get("seeds")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError(f"run.seeds must be a nonempty list of nonnegative integers, got {seeds!r}")
    _positive_int(run.get("samples"), "run.samples")
    _positive_int(run.get("steps"), "run.steps")
    _positive_int(run.get("workers"), "run.workers")
    if "prior" not in cfg:
        raise ConfigError("config has no [prior] table")
    try:
        prior = GaussianMixture.from_dict(_load_ref(cfg["prior"], base_dir))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid prior: {exc}") from exc
    rewards = []
    for i, spec in enumerate(cfg.get("rewards", [])):
        try:
            r = reward_from_dict(_load_ref(spec, base_dir))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid reward #{i}: {exc}") from exc
        if r.dim != prior.dim:
            raise ConfigError(f"reward #{i} has dimension {r.dim} but the prior has dimension {prior.dim}")
        rewards.append(r)
    if not rewards:
        raise ConfigError("config needs at least one [[rewards]] entry")
    try:
        schedule = NoiseSchedule(**cfg["schedule"])
        steps = run["steps"]
        if run.get("grid", "uniform") == "uniform":
            grid = TimeGrid.uniform(steps, schedule.T)
        elif run["grid"] == "geometric":
            grid = TimeGrid.geometric(steps, schedule.T)
        else:
            raise ConfigError(f"run.grid must be 'uniform' or 'geometric', got {run['grid']!r}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for w in cfg["pareto"]["w"]:
        if not (isinstance(w, (int, float)) and 0.0 <= w <= 1.0):
            raise ConfigError(f"pareto.w entries must lie in [0, 1] (two-reward simplex), got {w!r}")
    unknown = sorted(set(cfg["pareto"]["methods"]) - set(METHODS))
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; known: {list(METHODS)}")
    lam_max = cfg["kla"]["lambda_max"]
    for lam in cfg["kla"]["lambdas"]:
        if not (isinstance(lam, (int, float)) and 0.0 <= lam <= lam_max):
            raise ConfigError(f"kla.lambdas entries must lie in [0, {lam_max}] (raise kla.lambda_max to extrapolate further), got {lam!r}")
    for sec in ("kla", "jensen", "fit"):
        idx = cfg[sec]["reward"]
        if not (isinstance(idx, int) and 0 <= idx < len(rewards)):
            raise ConfigError(f"{sec}.reward={idx!r} is not a valid reward index")
    return Experiment(cfg, prior, tuple(rewards), float(alpha), schedule, grid)


def apply_cli(cfg: dict, seed=None, steps=None, samples=None) -> dict:
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["run"]["seeds"] = [int(seed)]
    if steps is not None:
        cfg["run"]["steps"] = int(steps)
    if samples is not None:
        cfg["run"]["samples"] = int(samples)
    return cfg


def default_out_dir(subcommand: str, cfg: dict) -> Path:
    if cfg.get("run", {}).get("out_dir"):
        return Path(cfg["run"]["out_dir"])
    root = os.environ.get(OUT_DIR_ENV, "runs")
    return Path(root) / subcommand
