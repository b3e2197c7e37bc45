"""Experiment runners: Pareto sweep, lambda sweep, gap report, sampling, fitting, validation.

Every runner writes deterministic CSV/JSON outputs into ``out_dir`` and returns
a :class:`RunRecord`. Randomness comes from ``RandomSource(seed)`` with the
same seed shared by all methods, so method comparisons use common random numbers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .. import __version__
from ..baselines import CodeConfig, RggConfig, best_of_n, code_sample, morl_oracle, rgg_drift, tweedie_denoise
from ..blend import db_kla, db_mpa, late_blend
from ..jensen import GapReport, fraction_satisfied, reports_to_csv, verify_bound
from ..metrics import (GridDensity, StepwiseKL, covering_box, expected_reward, fokker_planck_density,
                       wasserstein1_1d)
from ..mixtures import (control_exact, exact_finetuned_drift, marginal_at, posterior_mean, pretrained_drift, tilt)
from ..rewards import scalarize
from ..score_fit import ScoreModel, TrainConfig, average_params, dsm_train, score_mse
from ..sde import RandomSource, SampleBatch, euler_maruyama_reverse
from .config import ConfigError, Experiment

FP_SPACING = 0.02


@dataclass
class RunRecord:
    command: str
    config_hash: str
    version: str = __version__
    rows: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "command": self.command,
            "config_hash": self.config_hash,
            "version": self.version,
            "settings": self.settings,
            "wall_clock_seconds": {k: round(v, 3) for k, v in sorted(self.wall_clock.items())},
            "warnings": self.warnings,
            "outputs": self.outputs,
            "n_rows": len(self.rows),
        }, indent=2, sort_keys=True, default=str)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.10g}"
    return str(v)


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    path.write_text(buf.getvalue())
    return path


def _finish(record: RunRecord, out_dir: Path) -> RunRecord:
    record.outputs["run.json"] = str(out_dir / "run.json")
    (out_dir / "run.json").write_text(record.to_json() + "\n")
    return record


def _settings(exp: Experiment) -> dict:
    return {"seeds": exp.seeds, "samples": exp.samples, "steps": exp.grid.num_steps,
            "grid": exp.run.get("grid", "uniform"), "schedule": exp.cfg["schedule"], "alpha": exp.alpha}


def sample_drift(exp: Experiment, drift, seed: int, n: Optional[int] = None, on_step=None) -> SampleBatch:
    return euler_maruyama_reverse(drift, exp.schedule, exp.grid, RandomSource(seed), n or exp.samples,
                                  exp.dim, on_step=on_step)


def fp_density(exp: Experiment, drift) -> GridDensity:
    """Terminal density of a 1-D drift; the grid is widened until it holds the mass."""
    lo, hi = covering_box(exp.prior, width=10.0)
    lo, hi = min(float(lo[0]), -10.0), max(float(hi[0]), 10.0)
    for _ in range(4):
        n = int(math.ceil((hi - lo) / FP_SPACING)) + 1
        dens = fokker_planck_density(drift, exp.schedule, exp.grid, np.linspace(lo, hi, n))
        if abs(dens.mass() - 1.0) < 1e-4 and dens.p[0] < 1e-8 and dens.p[-1] < 1e-8:
            return dens
        mid, half = 0.5 * (lo + hi), hi - lo
        lo, hi = mid - half, mid + half
    return dens


def _kl_for(exp: Experiment, drift, stepwise: float) -> tuple[float, str]:
    """KL of the method's terminal law to the prior: Fokker-Planck in 1-D, else the stepwise bound."""
    if drift is not None and exp.dim == 1:
        dens = fp_density(exp, drift)
        if abs(dens.mass() - 1.0) < 1e-3:
            return dens.kl_to(exp.prior), "fokker_planck"
    if not math.isnan(stepwise):
        return stepwise, "stepwise"
    return float("nan"), "none"


# -- Pareto sweep --------------------------------------------------------------

PARETO_COLUMNS = ["method", "w", "r1_mean", "r1_se", "r2_mean", "r2_se", "kl", "objective", "objective_se",
                  "seed", "n_samples", "kl_method", "stepwise_kl", "status"]
SUMMARY_COLUMNS = ["method", "w", "r1_mean", "r1_se", "r2_mean", "r2_se", "kl", "objective", "objective_se",
                   "n_seeds", "n_samples"]


def pool(rows: list[dict], keys: tuple, values: tuple) -> list[dict]:
    """Combine per-seed rows: mean of means, ``sqrt(sum se^2) / k`` for standard errors."""
    groups = defaultdict(list)
    for r in rows:
        if r.get("status", "ok") == "ok":
            groups[tuple(r[k] for k in keys)].append(r)
    out = []
    for key, rs in sorted(groups.items(), key=lambda kv: tuple(str(v) if isinstance(v, str) else v for v in kv[0])):
        row = dict(zip(keys, key))
        k = len(rs)
        for v in values:
            if v.endswith("_se"):
                row[v] = math.sqrt(sum(r[v] ** 2 for r in rs)) / k
            else:
                row[v] = sum(r[v] for r in rs) / k
        row["n_seeds"] = k
        row["n_samples"] = sum(r.get("n_samples", 0) for r in rs)
        out.append(row)
    return out


class _Timer:
    def __init__(self):
        self.totals = defaultdict(float)

    def run(self, key, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.totals[key] += time.perf_counter() - t0


def _code_config(o: dict) -> CodeConfig:
    ref = o.get("reference_steps", 50)
    return CodeConfig(int(o["particles"]), int(o["block"]), None if ref in (None, 0) else int(ref))


def _rgg_config(o: dict, alpha: float) -> RggConfig:
    return RggConfig(gamma=float(o["gamma"]), normalize=bool(o["normalize"]), alpha=alpha,
                     reference_steps=int(o["reference_steps"]), reverse_index=bool(o["reverse_index"]))


def _fit_learned(exp: Experiment, r, seed: int, idx: int) -> ScoreModel:
    opts = exp.cfg["methods"]["rs_learned"]
    tilted = tilt(exp.prior, r, exp.alpha).tilted
    n = int(opts.get("num_samples") or exp.samples)
    rng = RandomSource(seed, stream=100 + idx)
    data = SampleBatch(tilted.sample(n, rng.generator(RandomSource.AUX)))
    cfg = TrainConfig(family=opts["family"], epochs=int(opts["epochs"]), n_centers=int(opts["n_centers"]),
                      degree=int(opts["degree"]), time_bins=int(opts["time_bins"]), weighting=opts["weighting"])
    return dsm_train(data, exp.schedule, cfg, rng.child(1))


def run_pareto(exp: Experiment, out_dir, plots: bool = True, log: Callable[[str], None] = lambda s: None) -> RunRecord:
    if len(exp.rewards) != 2:
        raise ConfigError(f"the Pareto sweep needs exactly two rewards, got {len(exp.rewards)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sec = exp.section("pareto")
    methods = sorted(set(sec["methods"]))
    if "db_kla" in methods:
        raise ConfigError("db_kla belongs to the kla sweep, not the Pareto sweep")
    ws = sorted(float(w) for w in sec["w"])
    basis = list(exp.rewards)
    record = RunRecord("pareto", exp.config_hash(), settings={**_settings(exp), "methods": methods, "w": ws})
    timer = _Timer()
    pre = pretrained_drift(exp.prior, exp.schedule)
    fts = [exact_finetuned_drift(exp.prior, r, exp.alpha, exp.schedule) for r in basis]
    stepwise_on = bool(exp.run.get("stepwise_kl", False)) or exp.dim > 1
    mopts = exp.cfg["methods"]
    learned = {}
    if "rs_learned" in methods:
        for seed in exp.seeds:
            learned[seed] = [timer.run("rs_learned", _fit_learned, exp, r, seed, i) for i, r in enumerate(basis)]
            for m in learned[seed]:
                record.warnings.extend(f"rs_learned seed {seed}: {msg}" for msg in m.warnings)
    kl_cache: dict = {}
    kl_lock = threading.Lock()
    rgg_warnings: list = []

    def build(method, w):
        wv = [w, 1.0 - w]
        if method == "pretrained":
            return pre
        if method == "morl_oracle":
            return morl_oracle(exp.prior, basis, wv, exp.alpha, 1.0, exp.schedule)
        if method == "db_mpa":
            d = db_mpa(fts, wv)
            t_late = sec.get("late_blend_t")
            return late_blend(d, pre, float(t_late)) if t_late is not None else d
        if method == "rgg":
            cfg = _rgg_config(mopts["rgg"], exp.alpha)
            return rgg_drift(pre, basis, wv, cfg, exp.schedule, exp.grid, rgg_warnings)
        return None

    def task(method, w, seed):
        wv = [w, 1.0 - w]
        rw = scalarize(basis, wv)
        row = {"method": method, "w": w, "seed": seed}
        try:
            stepwise = float("nan")
            if method == "rs_learned":
                drift = average_params(learned[seed], wv).as_drift(exp.schedule)
            else:
                drift = build(method, w)
            if method == "code":
                o = mopts["code"]
                n = int(o.get("samples") or exp.samples)
                x = code_sample(pre, rw, _code_config(o), exp.schedule,
                                exp.grid, RandomSource(seed), n).samples
            elif method == "best_of_n":
                o = mopts["best_of_n"]
                n = int(o.get("samples") or exp.samples)
                x = best_of_n(pre, rw, int(o["n"]), exp.schedule, exp.grid, RandomSource(seed), batch=n)
            else:
                hook = StepwiseKL(pre, exp.schedule, exp.grid) if stepwise_on else None
                x = sample_drift(exp, drift, seed, on_step=hook).samples
                stepwise = hook.mean() if hook else float("nan")
            if method in ("code", "best_of_n"):
                kl, kl_method = float("nan"), "none"
            elif method == "rs_learned" or stepwise_on:
                kl, kl_method = _kl_for(exp, drift, stepwise)
            else:
                # seed-independent drift: one deterministic density per (method, w)
                with kl_lock:
                    if (method, w) not in kl_cache:
                        kl_cache[(method, w)] = timer.run(method, _kl_for, exp, drift, stepwise)
                kl, kl_method = kl_cache[(method, w)]
            e1, e2 = expected_reward(x, basis[0]), expected_reward(x, basis[1])
            er = expected_reward(x, rw)
            row.update(r1_mean=e1.mean, r1_se=e1.stderr, r2_mean=e2.mean, r2_se=e2.stderr, kl=kl,
                       objective=er.mean - exp.alpha * kl, objective_se=er.stderr, n_samples=x.shape[0],
                       kl_method=kl_method, stepwise_kl=stepwise, status="ok")
        except Exception as exc:  # recorded per row; the sweep continues
            row.update(status=f"error: {type(exc).__name__}: {exc}")
            record.warnings.append(f"{method} w={w} seed={seed}: {exc}")
        return row

    tasks = [(m, w, s) for m in methods for w in ws for s in exp.seeds]
    if "pretrained" in methods:
        cache_pre: dict = {}

        def pre_task(m, w, s):
            if s not in cache_pre:
                cache_pre[s] = timer.run(m, task, m, ws[0], s)
            return {**cache_pre[s], "w": w}
    workers = int(exp.run.get("workers", 1))

    def run_one(args):
        m, w, s = args
        log(f"pareto: {m} w={w:g} seed={s}")
        if m == "pretrained":
            return pre_task(m, w, s)
        return timer.run(m, task, m, w, s)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool_:
            rows = list(pool_.map(run_one, tasks))
    else:
        rows = [run_one(t) for t in tasks]
    record.warnings.extend(sorted(set(rgg_warnings))[:20])
    rows.sort(key=lambda r: (r["method"], r["w"], r["seed"]))
    record.rows = rows
    record.summary = pool(rows, ("method", "w"),
                          ("r1_mean", "r1_se", "r2_mean", "r2_se", "kl", "objective", "objective_se"))
    record.wall_clock = dict(timer.totals)
    record.outputs["pareto.csv"] = str(write_csv(out_dir / "pareto.csv", PARETO_COLUMNS, rows))
    record.outputs["pareto_summary.csv"] = str(write_csv(out_dir / "pareto_summary.csv", SUMMARY_COLUMNS,
                                                         record.summary))
    if plots:
        labels = tuple(r.name or f"r{i + 1}" for i, r in enumerate(basis))
        record.outputs["pareto.svg"] = str(pareto_plot_safe(record.summary, out_dir / "pareto.svg", labels))
    return _finish(record, out_dir)


def pareto_plot_safe(summary, path, labels):
    from .plots import pareto_plot

    finite = [r for r in summary if all(math.isfinite(r[k]) for k in ("r1_mean", "r2_mean"))]
    return pareto_plot(finite, path, labels)


# -- lambda sweep ----------------------------------------------------------------

KLA_COLUMNS = ["lambda", "seed", "n_samples", "kla_mean", "kla_se", "oracle_mean", "oracle_se", "reward_gap",
               "gap_se", "w1", "kla_kl", "oracle_kl", "kla_objective", "oracle_objective", "kla_mean_fp",
               "oracle_mean_fp", "status"]


def run_kla_sweep(exp: Experiment, out_dir, plots: bool = True, log: Callable[[str], None] = lambda s: None) -> RunRecord:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sec = exp.section("kla")
    r = exp.rewards[int(sec["reward"])]
    lams = sorted(float(v) for v in sec["lambdas"])
    record = RunRecord("kla", exp.config_hash(), settings={**_settings(exp), "lambdas": lams})
    timer = _Timer()
    pre = pretrained_drift(exp.prior, exp.schedule)
    ft = exact_finetuned_drift(exp.prior, r, exp.alpha, exp.schedule)
    rows = []
    dens_cache = {}
    for lam in lams:
        try:
            blend = db_kla(pre, ft, lam)
            oracle = morl_oracle(exp.prior, [r], [1.0], exp.alpha, lam, exp.schedule)
        except Exception as exc:
            for seed in exp.seeds:
                rows.append({"lambda": lam, "seed": seed, "status": f"error: {type(exc).__name__}: {exc}"})
            record.warnings.append(f"lambda={lam}: {exc}")
            continue
        for seed in exp.seeds:
            log(f"kla: lambda={lam:g} seed={seed}")
            row = {"lambda": lam, "seed": seed}
            try:
                xk = timer.run("db_kla", sample_drift, exp, blend, seed).samples
                xo = timer.run("morl_oracle", sample_drift, exp, oracle, seed).samples
                ek, eo = expected_reward(xk, r), expected_reward(xo, r)
                row.update(n_samples=xk.shape[0], kla_mean=ek.mean, kla_se=ek.stderr, oracle_mean=eo.mean,
                           oracle_se=eo.stderr, reward_gap=ek.mean - eo.mean,
                           gap_se=math.hypot(ek.stderr, eo.stderr))
                row["w1"] = wasserstein1_1d(xk, xo) if exp.dim == 1 else float("nan")
                if exp.dim == 1:
                    if lam not in dens_cache:
                        dens_cache[lam] = (timer.run("db_kla", fp_density, exp, blend),
                                           timer.run("morl_oracle", fp_density, exp, oracle))
                    dk, do = dens_cache[lam]
                    row.update(kla_kl=dk.kl_to(exp.prior), oracle_kl=do.kl_to(exp.prior),
                               kla_mean_fp=dk.expect(r), oracle_mean_fp=do.expect(r))
                else:
                    row.update(kla_kl=float("nan"), oracle_kl=float("nan"), kla_mean_fp=float("nan"),
                               oracle_mean_fp=float("nan"))
                eff = exp.alpha / lam if lam > 0 else float("inf")
                for m in ("kla", "oracle"):
                    kl = row[f"{m}_kl"]
                    row[f"{m}_objective"] = (row[f"{m}_mean"] - eff * kl) if lam > 0 else float("nan")
                row["status"] = "ok"
            except Exception as exc:
                row["status"] = f"error: {type(exc).__name__}: {exc}"
                record.warnings.append(f"lambda={lam} seed={seed}: {exc}")
            rows.append(row)
    rows.sort(key=lambda x: (x["lambda"], x["seed"]))
    record.rows = rows
    record.summary = pool(rows, ("lambda",), ("kla_mean", "kla_se", "oracle_mean", "oracle_se", "reward_gap",
                                              "gap_se", "w1"))
    record.wall_clock = dict(timer.totals)
    record.outputs["kla.csv"] = str(write_csv(out_dir / "kla.csv", KLA_COLUMNS, rows))
    record.outputs["kla_summary.csv"] = str(write_csv(
        out_dir / "kla_summary.csv",
        ["lambda", "kla_mean", "kla_se", "oracle_mean", "oracle_se", "reward_gap", "gap_se", "w1", "n_seeds",
         "n_samples"], record.summary))
    if plots and record.summary:
        from .plots import kla_plot

        record.outputs["kla.svg"] = str(kla_plot(record.summary, out_dir / "kla.svg"))
    return _finish(record, out_dir)


# -- gap report ------------------------------------------------------------------

def run_jensen_report(exp: Experiment, out_dir, plots: bool = True, log: Callable[[str], None] = lambda s: None) -> RunRecord:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sec = exp.section("jensen")
    r = exp.rewards[int(sec["reward"])]
    ts = [float(t) for t in sec["ts"]]
    xs = [np.atleast_1d(np.asarray(x, dtype=float)) for x in sec["xs"]]
    for x in xs:
        if x.size != exp.dim:
            raise ConfigError(f"jensen.xs entry {x.tolist()} does not match dimension {exp.dim}")
    points = [(x, t) for t in ts for x in xs]
    record = RunRecord("jensen", exp.config_hash(), settings={**_settings(exp), "ts": ts,
                                                              "num_draws": int(sec["num_draws"])})
    timer = _Timer()
    log(f"jensen: {len(points)} points")
    reports = timer.run("verify_bound", verify_bound, exp.prior, r, exp.alpha, exp.schedule, points,
                        int(sec["num_draws"]), RandomSource(exp.seeds[0]), float(sec["slack"]))
    record.rows = [report_row(rep) for rep in reports]
    per_t = defaultdict(float)
    for rep in reports:
        per_t[rep.t] = max(per_t[rep.t], rep.delta_norm)
    record.summary = [{"t": t, "max_delta": per_t[t]} for t in sorted(per_t, reverse=True)]
    record.settings["fraction_satisfied"] = fraction_satisfied(reports)
    if any(not rep.computed for rep in reports):
        record.warnings.append("L3 not computed for this reward/prior; bound rows marked 'not computed'")
    record.wall_clock = dict(timer.totals)
    path = out_dir / "jensen.csv"
    path.write_text(reports_to_csv(reports, exp.dim))
    record.outputs["jensen.csv"] = str(path)
    return _finish(record, out_dir)


def report_row(rep: GapReport) -> dict:
    return {"t": rep.t, "x": rep.x, "delta": rep.delta_norm, "L1": rep.L1, "L1_stderr": rep.L1_stderr,
            "L2": rep.L2, "L2_stderr": rep.L2_stderr, "L3": rep.L3, "bound": rep.bound if rep.computed else None,
            "satisfied": rep.satisfied, "status": rep.status}


# -- raw samples, fitting, validation ----------------------------------------------

def _sample_method(exp: Experiment, method: str, w, lam: float, seed: int) -> np.ndarray:
    basis = list(exp.rewards)
    if w is None:
        if len(basis) != 1:
            raise ConfigError("sample.w is required when there are several rewards")
        wv = [1.0]
    else:
        wv = [float(w), 1.0 - float(w)] if len(basis) == 2 else [float(v) for v in w]
    pre = pretrained_drift(exp.prior, exp.schedule)
    rw = scalarize(basis, wv)
    if method == "pretrained":
        return sample_drift(exp, pre, seed).samples
    if method == "morl_oracle":
        return sample_drift(exp, morl_oracle(exp.prior, basis, wv, exp.alpha, lam, exp.schedule), seed).samples
    fts = [exact_finetuned_drift(exp.prior, r, exp.alpha, exp.schedule) for r in basis]
    if method == "db_mpa":
        return sample_drift(exp, db_mpa(fts, wv), seed).samples
    if method == "db_kla":
        return sample_drift(exp, db_kla(pre, db_mpa(fts, wv), lam), seed).samples
    if method == "rgg":
        cfg = _rgg_config(exp.cfg["methods"]["rgg"], exp.alpha)
        return sample_drift(exp, rgg_drift(pre, basis, wv, cfg, exp.schedule, exp.grid), seed).samples
    if method == "code":
        o = exp.cfg["methods"]["code"]
        return code_sample(pre, rw, _code_config(o), exp.schedule, exp.grid,
                           RandomSource(seed), exp.samples).samples
    if method == "best_of_n":
        o = exp.cfg["methods"]["best_of_n"]
        return best_of_n(pre, rw, int(o["n"]), exp.schedule, exp.grid, RandomSource(seed), batch=exp.samples)
    if method == "rs_learned":
        models = [_fit_learned(exp, r, seed, i) for i, r in enumerate(basis)]
        return sample_drift(exp, average_params(models, wv).as_drift(exp.schedule), seed).samples
    raise ConfigError(f"unknown sample.method {method!r}")


def run_sample(exp: Experiment, out_dir, plots: bool = True, log: Callable[[str], None] = lambda s: None) -> RunRecord:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sec = exp.section("sample")
    method = sec["method"]
    record = RunRecord("sample", exp.config_hash(), settings={**_settings(exp), "method": method})
    timer = _Timer()
    cols = ["seed"] + [f"x{i + 1}" for i in range(exp.dim)]
    rows = []
    for seed in exp.seeds:
        log(f"sample: {method} seed={seed}")
        x = timer.run(method, _sample_method, exp, method, sec.get("w"), float(sec.get("lam", 1.0)), seed)
        rows.extend({"seed": seed, **{f"x{i + 1}": float(v) for i, v in enumerate(row)}} for row in x)
    record.rows = rows
    record.wall_clock = dict(timer.totals)
    record.outputs["samples.csv"] = str(write_csv(out_dir / "samples.csv", cols, rows))
    return _finish(record, out_dir)


def run_fit(exp: Experiment, out_dir, plots: bool = True, log: Callable[[str], None] = lambda s: None) -> RunRecord:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sec = exp.section("fit")
    if sec["target"] == "tilted":
        truth = tilt(exp.prior, exp.rewards[int(sec["reward"])], exp.alpha).tilted
    elif sec["target"] == "prior":
        truth = exp.prior
    else:
        raise ConfigError(f"fit.target must be 'prior' or 'tilted', got {sec['target']!r}")
    try:
        cfg = TrainConfig(num_samples=sec.get("num_samples"), epochs=int(sec["epochs"]),
                          time_bins=int(sec["time_bins"]), weighting=sec["weighting"], family=sec["family"],
                          degree=int(sec["degree"]), n_centers=int(sec["n_centers"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    record = RunRecord("fit", exp.config_hash(), settings={**_settings(exp), "fit": sec})
    timer = _Timer()
    seed = exp.seeds[0]
    rng = RandomSource(seed, stream=200)
    n = int(sec.get("num_samples") or exp.samples)
    data = SampleBatch(truth.sample(n, rng.generator(RandomSource.AUX)))
    log(f"fit: {cfg.family} on {n} samples")
    model = timer.run("dsm_train", dsm_train, data, exp.schedule, cfg, rng.child(1))
    mse = score_mse(model, truth, exp.schedule) if exp.dim == 1 else float("nan")
    record.warnings.extend(model.warnings)
    record.summary = [{"objective": model.objective, "score_mse": mse, "fingerprint": model.fingerprint()}]
    record.settings["score_mse"] = mse
    record.wall_clock = dict(timer.totals)
    (out_dir / "model.json").write_text(model.to_json() + "\n")
    record.outputs["model.json"] = str(out_dir / "model.json")
    return _finish(record, out_dir)


def _check(name, fn):
    try:
        ok, detail = fn()
    except Exception as exc:
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return {"check": name, "passed": bool(ok), "detail": detail}


def validate_checks(exp: Experiment) -> list[dict]:
    """Invariant suite on the configured prior, rewards and drifts."""
    from scipy.integrate import quad

    from ..metrics import quadrature_rule

    prior, s, alpha = exp.prior, exp.schedule, exp.alpha
    gen = np.random.default_rng(exp.seeds[0])
    checks = []

    def mixture_invariants():
        models = [prior] + [tilt(prior, r, alpha).tilted for r in exp.rewards if r.kind != "blackbox"]
        models += [marginal_at(prior, s, t) for t in (0.1, 0.5, 1.0)]
        for m in models:
            if abs(m.weights.sum() - 1) > 1e-12 or np.any(m.weights < 0):
                return False, "weights off the simplex"
            np.linalg.cholesky(m.covariances)
        return True, f"{len(models)} mixtures"

    def score_fd():
        x = prior.sample(100, gen)
        h = 1e-5
        fd = np.stack([(prior.logpdf(x + h * e) - prior.logpdf(x - h * e)) / (2 * h) for e in np.eye(prior.dim)], 1)
        an = prior.score(x)
        err = float(np.max(np.abs(an - fd) / np.maximum(1.0, np.abs(an))))
        return err < 1e-5, f"max rel err {err:.2e}"

    def tilt_quadrature():
        if prior.dim > 2:
            return True, "skipped (d > 2)"
        worst = 0.0
        for r in exp.rewards:
            if r.kind == "blackbox":
                continue
            res = tilt(prior, r, alpha)
            lo, hi = covering_box(prior, res.tilted)
            pts, wts = quadrature_rule(lo, hi)
            z = float(np.sum(wts * np.exp(prior.logpdf(pts) + r(pts) / alpha)))
            worst = max(worst, abs(math.log(z) - res.log_normalizer))
        return worst < 1e-6, f"max |log Z error| {worst:.2e}"

    def alpha_bar_quad():
        ts = np.linspace(0, s.T, 100)
        err = max(abs(math.exp(-quad(s.beta, 0, t)[0]) - s.alpha_bar(t)) for t in ts)
        return err < 1e-10, f"max err {err:.2e}"

    def blend_affinity():
        fts = [exact_finetuned_drift(prior, r, alpha, s) for r in exp.rewards if r.kind != "blackbox"]
        if len(fts) < 2:
            return True, "skipped (< 2 analytic rewards)"
        w = np.full(len(fts), 1.0 / len(fts))
        mix = db_mpa(fts, w)
        err = 0.0
        for _ in range(20):
            t = float(gen.uniform(0.01, s.T))
            x = gen.normal(size=(5, prior.dim))
            ref = sum(wi * f(x, t) for wi, f in zip(w, fts))
            err = max(err, float(np.max(np.abs(mix(x, t) - ref))))
        return err < 1e-12, f"max err {err:.2e}"

    def control_identity():
        err = 0.0
        pre = pretrained_drift(prior, s)
        for r in exp.rewards:
            if r.kind != "linear":
                continue
            ft = exact_finetuned_drift(prior, r, alpha, s)
            u = control_exact(prior, r, alpha, s)
            for t in (0.05, 0.3, 0.8):
                x = prior.sample(20, gen)
                err = max(err, float(np.max(np.abs(u(x, t) - (ft(x, t) - pre(x, t)) / -s.beta(t)))))
        return err < 1e-8, f"max err {err:.2e}"

    def tweedie():
        err = 0.0
        for t in (0.05, 0.3, 0.8):
            x = marginal_at(prior, s, t).sample(50, gen)
            err = max(err, float(np.max(np.abs(tweedie_denoise(x, t, prior, s) - posterior_mean(prior, s, t, x)))))
        return err < 1e-8, f"max err {err:.2e}"

    for name, fn in [("mixture invariants", mixture_invariants), ("score vs finite differences", score_fd),
                     ("tilt normalizer vs quadrature", tilt_quadrature), ("alpha_bar vs quadrature", alpha_bar_quad),
                     ("db_mpa affinity", blend_affinity), ("control term identity", control_identity),
                     ("tweedie vs posterior mean", tweedie)]:
        checks.append(_check(name, fn))
    return checks


def run_validate(exp: Experiment, out_dir, plots: bool = True, log: Callable[[str], None] = lambda s: None) -> RunRecord:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = RunRecord("validate", exp.config_hash(), settings=_settings(exp))
    timer = _Timer()
    record.rows = timer.run("validate", validate_checks, exp)
    for c in record.rows:
        log(f"validate: {'PASS' if c['passed'] else 'FAIL'} {c['check']} ({c['detail']})")
    record.settings["all_passed"] = all(c["passed"] for c in record.rows)
    record.wall_clock = dict(timer.totals)
    (out_dir / "validate.json").write_text(json.dumps(record.rows, indent=2) + "\n")
    record.outputs["validate.json"] = str(out_dir / "validate.json")
    return _finish(record, out_dir)


RUNNERS = {"pareto": run_pareto, "kla": run_kla_sweep, "jensen": run_jensen_report, "sample": run_sample,
           "fit": run_fit, "validate": run_validate}
