"""Denoising score matching with closed-form per-time-bin ridge regression.

A :class:`ScoreModel` is piecewise constant in time: ``[0, T]`` is cut into
equal bins and each bin carries its own linear map from features of ``x``
to the score. Two feature families are available:

* ``polynomial``: ``1, x, x^2, ..., x^degree`` per coordinate (no cross terms)
* ``rbf``: ``1, x`` plus Gaussian bumps at per-bin centers with a per-bin bandwidth

RBF centers are placed from the noisy training data of each bin, so two
models fitted on different data have different centers. Averaging their
parameters (Rewarded Soup) then mixes centers too, which is exactly where
parameter averaging stops being the same thing as blending drifts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from .blend import DriftModel, drift_from_score
from .mixtures import GaussianMixture, marginal_at
from .rewards import PreferenceWeights
from .sde import ConfigurationError, NoiseSchedule, RandomSource, SampleBatch

log = logging.getLogger(__name__)

FAMILIES = ("polynomial", "rbf")
WEIGHTINGS = ("uniform", "1-abar")


@dataclass(frozen=True)
class TrainConfig:
    """Settings for :func:`dsm_train`.

    ``epochs`` is the number of independent ``(t, eps)`` redraws per data point
    and time bin. ``learning_rate`` is kept for config compatibility with
    iterative trainers; the closed-form solver ignores it.
    """

    num_samples: Optional[int] = None
    batch_size: int = 8192
    learning_rate: float = 1e-3
    epochs: int = 16
    time_bins: int = 32
    weighting: str = "1-abar"
    family: str = "polynomial"
    degree: int = 1
    n_centers: int = 12
    ridge: float = 1e-8
    t_min: float = 1e-3

    def __post_init__(self):
        for name in ("batch_size", "epochs", "time_bins", "degree", "n_centers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.num_samples is not None and self.num_samples < 1:
            raise ConfigurationError("num_samples must be positive")
        if not (self.learning_rate > 0 and self.ridge >= 0 and self.t_min > 0):
            raise ConfigurationError("learning_rate and t_min must be > 0, ridge >= 0")
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown feature family {self.family!r}; choose from {FAMILIES}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigurationError(f"unknown weighting {self.weighting!r}; choose from {WEIGHTINGS}")


@dataclass(frozen=True)
class ScoreModel:
    family: str
    dim: int
    T: float
    theta: np.ndarray  # (bins, features, dim)
    degree: int = 1
    centers: Optional[np.ndarray] = None  # (bins, n_centers, dim)
    bandwidth: Optional[np.ndarray] = None  # (bins,)
    objective: float = float("nan")
    warnings: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown feature family {self.family!r}")
        arrays = [self.theta] + ([self.centers, self.bandwidth] if self.family == "rbf" else [])
        for a in arrays:
            if a is None or not np.all(np.isfinite(a)):
                raise ValueError("score model parameters must be finite")
        if self.family == "rbf" and np.any(self.bandwidth <= 0):
            raise ValueError("RBF bandwidths must be positive")

    @property
    def time_bins(self) -> int:
        return self.theta.shape[0]

    def bin_of(self, t: float) -> int:
        return min(int(t / self.T * self.time_bins), self.time_bins - 1)

    def features(self, x: np.ndarray, b: int) -> np.ndarray:
        return _features(x, self.family, self.degree,
                         None if self.centers is None else self.centers[b],
                         None if self.bandwidth is None else self.bandwidth[b])

    def score(self, x, t: float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = self.bin_of(float(t))
        return self.features(x, b) @ self.theta[b]

    def as_drift(self, schedule: NoiseSchedule) -> DriftModel:
        return drift_from_score(self.score, schedule, self.dim, ("learned", self.family, self.fingerprint()))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        d = {"family": self.family, "dim": self.dim, "T": self.T, "degree": self.degree,
             "theta": self.theta.tolist(), "objective": self.objective}
        if self.family == "rbf":
            d["centers"] = self.centers.tolist()
            d["bandwidth"] = self.bandwidth.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreModel":
        rbf = d["family"] == "rbf"
        return cls(d["family"], int(d["dim"]), float(d["T"]), np.asarray(d["theta"], dtype=float),
                   int(d.get("degree", 1)),
                   np.asarray(d["centers"], dtype=float) if rbf else None,
                   np.asarray(d["bandwidth"], dtype=float) if rbf else None,
                   float(d.get("objective", float("nan"))))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ScoreModel":
        return cls.from_dict(json.loads(s))


def _features(x, family, degree, centers, bandwidth):
    cols = [np.ones((x.shape[0], 1))]
    if family == "polynomial":
        cols += [x**p for p in range(1, degree + 1)]
    else:
        cols.append(x)
        d2 = np.sum((x[:, None, :] - centers[None]) ** 2, axis=2)
        cols.append(np.exp(-0.5 * d2 / bandwidth**2))
    return np.hstack(cols)


def _place_centers(xt: np.ndarray, m: int, seed: int):
    """Centers and bandwidth from noisy data: quantiles in 1-D, k-means otherwise."""
    if xt.shape[1] == 1:
        qs = (np.arange(m) + 0.5) / m
        c = np.quantile(xt[:, 0], qs)[:, None]
        spacing = np.diff(c[:, 0])
        bw = float(np.median(spacing)) if m > 1 else float(xt.std())
    else:
        c, _ = kmeans2(xt, m, seed=seed, minit="++")
        order = np.lexsort(c.T[::-1])
        c = c[order]
        dist = np.linalg.norm(c[:, None] - c[None], axis=2)
        np.fill_diagonal(dist, np.inf)
        bw = float(np.median(dist.min(axis=1)))
    return c, max(bw, 1e-3)


def dsm_train(data: SampleBatch, schedule: NoiseSchedule, config: TrainConfig, rng: RandomSource) -> ScoreModel:
    """Fit a score model by denoising score matching.

    Regresses features of ``x_t`` onto ``-(x_t - sqrt(abar) x_0) / (1 - abar)`` in
    each time bin; the normal equations are accumulated in batches and solved once.
    """
    x0 = data.samples
    if config.num_samples is not None:
        x0 = x0[: config.num_samples]
    n, d = x0.shape
    if n == 0:
        raise ValueError("no training samples")
    B = config.time_bins
    edges = np.linspace(0.0, schedule.T, B + 1)
    thetas, centers, bws = [], [], []
    warnings: list[str] = []
    total_loss = total_w = 0.0
    for b in range(B):
        lo, hi = max(edges[b], config.t_min), edges[b + 1]
        gen = rng.generator(RandomSource.AUX, b)
        draws = []
        for e in range(config.epochs):
            t = gen.uniform(lo, hi, size=n)
            abar = schedule.alpha_bar(t)
            sig = np.sqrt(1.0 - abar)
            eps = gen.standard_normal((n, d))
            xt = np.sqrt(abar)[:, None] * x0 + sig[:, None] * eps
            target = -eps / sig[:, None]
            w = (1.0 - abar) if config.weighting == "1-abar" else np.ones(n)
            draws.append((xt, target, w))
        c = bw = None
        if config.family == "rbf":
            c, bw = _place_centers(draws[0][0], config.n_centers, seed=b)
        G = h = None
        yy = wsum = 0.0
        for xt, target, w in draws:
            for s in range(0, n, config.batch_size):
                phi = _features(xt[s:s + config.batch_size], config.family, config.degree, c, bw)
                y = target[s:s + config.batch_size]
                ww = w[s:s + config.batch_size]
                pw = phi * ww[:, None]
                G = pw.T @ phi if G is None else G + pw.T @ phi
                h = pw.T @ y if h is None else h + pw.T @ y
                yy += float(np.sum(ww * np.sum(y**2, axis=1)))
                wsum += float(ww.sum())
        F = G.shape[0]
        scale = np.trace(G) / F
        reg = config.ridge * scale
        if np.linalg.cond(G) > 1e12:
            reg = max(reg, 1e-10 * scale)
            warnings.append(f"bin {b}: ill-conditioned normal equations, ridge floor {reg:.3g} applied")
        theta = np.linalg.solve(G + reg * np.eye(F), h)
        loss = float(np.sum(theta * (G @ theta)) - 2 * np.sum(theta * h) + yy)
        total_loss += loss
        total_w += wsum
        thetas.append(theta)
        if c is not None:
            centers.append(c)
            bws.append(bw)
    for msg in warnings:
        log.warning(msg)
    rbf = config.family == "rbf"
    return ScoreModel(config.family, d, schedule.T, np.stack(thetas), config.degree,
                      np.stack(centers) if rbf else None, np.asarray(bws) if rbf else None,
                      total_loss / total_w, tuple(warnings))


@dataclass(frozen=True)
class ScoreGrid:
    xs: np.ndarray  # (n, d)
    ts: np.ndarray

    @classmethod
    def default(cls, truth: GaussianMixture, n_x: int = 401, ts=None) -> "ScoreGrid":
        if truth.dim != 1:
            raise ValueError("default score grid is 1-D; pass explicit points for d > 1")
        sd = math.sqrt(float(truth.covariance()[0, 0]) + 1.0)
        m = float(truth.mean()[0])
        xs = np.linspace(m - 8 * sd, m + 8 * sd, n_x)[:, None]
        ts = np.linspace(0.02, 1.0, 50) if ts is None else np.asarray(ts, dtype=float)
        return cls(xs, ts)


def score_mse(model, truth: GaussianMixture, schedule: NoiseSchedule, grid: Optional[ScoreGrid] = None) -> float:
    """Squared score error averaged over ``t`` and weighted by ``p_t`` over the ``x`` points."""
    grid = grid or ScoreGrid.default(truth)
    total = 0.0
    for t in grid.ts:
        marg = marginal_at(truth, schedule, float(t))
        w = marg.pdf(grid.xs)
        w = w / w.sum()
        err = np.sum((model.score(grid.xs, float(t)) - marg.score(grid.xs)) ** 2, axis=1)
        total += float(np.sum(w * err))
    return total / len(grid.ts)


def average_params(models: Sequence[ScoreModel], w) -> ScoreModel:
    """Parameter-wise convex combination (Rewarded Soup)."""
    w = w if isinstance(w, PreferenceWeights) else PreferenceWeights(w)
    models = list(models)
    if len(models) != len(w) or not models:
        raise ValueError(f"{len(models)} models but {len(w)} weights")
    m0 = models[0]
    for m in models[1:]:
        if (m.family, m.dim, m.degree, m.T, m.theta.shape) != (m0.family, m0.dim, m0.degree, m0.T, m0.theta.shape):
            raise ValueError("cannot average score models with different architectures")
        if m.family == "rbf" and m.centers.shape != m0.centers.shape:
            raise ValueError("cannot average RBF models with different numbers of centers")
    wv = w.values

    def avg(attr):
        return sum(wi * getattr(m, attr) for wi, m in zip(wv, models))

    rbf = m0.family == "rbf"
    return ScoreModel(m0.family, m0.dim, m0.T, avg("theta"), m0.degree,
                      avg("centers") if rbf else None, avg("bandwidth") if rbf else None)
