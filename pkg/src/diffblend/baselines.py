"""Comparison methods: MORL oracle, reward-gradient guidance, CoDe and best-of-N.

Rewarded Soup lives in :mod:`diffblend.score_fit` as :func:`average_params`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .blend import DriftModel
from .mixtures import GaussianMixture, exact_finetuned_drift, marginal_at, pretrained_drift
from .rewards import PreferenceWeights, RewardSpec, scalarize
from .sde import (ConfigurationError, DomainError, NoiseSchedule, RandomSource, SampleBatch, TimeGrid,
                  euler_maruyama_reverse, reverse_steps)

log = logging.getLogger(__name__)


def morl_oracle(prior: GaussianMixture, basis: Sequence[RewardSpec], w, alpha: float, lam: float,
                schedule: NoiseSchedule) -> DriftModel:
    """Exactly aligned drift for ``(r(w), alpha / lam)``; ``lam = 0`` is the pre-trained drift."""
    if not lam >= 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        pre = pretrained_drift(prior, schedule)
        return DriftModel(pre.fn, schedule, prior.dim, ("morl_oracle", "pretrained"))
    r = scalarize(basis, w)
    ft = exact_finetuned_drift(prior, r, alpha / lam, schedule)
    return DriftModel(ft.fn, schedule, prior.dim, ("morl_oracle", ft.provenance))


def _score_fn(source, schedule):
    if isinstance(source, GaussianMixture):
        return lambda x, t: marginal_at(source, schedule, t).score(x)
    if isinstance(source, DriftModel):
        return source.score
    return source


def tweedie_denoise(x_t, t: float, score_source, schedule: NoiseSchedule) -> np.ndarray:
    """``x0_hat = (x_t + (1 - abar) s(x_t, t)) / sqrt(abar)``.

    ``score_source`` is a score callable ``s(x, t)``, a :class:`DriftModel`
    (its implied score) or a prior :class:`GaussianMixture`.
    """
    x = np.asarray(x_t, dtype=float)
    if t == 0:
        return x.copy()
    abar = schedule.alpha_bar(t)
    xx = np.atleast_2d(x)
    out = (xx + (1.0 - abar) * _score_fn(score_source, schedule)(xx, t)) / math.sqrt(abar)
    return out.reshape(x.shape)


@dataclass(frozen=True)
class RggConfig:
    """Reward-gradient guidance settings.

    The guidance scale at reverse step ``n`` (``n = 1`` at ``t = T``) is
    ``(1 + gamma) ** ((n - 1) * reference_steps / N)`` for an ``N``-step grid, so the
    schedule spans the same range as an unscaled ``reference_steps``-step sampler.
    ``reverse_index`` counts ``n`` from ``t = 0`` instead.
    """

    gamma: float = 0.024
    normalize: bool = True
    alpha: float = 1.0
    reference_steps: int = 50
    reverse_index: bool = False
    fd_step: float = 1e-4

    def __post_init__(self):
        if not self.gamma > -1:
            raise ConfigurationError(f"gamma must be > -1, got {self.gamma}")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if self.reference_steps < 1:
            raise ConfigurationError("reference_steps must be positive")

    def scale(self, k: int, num_steps: int) -> float:
        n = k if self.reverse_index else num_steps - k + 1
        return (1.0 + self.gamma) ** ((n - 1) * self.reference_steps / num_steps)


def _tweedie_jacobian(score, x, t, schedule, h):
    """Central-difference Jacobian of the Tweedie denoiser: (n, d_out, d_in)."""
    n, d = x.shape
    J = np.empty((n, d, d))
    for j in range(d):
        step = h * np.maximum(1.0, np.abs(x[:, j]))
        xp, xm = x.copy(), x.copy()
        xp[:, j] += step
        xm[:, j] -= step
        J[:, :, j] = (tweedie_denoise(xp, t, score, schedule) - tweedie_denoise(xm, t, score, schedule)) / (2 * step[:, None])
    return J


def rgg_drift(pre: DriftModel, basis: Sequence[RewardSpec], w, config: RggConfig, schedule: NoiseSchedule,
              grid: TimeGrid, warnings: Optional[list] = None) -> DriftModel:
    """Pre-trained drift plus normalized reward-gradient guidance through the Tweedie denoiser.

    The step mean gains ``lam_k beta(t_k) dt_k / alpha * sum_i w_i g_i``, i.e. the drift
    loses ``lam_k beta(t_k) / alpha * sum_i w_i g_i``.
    """
    wv = (w if isinstance(w, PreferenceWeights) else PreferenceWeights(w)).values
    basis = list(basis)
    if len(basis) != wv.size:
        raise ValueError(f"{len(basis)} rewards but {wv.size} weights")
    sink = warnings if warnings is not None else []
    active = [(wi, r) for wi, r in zip(wv, basis) if wi != 0 and not r.is_constant]
    inv_alpha = 0.0 if math.isinf(config.alpha) else 1.0 / config.alpha
    N = grid.num_steps

    def fn(x, t):
        base = pre(x, t)
        if not active or inv_alpha == 0.0 or t == 0:
            return base
        x = np.atleast_2d(x)
        k = grid.step_index(t)
        J = _tweedie_jacobian(pre.score, x, t, schedule, config.fd_step)
        x0 = tweedie_denoise(x, t, pre.score, schedule)
        g = np.zeros_like(x)
        for wi, r in active:
            gi = np.einsum("nij,ni->nj", J, r.grad(x0))
            if config.normalize:
                norm = np.linalg.norm(gi, axis=1)
                zero = norm == 0
                if np.any(zero):
                    sink.append(f"zero reward gradient for {r.name or r.kind} at t={t:.6g} "
                                f"({int(zero.sum())} points); normalization skipped")
                gi = gi / np.where(zero, 1.0, norm)[:, None]
            g += wi * gi
        return base - config.scale(k, N) * schedule.beta(t) * inv_alpha * g

    tag = ("rgg", pre.provenance, tuple(r.name or r.kind for r in basis), tuple(wv.tolist()), config.gamma)
    return DriftModel(fn, schedule, pre.dimension, tag, (pre,))


@dataclass(frozen=True)
class CodeConfig:
    """CoDe settings.

    ``block`` is counted in steps of a ``reference_steps``-step sampler and
    rescaled to the actual grid, so an ``N``-step run makes the same number of
    selections (``reference_steps / block``) as the reference sampler. With
    ``reference_steps=None`` the block is taken literally in grid steps.
    """

    particles: int = 20
    block: int = 5
    reference_steps: Optional[int] = 50

    def __post_init__(self):
        if self.particles < 1 or self.block < 1:
            raise ConfigurationError("CoDe needs particles >= 1 and block >= 1")
        if self.reference_steps is not None and self.reference_steps < 1:
            raise ConfigurationError("reference_steps must be positive")

    def block_steps(self, num_steps: int) -> int:
        if self.reference_steps is None:
            steps = self.block
        else:
            if (self.block * num_steps) % self.reference_steps:
                raise ConfigurationError(
                    f"block {self.block} of a {self.reference_steps}-step reference does not map to a whole "
                    f"number of steps on a {num_steps}-step grid")
            steps = self.block * num_steps // self.reference_steps
        if steps < 1 or num_steps % steps:
            raise ConfigurationError(f"block length {steps} does not divide {num_steps} steps")
        return steps


def code_sample(drift: DriftModel, reward: RewardSpec, config: CodeConfig, schedule: NoiseSchedule,
                grid: TimeGrid, rng: RandomSource, batch: int) -> SampleBatch:
    """Blockwise lookahead selection.

    Each block starts every particle from the current state, integrates the
    block's steps with the particle's own noise stream, scores
    ``reward(tweedie(state))`` and keeps the best particle per trajectory
    (lowest index on ties). Particle 0 shares the plain sampler's noise stream.
    """
    N = grid.num_steps
    B = config.block_steps(N)
    x = rng.initial_noise((batch, drift.dimension))
    rows = np.arange(batch)
    for k in range(N, 0, -B):
        k_to = k - B
        t_to = float(grid.knots[k_to])
        cand = np.empty((config.particles, batch, drift.dimension))
        vals = np.empty((config.particles, batch))
        for j in range(config.particles):
            y = reverse_steps(drift, x, schedule, grid, rng, k, k_to, particle=j)
            cand[j] = y
            vals[j] = reward(tweedie_denoise(y, t_to, drift.score, schedule))
        x = cand[np.argmax(vals, axis=0), rows]
    return SampleBatch(x, 0.0)


def best_of_n(drift: DriftModel, reward: RewardSpec, n: int, schedule: NoiseSchedule, grid: TimeGrid,
              rng: RandomSource, batch: Optional[int] = None) -> np.ndarray:
    """Draw ``n`` full trajectories and keep the highest-reward one (lowest index on ties).

    With ``batch`` set, repeats the selection independently and returns ``(batch, d)``.
    """
    if n < 1:
        raise ConfigurationError("best_of_n needs n >= 1")
    m = 1 if batch is None else batch
    out = euler_maruyama_reverse(drift, schedule, grid, rng, m * n, drift.dimension).samples
    out = out.reshape(m, n, drift.dimension)
    idx = np.argmax(reward(out.reshape(m * n, -1)).reshape(m, n), axis=1)
    sel = out[np.arange(m), idx]
    return sel[0] if batch is None else sel
