"""Drift models and the two inference-time blending operators.

Blending happens on drift values at evaluation time; no model parameters are
ever mixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .rewards import PreferenceWeights
from .sde import DomainError, NoiseSchedule


@dataclass(frozen=True)
class DriftModel:
    """Reverse-SDE drift ``f(x, t)`` with a provenance tag.

    ``provenance`` is a nested tuple such as ``("db_mpa", (child tags...), w)``.
    """

    fn: Callable[[np.ndarray, float], np.ndarray]
    schedule: NoiseSchedule
    dimension: int
    provenance: tuple = ("custom",)
    children: tuple = field(default=(), repr=False)

    def __call__(self, x, t: float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.fn(x, t)

    def score(self, x, t: float) -> np.ndarray:
        """Score implied by the drift: ``s = -(f + 0.5 beta x) / beta``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = self.schedule.beta(t)
        return -(self(x, t) + 0.5 * b * x) / b

    @property
    def kind(self) -> str:
        return self.provenance[0]


def drift_from_score(score_fn, schedule: NoiseSchedule, dimension: int, provenance=("custom",)) -> DriftModel:
    """Wrap a score ``s(x, t)`` as ``f = -0.5 beta x - beta s``."""

    def fn(x, t):
        b = schedule.beta(t)
        return -0.5 * b * x - b * score_fn(x, t)

    return DriftModel(fn, schedule, dimension, provenance)


def _check_compatible(drifts: Sequence[DriftModel]):
    d0 = drifts[0]
    for d in drifts[1:]:
        if d.dimension != d0.dimension:
            raise ValueError(f"drift dimensions differ: {d.dimension} vs {d0.dimension}")
        if d.schedule.T != d0.schedule.T:
            raise ValueError("drifts have different horizons")


def db_mpa(drifts: Sequence[DriftModel], w) -> DriftModel:
    """Multi-preference blend: ``f_mix(x, t) = sum_i w_i f_i(x, t)``."""
    w = w if isinstance(w, PreferenceWeights) else PreferenceWeights(w)
    drifts = tuple(drifts)
    if len(drifts) == 0 or len(drifts) != len(w):
        raise ValueError(f"{len(drifts)} drifts but {len(w)} weights")
    _check_compatible(drifts)
    weights = w.values.copy()

    def fn(x, t):
        out = weights[0] * drifts[0](x, t)
        for wi, d in zip(weights[1:], drifts[1:]):
            out = out + wi * d(x, t)
        return out

    tag = ("db_mpa", tuple(d.provenance for d in drifts), tuple(weights.tolist()))
    return DriftModel(fn, drifts[0].schedule, drifts[0].dimension, tag, drifts)


def db_kla(pre: DriftModel, finetuned: DriftModel, lam: float) -> DriftModel:
    """KL-strength blend: ``(1 - lam) f_pre + lam f_ft``; ``lam > 1`` extrapolates."""
    if not np.isfinite(lam) or lam < 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    _check_compatible((pre, finetuned))
    lam = float(lam)

    def fn(x, t):
        return (1.0 - lam) * pre(x, t) + lam * finetuned(x, t)

    tag = ("db_kla", pre.provenance, finetuned.provenance, lam)
    return DriftModel(fn, pre.schedule, pre.dimension, tag, (pre, finetuned))


def late_blend(blended: DriftModel, fallback: DriftModel, t_switch: float) -> DriftModel:
    """Use ``blended`` only for ``t <= t_switch`` and ``fallback`` before that.

    Experiment flag for blending only the late (small-t) part of sampling.
    """
    _check_compatible((blended, fallback))

    def fn(x, t):
        return blended(x, t) if t <= t_switch else fallback(x, t)

    tag = ("late_blend", blended.provenance, fallback.provenance, float(t_switch))
    return DriftModel(fn, blended.schedule, blended.dimension, tag, (blended, fallback))
