"""Reward functions, preference weights and linear scalarization."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class RewardEvaluationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class RewardSpec:
    """``linear``: ``a.x + b``; ``quadratic``: ``x'Ax + a.x + b``; ``blackbox``: ``fn(x)``.

    Black-box callables take an ``(n, d)`` array and return ``(n,)`` values.
    """

    kind: str
    a: Optional[np.ndarray] = None
    b: float = 0.0
    A: Optional[np.ndarray] = None
    fn: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)
    dim: Optional[int] = None
    lipschitz: float = float("nan")
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic", "blackbox"):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.kind == "blackbox":
            if self.fn is None or self.dim is None:
                raise ValueError("blackbox reward needs fn and dim")
            return
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "dim", a.size)
        object.__setattr__(self, "b", float(self.b))
        if self.kind == "quadratic":
            A = np.atleast_2d(np.asarray(self.A, dtype=float))
            if A.shape != (a.size, a.size):
                raise ValueError(f"A has shape {A.shape}, expected {(a.size, a.size)}")
            if not np.allclose(A, A.T, atol=1e-12):
                raise ValueError("quadratic reward matrix must be symmetric")
            object.__setattr__(self, "A", 0.5 * (A + A.T))
        if not (np.all(np.isfinite(a)) and np.isfinite(self.b)):
            raise ValueError("reward parameters must be finite")
        if self.A is not None and not np.all(np.isfinite(self.A)):
            raise ValueError("reward parameters must be finite")

    # -- constructors -----------------------------------------------------
    @classmethod
    def linear(cls, a, b: float = 0.0, name: str = "") -> "RewardSpec":
        return cls("linear", a=a, b=b, name=name)

    @classmethod
    def quadratic(cls, A, a=None, b: float = 0.0, name: str = "") -> "RewardSpec":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        a = np.zeros(A.shape[0]) if a is None else a
        return cls("quadratic", a=a, b=b, A=A, name=name)

    @classmethod
    def blackbox(cls, fn, dim: int, lipschitz: float = float("nan"), name: str = "") -> "RewardSpec":
        return cls("blackbox", fn=fn, dim=dim, lipschitz=lipschitz, name=name)

    @classmethod
    def constant(cls, c: float, dim: int) -> "RewardSpec":
        return cls.linear(np.zeros(dim), c, name=f"const({c})")

    # -- evaluation -------------------------------------------------------
    @property
    def is_constant(self) -> bool:
        if self.kind == "blackbox":
            return False
        return not np.any(self.a) and (self.A is None or not np.any(self.A))

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.dim:
            raise ValueError(f"reward of dimension {self.dim} applied to x of dimension {x.shape[-1]}")
        if self.kind == "linear":
            return x @ self.a + self.b
        if self.kind == "quadratic":
            return np.einsum("ni,ij,nj->n", x, self.A, x) + x @ self.a + self.b
        out = np.asarray(self.fn(x), dtype=float).reshape(x.shape[0])
        if not np.all(np.isfinite(out)):
            raise RewardEvaluationError(f"blackbox reward {self.name!r} returned non-finite values")
        return out

    def grad(self, x, h: float = 1e-4) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "linear":
            return np.broadcast_to(self.a, x.shape).copy()
        if self.kind == "quadratic":
            return 2.0 * x @ self.A + self.a
        g = np.empty_like(x)
        for j in range(x.shape[1]):
            step = h * np.maximum(1.0, np.abs(x[:, j]))
            xp, xm = x.copy(), x.copy()
            xp[:, j] += step
            xm[:, j] -= step
            g[:, j] = (self(xp) - self(xm)) / (2 * step)
        return g

    def to_dict(self) -> dict:
        if self.kind == "blackbox":
            return {"kind": "blackbox", "name": self.name}
        out = {"kind": self.kind, "a": self.a.tolist(), "b": self.b}
        if self.kind == "quadratic":
            out["A"] = self.A.tolist()
        return out


def evaluate(r: RewardSpec, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    out = r(x)
    return float(out[0]) if x.ndim <= 1 else out


@dataclass(frozen=True)
class PreferenceWeights:
    """Point on the probability simplex."""

    values: np.ndarray

    def __init__(self, values):
        v = np.atleast_1d(np.asarray(values, dtype=float))
        if v.ndim != 1 or v.size == 0:
            raise ValueError("preference weights must be a nonempty vector")
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-12:
            raise ValueError(f"preference weights {v.tolist()} are not on the simplex")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def __iter__(self):
        return iter(self.values.tolist())

    @classmethod
    def pair(cls, w1: float) -> "PreferenceWeights":
        return cls([w1, 1.0 - w1])


@dataclass(frozen=True)
class RegularizationSpec:
    """KL weight ``alpha`` and user modification factor ``lam``; effective weight ``alpha / lam``."""

    alpha: float
    lam: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")

    @property
    def effective_alpha(self) -> float:
        if self.lam == 0:
            raise ValueError("lambda = 0 selects the pre-trained model; no effective alpha")
        return self.alpha / self.lam


def scalarize(basis: Sequence[RewardSpec], w) -> RewardSpec:
    """Linear scalarization ``r(w) = sum_i w_i r_i``, closed under reward kind."""
    w = w if isinstance(w, PreferenceWeights) else PreferenceWeights(w)
    basis = list(basis)
    if len(basis) != len(w):
        raise ValueError(f"{len(basis)} rewards but {len(w)} weights")
    dims = {r.dim for r in basis}
    if len(dims) != 1:
        raise ValueError(f"basis rewards have mixed dimensions {sorted(dims)}")
    dim = dims.pop()
    wv = w.values
    name = "+".join(f"{wi:g}*{r.name or r.kind}" for wi, r in zip(wv, basis))
    if any(r.kind == "blackbox" for r in basis):
        members = [(wi, r) for wi, r in zip(wv, basis) if wi != 0]

        def fn(x):
            return sum(wi * r(x) for wi, r in members)

        return RewardSpec.blackbox(fn, dim, name=name)
    a = sum(wi * r.a for wi, r in zip(wv, basis))
    b = float(sum(wi * r.b for wi, r in zip(wv, basis)))
    if any(r.kind == "quadratic" for r in basis):
        A = sum(wi * r.A for wi, r in zip(wv, basis) if r.kind == "quadratic")
        return RewardSpec.quadratic(A, a, b, name=name)
    return RewardSpec.linear(a, b, name=name)


# -- built-in black-box catalog -------------------------------------------

def _negdist(center):
    c = np.atleast_1d(np.asarray(center, dtype=float))

    def fn(x):
        return -np.sum((x - c) ** 2, axis=1)

    return RewardSpec.blackbox(fn, c.size, name=f"negdist({','.join(f'{v:g}' for v in c)})")


def _tanh(direction):
    a = np.atleast_1d(np.asarray(direction, dtype=float))

    def fn(x):
        return np.tanh(x @ a)

    return RewardSpec.blackbox(fn, a.size, lipschitz=float(np.linalg.norm(a)),
                               name=f"tanh({','.join(f'{v:g}' for v in a)})")


CATALOG = {"negdist": _negdist, "tanh": _tanh}


def from_catalog(spec: str) -> RewardSpec:
    """Parse ``"name(v1, v2, ...)"`` into a registered black-box reward."""
    m = re.fullmatch(r"\s*(\w+)\s*\(([^)]*)\)\s*", spec)
    if m is None or m.group(1) not in CATALOG:
        raise ValueError(f"unknown catalog reward {spec!r}; known: {sorted(CATALOG)}")
    args = [float(v) for v in m.group(2).split(",") if v.strip()]
    return CATALOG[m.group(1)](args)


def reward_from_dict(d: dict) -> RewardSpec:
    kind = d.get("kind", "linear")
    name = d.get("name", "")
    if kind == "linear":
        return RewardSpec.linear(d["a"], d.get("b", 0.0), name=name)
    if kind == "quadratic":
        return RewardSpec.quadratic(d["A"], d.get("a"), d.get("b", 0.0), name=name)
    if kind == "blackbox":
        return from_catalog(d["catalog"])
    raise ValueError(f"unknown reward kind {kind!r}")
