"""Black-box objectives, all posed as maximization.

``mc_expectation`` reads ``x`` as ``[mu; var]`` of a diagonal Gaussian and
returns a Monte Carlo estimate of ``E_{omega ~ N(mu, diag(var))} f(omega, x)``.
The second half of ``x`` holds variances, matching the symkl similarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field
from typing import Callable

import numpy as np

VARIANTS = ("quadratic", "branin_negated", "mc_expectation")

BRANIN_MIN = 0.39788735772973816
BRANIN_ARGMIN = ((-math.pi, 12.275), (math.pi, 2.275), (3 * math.pi, 2.475))
BRANIN_BOX = ((-5.0, 0.0), (10.0, 15.0))


class ObjectiveError(ValueError):
    pass


def _neg_sq_norm(omega: np.ndarray, x: np.ndarray) -> np.ndarray:
    return -np.sum(omega**2, axis=-1)


INNER: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "neg_sq_norm": _neg_sq_norm,
}


@dataclass(frozen=True)
class ObjectiveSpec:
    variant: str = "quadratic"
    center: tuple[float, ...] = field(default=())
    inner: str = "neg_sq_norm"
    n_mc: int = 1000
    seed: int = 0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ObjectiveError(f"unknown objective variant {self.variant!r}")
        if self.n_mc < 1:
            raise ObjectiveError("n_mc must be >= 1")
        if self.noise_std < 0:
            raise ObjectiveError("noise_std must be >= 0")
        if self.variant == "mc_expectation" and self.inner not in INNER:
            raise ObjectiveError(f"unknown inner function {self.inner!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["center"] = list(self.center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ObjectiveError(f"unknown objective keys: {sorted(extra)}")
        return cls(**d)


def branin(x) -> float:
    x1, x2 = float(x[0]), float(x[1])
    b = 5.1 / (4 * math.pi**2)
    c = 5 / math.pi
    t = 1 / (8 * math.pi)
    return (x2 - b * x1**2 + c * x1 - 6) ** 2 + 10 * (1 - t) * math.cos(x1) + 10


def evaluate(spec: ObjectiveSpec, x, round_seed: int = 0) -> float:
    """Evaluate the objective; deterministic in ``(spec, x, round_seed)``."""
    x = np.asarray(x, dtype=float)
    if spec.variant == "quadratic":
        c = np.asarray(spec.center, dtype=float) if spec.center else np.zeros_like(x)
        if c.shape != x.shape:
            raise ObjectiveError(f"center has {c.size} coordinates, x has {x.size}")
        value = -float(np.sum((x - c) ** 2))
    elif spec.variant == "branin_negated":
        if x.size != 2:
            raise ObjectiveError("branin is two-dimensional")
        value = -branin(x)
    else:
        if x.size % 2:
            raise ObjectiveError("mc_expectation points need an even number of coordinates")
        k = x.size // 2
        mu, var = x[:k], x[k:]
        if np.any(var <= 0):
            raise ObjectiveError("variance coordinates must be > 0")
        rng = np.random.default_rng([spec.seed, round_seed, 0])
        omega = mu + np.sqrt(var) * rng.standard_normal((spec.n_mc, k))
        value = float(np.mean(INNER[spec.inner](omega, x)))
    if spec.noise_std > 0:
        value += float(np.random.default_rng([spec.seed, round_seed, 1]).normal(0.0, spec.noise_std))
    return value


def make_objective(spec: ObjectiveSpec) -> Callable[[np.ndarray, int], float]:
    """Callable ``f(x, seed)`` as consumed by the optimizer loops."""

    def objective(x, seed: int = 0) -> float:
        return evaluate(spec, x, seed)

    return objective


def analytic_optimum(spec: ObjectiveSpec, lo=None, hi=None) -> tuple[np.ndarray, float]:
    """Known maximizer and maximum, ignoring observation noise."""
    if spec.variant == "quadratic":
        return np.asarray(spec.center, dtype=float), 0.0
    if spec.variant == "branin_negated":
        return np.array(BRANIN_ARGMIN[1]), -BRANIN_MIN
    if spec.inner != "neg_sq_norm":
        raise ObjectiveError(f"no analytic optimum for inner function {spec.inner!r}")
    if lo is None or hi is None:
        raise ObjectiveError("mc_expectation optimum depends on the box; pass lo and hi")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    k = lo.size // 2
    mu = np.clip(0.0, lo[:k], hi[:k])
    var = lo[k:]
    return np.concatenate([mu, var]), -float(np.sum(mu**2) + np.sum(var))
