"""Similarity scores S(x, x') and their gradients.

Two scores are provided:

``rbf``
    ``exp(-||x - x'||^2 / (2 l^2))``. A positive definite kernel, so the
    influence surrogate built on it reproduces the GP posterior exactly.

``symkl``
    ``const - D_sym(p(.|x), p(.|x'))`` for diagonal Gaussians, where a point
    is laid out as ``[mu_1..mu_k, var_1..var_k]``. The second half holds
    *variances*, not standard deviations. In closed form::

        S = const - 1/4 sum(v/v' + v'/v) - 1/4 sum((mu - mu')^2 (1/v + 1/v'))

    Negative values are clamped to zero; the gradient on the clamped branch
    is the zero vector.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

VARIANTS = ("rbf", "symkl")


class SimilarityError(ValueError):
    """Invalid similarity specification or incompatible input point."""


@dataclass(frozen=True)
class SimilaritySpec:
    """Which score to use, its parameters, and the observation noise level.

    ``const`` is only used by ``symkl``. Leave it as ``None`` and call
    :meth:`resolve` with the search box to get the non-negativity default.
    """

    variant: str = "rbf"
    lengthscale: float = 1.0
    const: float | None = None
    sigma_min: float = 1e-6
    noise: float = 0.0
    dim: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise SimilarityError(f"unknown similarity variant {self.variant!r}")
        if not self.lengthscale > 0:
            raise SimilarityError("lengthscale must be > 0")
        if self.const is not None and not self.const > 0:
            raise SimilarityError("const must be > 0")
        if not self.sigma_min > 0:
            raise SimilarityError("sigma_min must be > 0")
        if not self.noise >= 0:
            raise SimilarityError("noise must be >= 0")
        if self.dim is not None and self.dim < 1:
            raise SimilarityError("dim must be >= 1")

    def resolve(self, lo: Sequence[float], hi: Sequence[float]) -> "SimilaritySpec":
        """Fill in defaults that depend on the search box."""
        if self.variant != "symkl":
            return self
        lo = np.asarray(lo, dtype=float)
        k = lo.size // 2
        const = self.const if self.const is not None else default_const(lo, hi, self.sigma_min)
        return replace(self, const=const, dim=self.dim or k)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "lengthscale": self.lengthscale,
            "const": self.const,
            "sigma_min": self.sigma_min,
            "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilaritySpec":
        known = {"variant", "lengthscale", "const", "sigma_min", "noise", "dim"}
        extra = set(d) - known
        if extra:
            raise SimilarityError(f"unknown similarity keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class GaussianConditional:
    """Sampler for p(omega | x) = N(mean, diag(var))."""

    mean: np.ndarray
    var: np.ndarray
    n_mc: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "var", np.asarray(self.var, dtype=float))
        if self.mean.shape != self.var.shape:
            raise SimilarityError("mean and var must have the same shape")
        if np.any(self.var <= 0):
            raise SimilarityError("variances must be > 0")
        if self.n_mc < 1:
            raise SimilarityError("n_mc must be >= 1")

    @classmethod
    def from_point(cls, x, n_mc: int = 1000, seed: int = 0) -> "GaussianConditional":
        mean, var = split_gaussian(x)
        return cls(mean, var, n_mc=n_mc, seed=seed)

    def log_pdf(self, omega: np.ndarray) -> np.ndarray:
        z = (omega - self.mean) ** 2 / self.var
        return -0.5 * (np.sum(z, axis=-1) + np.sum(np.log(2 * np.pi * self.var)))

    def score(self, omega: np.ndarray) -> np.ndarray:
        """Gradient of log p(omega|x) w.r.t. [mean; var], one row per sample."""
        diff = omega - self.mean
        d_mean = diff / self.var
        d_var = -0.5 / self.var + 0.5 * diff**2 / self.var**2
        return np.concatenate([d_mean, d_var], axis=-1)


def split_gaussian(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] % 2:
        raise SimilarityError("symkl points need an even number of coordinates")
    k = x.shape[-1] // 2
    return x[..., :k], x[..., k:]


def default_const(lo, hi, sigma_min: float = 1e-6) -> float:
    """Smallest const keeping the symkl score non-negative on the box.

    Returns ``k/2 + D_box`` where ``D_box`` is the symmetric KL divergence of
    the most separated corner pair. The closed form is separable and convex
    in each variance, so the maximum sits on a corner.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    mu_lo, v_lo = split_gaussian(lo)
    mu_hi, v_hi = split_gaussian(hi)
    v_lo = np.maximum(v_lo, sigma_min)
    v_hi = np.maximum(v_hi, sigma_min)
    span2 = (mu_hi - mu_lo) ** 2
    worst = np.zeros_like(span2)
    for a in (v_lo, v_hi):
        for b in (v_lo, v_hi):
            q = 0.25 * (a / b + b / a) + 0.25 * span2 * (1 / a + 1 / b)
            worst = np.maximum(worst, q)
    k = span2.size
    d_box = float(np.sum(worst)) - k / 2
    return k / 2 + d_box


@functools.lru_cache(maxsize=64)
def _warn_clamp(spec: SimilaritySpec) -> None:
    logger.warning(
        "symkl similarity dipped below zero with const=%g; clamping to 0", spec.const
    )


def _as_points(spec: SimilaritySpec, points) -> np.ndarray:
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[None, :]
    if spec.variant == "symkl":
        if P.shape[-1] % 2:
            raise SimilarityError("symkl points need an even number of coordinates")
        if spec.dim is not None and P.shape[-1] != 2 * spec.dim:
            raise SimilarityError(
                f"expected {2 * spec.dim} coordinates, got {P.shape[-1]}"
            )
        if P[:, P.shape[-1] // 2 :].min() <= 0:
            raise SimilarityError("symkl variance coordinates must be > 0")
    return P


def _symkl_raw(spec: SimilaritySpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    if spec.const is None:
        raise SimilarityError("symkl const is unresolved; call spec.resolve(lo, hi)")
    k = X.shape[1] // 2
    mx, vx = X[:, None, :k], X[:, None, k:]
    my, vy = Y[None, :, :k], Y[None, :, k:]
    trace = np.sum(vx / vy + vy / vx, axis=-1)
    quad = np.sum((mx - my) ** 2 * (1 / vx + 1 / vy), axis=-1)
    return spec.const - 0.25 * trace - 0.25 * quad


def _matrix(spec: SimilaritySpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    if X.shape[1] != Y.shape[1]:
        raise SimilarityError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.variant == "rbf":
        sq = np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=-1)
        return np.exp(-sq / (2 * spec.lengthscale**2))
    raw = _symkl_raw(spec, X, Y)
    if raw.min() < 0:
        _warn_clamp(spec)
        raw = np.maximum(raw, 0.0)
    return raw


def eval(spec: SimilaritySpec, x, x2) -> float:  # noqa: A001
    """S(x, x2)."""
    X = _as_points(spec, x)
    Y = _as_points(spec, x2)
    return float(_matrix(spec, X, Y)[0, 0])


def eval_self(spec: SimilaritySpec, x) -> float:
    """S(x, x): 1 for rbf, ``const - k/2`` (clamped) for symkl."""
    X = _as_points(spec, x)
    if spec.variant == "rbf":
        return 1.0
    if spec.const is None:
        raise SimilarityError("symkl const is unresolved; call spec.resolve(lo, hi)")
    return max(0.0, spec.const - X.shape[1] / 4)


def similarity_matrix(spec: SimilaritySpec, points) -> np.ndarray:
    P = np.asarray(points, dtype=float)
    if P.size == 0:
        return np.zeros((0, 0))
    P = _as_points(spec, P)
    return _matrix(spec, P, P)


def similarity_row(spec: SimilaritySpec, x, points, check: bool = True) -> np.ndarray:
    """``[S(x, p_i)]_i``. ``check=False`` skips validating ``points``, for
    callers that validated them already (e.g. a built surrogate)."""
    P = np.asarray(points, dtype=float)
    if P.size == 0:
        return np.zeros(0)
    X = _as_points(spec, x)
    if check:
        P = _as_points(spec, P)
    return _matrix(spec, X, P)[0]


def row_and_jacobian(spec: SimilaritySpec, x, points, check: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Similarity row ``[S(x, p_i)]`` and its Jacobian ``dS(x, p_i)/dx`` (n, d)."""
    X = _as_points(spec, x)
    P = np.asarray(points, dtype=float)
    if P.size == 0:
        return np.zeros(0), np.zeros((0, X.shape[1]))
    if check:
        P = _as_points(spec, P)
    if X.shape[1] != P.shape[1]:
        raise SimilarityError(f"dimension mismatch: {X.shape[1]} vs {P.shape[1]}")
    x = X[0]
    if spec.variant == "rbf":
        diff = x[None, :] - P
        s = np.exp(-np.sum(diff**2, axis=1) / (2 * spec.lengthscale**2))
        return s, -diff / spec.lengthscale**2 * s[:, None]

    k = x.size // 2
    mu, v = x[:k], x[k:]
    mu2, v2 = P[:, :k], P[:, k:]
    dmu = mu - mu2
    inv_v, inv_v2 = 1 / v, 1 / v2
    g_mu = -0.5 * dmu * (inv_v + inv_v2)
    # Derivative of the closed form; the +dmu^2/v^2 sign is deliberate.
    g_var = -0.25 * (inv_v2 - v2 * inv_v**2) + 0.25 * dmu**2 * inv_v**2
    jac = np.concatenate([g_mu, g_var], axis=1)
    raw = _symkl_raw(spec, X, P)[0]
    if raw.min() < 0:
        _warn_clamp(spec)
        jac[raw < 0] = 0.0
        raw = np.maximum(raw, 0.0)
    return raw, jac


def row_jacobian(spec: SimilaritySpec, x, points) -> np.ndarray:
    """d S(x, p_i) / dx for every point; shape (n, d)."""
    return row_and_jacobian(spec, x, points)[1]


def grad_x(spec: SimilaritySpec, x, x2) -> np.ndarray:
    """Gradient of S(x, x2) with respect to its first argument."""
    return row_jacobian(spec, x, np.atleast_2d(np.asarray(x2, dtype=float)))[0]


def grad_self(spec: SimilaritySpec, x) -> np.ndarray:
    """Gradient of x -> S(x, x); uses symmetry, so it is 2 * grad_x(x, x)."""
    return 2.0 * grad_x(spec, x, x)


def grad_sym_kl_mc(
    p_x: GaussianConditional,
    p_x2: GaussianConditional,
    return_stderr: bool = False,
):
    """Monte Carlo estimate of d S(x, x') / dx for a symmetric-KL score.

    Uses the score-function identity::

        grad S = 1/2 E_{p(.|x')}[grad log p(.|x)]
                 - 1/2 E_{p(.|x)}[grad log p(.|x) * log(e p(.|x) / p(.|x'))]

    The first expectation draws ``p_x2.n_mc`` samples from p(.|x'), the second
    ``p_x.n_mc`` samples from p(.|x). Randomness comes only from the two
    seeds, so the output is reproducible.
    """
    if p_x.mean.shape != p_x2.mean.shape:
        raise SimilarityError("conditionals have different dimensions")
    rng = np.random.default_rng([p_x.seed, p_x2.seed])
    k = p_x.mean.size

    w2 = p_x2.mean + np.sqrt(p_x2.var) * rng.standard_normal((p_x2.n_mc, k))
    t1 = p_x.score(w2)

    w1 = p_x.mean + np.sqrt(p_x.var) * rng.standard_normal((p_x.n_mc, k))
    log_ratio = 1.0 + p_x.log_pdf(w1) - p_x2.log_pdf(w1)
    t2 = p_x.score(w1) * log_ratio[:, None]

    grad = 0.5 * (t1.mean(axis=0) - t2.mean(axis=0))
    if not return_stderr:
        return grad
    var1 = t1.var(axis=0, ddof=1) / p_x2.n_mc if p_x2.n_mc > 1 else np.zeros(2 * k)
    var2 = t2.var(axis=0, ddof=1) / p_x.n_mc if p_x.n_mc > 1 else np.zeros(2 * k)
    return grad, 0.5 * np.sqrt(var1 + var2)
