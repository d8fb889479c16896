"""Acquisition functions, equilibrium search and batch selection.

``u1(x) = <I(x), y>`` is the surrogate mean and
``u2(x) = u1(x) + kappa * |A(x)|^(1/2)`` adds an exploration bonus with
``A(x) = S(x, x) - <I(x), S_x>``.

Both are maximized by damped fixed-point iteration ``x <- x + eta * grad u(x)``
started from every data point. Fixed points of this map are exactly the
stationary points of ``u``; the damping, backtracking and box clipping only
change how the iteration gets there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Callable, Sequence

import numpy as np

from abo import influence, similarity
from abo.influence import SurrogateState

STRATEGIES = ("variance", "value", "two_stage")
UTILITIES = ("u1", "u2")


class AcquisitionError(ValueError):
    pass


@dataclass(frozen=True)
class AcquisitionConfig:
    kappa: float = 2.0
    step: float = 0.1
    max_iters: int = 100
    grad_tol: float = 1e-5
    dedup_tol: float = 1e-3
    variance_floor: float = 1e-9
    batch_size: int = 1
    strategy: str = "variance"
    two_stage_split: float = 0.5
    utility: str = "u2"

    def __post_init__(self):
        if self.kappa < 0:
            raise AcquisitionError("kappa must be >= 0")
        if not self.step > 0:
            raise AcquisitionError("step must be > 0")
        if self.max_iters < 0:
            raise AcquisitionError("max_iters must be >= 0")
        if not self.grad_tol > 0 or not self.dedup_tol > 0:
            raise AcquisitionError("grad_tol and dedup_tol must be > 0")
        if not self.variance_floor > 0:
            raise AcquisitionError("variance_floor must be > 0")
        if self.batch_size < 1:
            raise AcquisitionError("batch_size must be >= 1")
        if self.strategy not in STRATEGIES:
            raise AcquisitionError(f"unknown strategy {self.strategy!r}")
        if not 0 < self.two_stage_split < 1:
            raise AcquisitionError("two_stage_split must be in (0, 1)")
        if self.utility not in UTILITIES:
            raise AcquisitionError(f"unknown utility {self.utility!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise AcquisitionError(f"unknown acquisition keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class EquilibriumPoint:
    location: np.ndarray
    u_value: float
    variance: float
    origin_index: int
    iterations_used: int
    converged: bool
    at_bound: bool = False


# --- acquisition values and gradients ----------------------------------------


def u1(state: SurrogateState, x) -> float:
    return influence.predictive_mean(state, x)


def u2(state: SurrogateState, x, kappa: float) -> float:
    if state.n == 0:
        return kappa * math.sqrt(abs(similarity.eval_self(state.spec, x)))
    s = similarity.similarity_row(state.spec, x, state.points, check=False)
    coef = state.apply_row(s)
    a = similarity.eval_self(state.spec, x) - coef @ s
    return float(coef @ state.values + kappa * math.sqrt(abs(a)))


def grad_u1(state: SurrogateState, x) -> np.ndarray:
    d = np.asarray(x, dtype=float).size
    if state.n == 0:
        return np.zeros(d)
    jac = similarity.row_and_jacobian(state.spec, x, state.points, check=False)[1]
    return jac.T @ state.weights


def grad_u2(state: SurrogateState, x, kappa: float, variance_floor: float = 1e-9) -> np.ndarray:
    """``grad u1 + kappa * sign(A) grad A / (2 max(|A|, floor)^(1/2))``.

    ``grad A = grad S(x, x) - J^T (M + M^T) S_x`` where ``J`` is the Jacobian
    of the similarity row and ``I(x) = S_x M``. ``M`` is symmetric on the
    full-rank path, giving the familiar ``2 J^T M S_x``.
    """
    if kappa == 0:
        return grad_u1(state, x)
    self_grad = similarity.grad_self(state.spec, x)
    if state.n == 0:
        a = similarity.eval_self(state.spec, x)
        g = np.zeros_like(self_grad)
        da = self_grad
    else:
        s, jac = similarity.row_and_jacobian(state.spec, x, state.points, check=False)
        coef = state.apply_row(s)
        a = similarity.eval_self(state.spec, x) - coef @ s
        sym = 2.0 * coef if state.full_rank else coef + state.apply_col(s)
        g = jac.T @ state.weights
        da = self_grad - jac.T @ sym
    return g + kappa * np.sign(a) * da / (2.0 * math.sqrt(max(abs(a), variance_floor)))


# --- fixed-point ascent -------------------------------------------------------


@dataclass(frozen=True)
class Utility:
    """A function to maximize together with its gradient."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    variance: Callable[[np.ndarray], float] | None = None


def make_utility(state: SurrogateState, config: AcquisitionConfig, which: str | None = None) -> Utility:
    which = which or config.utility
    var = lambda x: influence.predictive_variance(state, x)  # noqa: E731
    if which == "u1":
        return Utility(lambda x: u1(state, x), lambda x: grad_u1(state, x), var)
    if which == "u2":
        return Utility(
            lambda x: u2(state, x, config.kappa),
            lambda x: grad_u2(state, x, config.kappa, config.variance_floor),
            var,
        )
    raise AcquisitionError(f"unknown utility {which!r}")


def fixed_point_ascend(
    utility: Utility,
    x0,
    config: AcquisitionConfig,
    lo,
    hi,
    origin_index: int = 0,
    history: list | None = None,
) -> EquilibriumPoint:
    """Damped fixed-point iteration ``x <- clip(x + eta * grad u(x))``.

    A trial step that lowers ``u`` halves ``eta`` and is retried; after an
    accepted step ``eta`` may double again up to ``config.step``. Stops when
    ``||grad u|| <= grad_tol`` (converged), when the gradient projected onto
    the box is that small (a maximum on the boundary, flagged ``at_bound``),
    when ``max_iters`` steps have been accepted, or when no trial step makes
    progress. Only the first case sets ``converged``.

    If ``history`` is given, the value of ``u`` after every accepted step is
    appended to it.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    f = utility.value(x)
    g = utility.grad(x)
    if history is not None:
        history.append(f)
    eta = config.step
    min_eta = config.step * 2.0**-30
    iters = 0
    converged = at_bound = False
    while True:
        if np.linalg.norm(g) <= config.grad_tol:
            converged = True
            break
        blocked = ((x <= lo) & (g < 0)) | ((x >= hi) & (g > 0))
        if np.linalg.norm(np.where(blocked, 0.0, g)) <= config.grad_tol:
            at_bound = True
            break
        if iters >= config.max_iters:
            break
        accepted = False
        while eta >= min_eta:
            xn = np.clip(x + eta * g, lo, hi)
            if np.array_equal(xn, x):
                break
            fn = utility.value(xn)
            if fn >= f:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        x, f = xn, fn
        g = utility.grad(x)
        iters += 1
        if history is not None:
            history.append(f)
        eta = min(2.0 * eta, config.step)
    variance = utility.variance(x) if utility.variance is not None else float("nan")
    return EquilibriumPoint(x, float(f), float(variance), origin_index, iters, converged, at_bound)


def _normalized_distance(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Euclidean distance after mapping the box onto the unit cube."""
    width = hi - lo
    return np.linalg.norm((np.atleast_2d(a) - b) / width, axis=-1)


def equilibrium_set(
    state: SurrogateState,
    config: AcquisitionConfig,
    lo,
    hi,
    which: str | None = None,
) -> list[EquilibriumPoint]:
    """Ascend from every data point and merge equilibria closer than
    ``dedup_tol`` (higher ``u_value`` wins, then lower origin index).
    """
    if state.n == 0:
        raise AcquisitionError("equilibrium_set needs at least one data point")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    utility = make_utility(state, config, which)
    found = [
        fixed_point_ascend(utility, x0, config, lo, hi, origin_index=i)
        for i, x0 in enumerate(state.points)
    ]
    found.sort(key=lambda e: (-e.u_value, e.origin_index))
    kept: list[EquilibriumPoint] = []
    for e in found:
        if kept:
            dist = _normalized_distance(e.location, np.array([k.location for k in kept]), lo, hi)
            if np.any(dist <= config.dedup_tol):
                continue
        kept.append(e)
    kept.sort(key=lambda e: e.origin_index)
    return kept


def active_criterion(config: AcquisitionConfig, round_index: int = 0, total_rounds: int = 1) -> str:
    """Which ranking applies this round: ``variance``, ``u1`` or ``u2``."""
    if config.strategy == "variance":
        return "variance"
    if config.strategy == "value":
        return "u2"
    exploit_rounds = math.ceil(config.two_stage_split * total_rounds)
    return "u1" if round_index < exploit_rounds else "variance"


def select_batch(
    eq: Sequence[EquilibriumPoint],
    state: SurrogateState,
    config: AcquisitionConfig,
    lo,
    hi,
    round_index: int = 0,
    total_rounds: int = 1,
    rng: np.random.Generator | None = None,
) -> list[np.ndarray]:
    """Top ``batch_size`` equilibria under the active criterion.

    Candidates within ``dedup_tol`` of a data point or of an already selected
    candidate are skipped. If nothing survives, ``batch_size`` uniform random
    points are returned instead.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    criterion = active_criterion(config, round_index, total_rounds)
    ordered = sorted(eq, key=lambda e: e.origin_index)
    if criterion == "variance":
        scores = [influence.predictive_variance(state, e.location) for e in ordered]
    elif criterion == "u1":
        scores = [u1(state, e.location) for e in ordered]
    else:
        scores = [u2(state, e.location, config.kappa) for e in ordered]
    rank = sorted(range(len(ordered)), key=lambda i: -scores[i])

    chosen: list[np.ndarray] = []
    for i in rank:
        if len(chosen) == config.batch_size:
            break
        loc = ordered[i].location
        if state.n and np.any(_normalized_distance(loc, state.points, lo, hi) <= config.dedup_tol):
            continue
        if chosen and np.any(_normalized_distance(loc, np.array(chosen), lo, hi) <= config.dedup_tol):
            continue
        chosen.append(loc)
    if not chosen:
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = list(rng.uniform(lo, hi, size=(config.batch_size, lo.size)))
    return chosen
