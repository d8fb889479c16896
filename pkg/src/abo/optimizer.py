"""Outer optimization loops: ABO, GP-UCB and uniform random search.

Every loop is a pure function of ``(objective, config)``. Objectives are
called as ``objective(x, eval_seed)`` where ``eval_seed`` is derived from the
run seed and the evaluation index, so stochastic objectives stay
reproducible. Budgets count evaluations; the last batch is truncated to fit.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from abo import acquisition, influence
from abo.acquisition import AcquisitionConfig, Utility
from abo.similarity import SimilaritySpec

logger = logging.getLogger(__name__)

METHODS = ("abo", "gp_ucb", "random")

Objective = Callable[[np.ndarray, int], float]


class ConfigError(ValueError):
    pass


class OptimizationAborted(RuntimeError):
    """The objective returned NaN; ``history`` holds everything up to it."""

    def __init__(self, message: str, history: "RunHistory"):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class OptimizerConfig:
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    budget: int = 30
    init_design_size: int = 5
    seed: int = 0
    method: str = "abo"
    similarity: SimilaritySpec = field(default_factory=SimilaritySpec)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    rank_tol: float = influence.DEFAULT_RANK_TOL
    gp_random_starts: int = 10
    normalize_y: bool = True

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if len(lo) != len(hi) or not lo:
            raise ConfigError("lo and hi must be non-empty and of equal length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ConfigError("need lo < hi in every dimension")
        if self.init_design_size < 1 or self.budget < self.init_design_size:
            raise ConfigError("need budget >= init_design_size >= 1")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method == "gp_ucb" and self.similarity.variant != "rbf":
            raise ConfigError("gp_ucb needs the rbf similarity")
        if self.similarity.variant == "symkl":
            if len(lo) % 2:
                raise ConfigError("symkl domains need an even number of coordinates")
            k = len(lo) // 2
            if any(v <= 0 for v in hi[k:]):
                raise ConfigError("variance upper bounds must be > 0")

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        """The search box; variance coordinates are floored at ``sigma_min``."""
        lo = np.array(self.lo)
        hi = np.array(self.hi)
        if self.similarity.variant == "symkl":
            k = lo.size // 2
            lo[k:] = np.maximum(lo[k:], self.similarity.sigma_min)
        return lo, hi


@dataclass
class IterationRecord:
    round: int
    points: list[list[float]]
    values: list[float]
    best_so_far: float
    eq_count: int = 0
    wall_ms: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "points": self.points,
            "values": self.values,
            "best_so_far": self.best_so_far,
            "eq_count": self.eq_count,
            "wall_ms": self.wall_ms,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IterationRecord":
        return cls(
            round=int(d["round"]),
            points=[[float(v) for v in p] for p in d["points"]],
            values=[float(v) for v in d["values"]],
            best_so_far=float(d["best_so_far"]),
            eq_count=int(d.get("eq_count", 0)),
            wall_ms=float(d.get("wall_ms", 0.0)),
            diagnostics=dict(d.get("diagnostics", {})),
        )


@dataclass
class RunHistory:
    records: list[IterationRecord] = field(default_factory=list)

    @property
    def evaluations(self) -> int:
        return sum(len(r.values) for r in self.records)

    @property
    def best(self) -> float:
        return self.records[-1].best_so_far if self.records else -math.inf

    def all_points(self) -> np.ndarray:
        return np.array([p for r in self.records for p in r.points])

    def all_values(self) -> np.ndarray:
        return np.array([v for r in self.records for v in r.values])


def eval_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


class _Runner:
    """Shared bookkeeping: evaluation, best-so-far, NaN abort."""

    def __init__(self, objective: Objective, config: OptimizerConfig):
        self.objective = objective
        self.config = config
        self.lo, self.hi = config.box
        self.rng = np.random.default_rng(config.seed)
        self.history = RunHistory()
        self.X: list[np.ndarray] = []
        self.y: list[float] = []

    @property
    def remaining(self) -> int:
        return self.config.budget - len(self.y)

    def targets(self) -> np.ndarray:
        """Observed values, standardized when ``normalize_y`` is set."""
        y = np.array(self.y)
        if not self.config.normalize_y or y.size < 2:
            return y
        std = y.std()
        return (y - y.mean()) / std if std > 0 else y - y.mean()

    def uniform(self, n: int) -> np.ndarray:
        return self.rng.uniform(self.lo, self.hi, size=(n, self.lo.size))

    def evaluate(self, batch, round_index: int, started: float, eq_count: int = 0, **diag) -> None:
        batch = [np.clip(np.asarray(x, dtype=float), self.lo, self.hi) for x in batch][: self.remaining]
        values = []
        for x in batch:
            v = float(self.objective(x, eval_seed(self.config.seed, len(self.y))))
            values.append(v)
            if math.isnan(v):
                diag["status"] = "nan_abort"
                diag["nan_point"] = x.tolist()
                break
            self.X.append(x)
            self.y.append(v)
        best = max(self.y) if self.y else -math.inf
        rec = IterationRecord(
            round=round_index,
            points=[x.tolist() for x in batch[: len(values)]],
            values=values,
            best_so_far=best,
            eq_count=eq_count,
            wall_ms=(time.perf_counter() - started) * 1e3,
            diagnostics=diag,
        )
        self.history.records.append(rec)
        if diag.get("status") == "nan_abort":
            raise OptimizationAborted(
                f"objective returned NaN at evaluation {len(self.y)}", self.history
            )

    def initial_design(self) -> None:
        started = time.perf_counter()
        self.evaluate(list(self.uniform(self.config.init_design_size)), 0, started)

    @property
    def total_rounds(self) -> int:
        rest = self.config.budget - self.config.init_design_size
        return math.ceil(rest / self.config.acquisition.batch_size)


def run_abo(objective: Objective, config: OptimizerConfig) -> RunHistory:
    run = _Runner(objective, config)
    acq = config.acquisition
    spec = config.similarity.resolve(run.lo, run.hi)
    run.initial_design()
    round_index = 0
    while run.remaining > 0:
        round_index += 1
        started = time.perf_counter()
        state = influence.build(spec, np.array(run.X), run.targets(), config.rank_tol)
        eq = acquisition.equilibrium_set(state, acq, run.lo, run.hi)
        batch = acquisition.select_batch(
            eq, state, acq, run.lo, run.hi,
            round_index=round_index - 1, total_rounds=run.total_rounds, rng=run.rng,
        )
        run.evaluate(
            batch, round_index, started,
            eq_count=len(eq),
            eq_converged=sum(e.converged for e in eq),
            rank=state.basis.rank,
            criterion=acquisition.active_criterion(acq, round_index - 1, run.total_rounds),
        )
    return run.history


def run_gp_ucb(objective: Objective, config: OptimizerConfig) -> RunHistory:
    """Sequential GP-UCB; the UCB is maximized by damped gradient ascent from
    every data point plus ``gp_random_starts`` random starts."""
    if config.similarity.variant != "rbf":
        raise ConfigError("gp_ucb needs the rbf similarity")
    run = _Runner(objective, config)
    acq = replace(config.acquisition, batch_size=1)
    spec = config.similarity
    run.initial_design()
    round_index = 0
    while run.remaining > 0:
        round_index += 1
        started = time.perf_counter()
        gp = influence.GaussianProcess(spec, np.array(run.X), run.targets())
        utility = Utility(
            lambda x: gp.ucb(x, acq.kappa),
            lambda x: gp.ucb_grad(x, acq.kappa, acq.variance_floor),
        )
        starts = np.vstack([np.array(run.X), run.uniform(config.gp_random_starts)])
        ends = [acquisition.fixed_point_ascend(utility, x0, acq, run.lo, run.hi, i) for i, x0 in enumerate(starts)]
        ends.sort(key=lambda e: (-e.u_value, e.origin_index))
        data = np.array(run.X)
        pick = None
        for e in ends:
            if not np.any(acquisition._normalized_distance(e.location, data, run.lo, run.hi) <= acq.dedup_tol):
                pick = e.location
                break
        fallback = pick is None
        if fallback:
            pick = run.uniform(1)[0]
        run.evaluate([pick], round_index, started, eq_count=len(ends), fallback=fallback)
    return run.history


def run_random(objective: Objective, config: OptimizerConfig) -> RunHistory:
    run = _Runner(objective, config)
    run.initial_design()
    round_index = 0
    while run.remaining > 0:
        round_index += 1
        started = time.perf_counter()
        n = min(config.acquisition.batch_size, run.remaining)
        run.evaluate(list(run.uniform(n)), round_index, started)
    return run.history


RUNNERS = {"abo": run_abo, "gp_ucb": run_gp_ucb, "random": run_random}


def run(objective: Objective, config: OptimizerConfig) -> RunHistory:
    return RUNNERS[config.method](objective, config)
