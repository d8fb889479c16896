"""Self-checking numerical suites behind ``abo verify``.

Every suite draws its instances from a fixed seed and compares the library
against an independent route: a direct dense solve, a minimal-norm
``lstsq`` projection, central finite differences, or the closed-form
similarity gradient. Suites return :class:`SuiteResult` objects; nothing here
raises on a failed check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from abo import acquisition, influence, similarity
from abo.acquisition import AcquisitionConfig
from abo.similarity import GaussianConditional, SimilaritySpec

SYMKL_LO = np.array([-1.0, -1.0, 0.05, 0.05])
SYMKL_HI = np.array([1.0, 1.0, 1.0, 1.0])


@dataclass
class SuiteResult:
    name: str
    checks: list[tuple[str, bool, str]] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def add(self, label: str, ok: bool, detail: str = "") -> None:
        self.checks.append((label, bool(ok), detail))


# --- instance generators -------------------------------------------------------


@dataclass
class Instance:
    spec: SimilaritySpec
    points: np.ndarray
    values: np.ndarray
    query: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def rbf_instance(rng: np.random.Generator, noise=(0.01, 0.1), d_max: int = 5, n_max: int = 20) -> Instance:
    d = int(rng.integers(1, d_max + 1))
    n = int(rng.integers(1, n_max + 1))
    lo, hi = -np.ones(d), np.ones(d)
    spec = SimilaritySpec("rbf", lengthscale=float(rng.uniform(0.3, 1.5)), noise=float(rng.choice(noise)))
    return Instance(spec, rng.uniform(lo, hi, (n, d)), rng.normal(size=n), rng.uniform(lo, hi), lo, hi)


def symkl_instance(rng: np.random.Generator, n: int, noise: float = 0.0) -> Instance:
    spec = SimilaritySpec("symkl", noise=noise).resolve(SYMKL_LO, SYMKL_HI)
    return Instance(
        spec,
        rng.uniform(SYMKL_LO, SYMKL_HI, (n, 4)),
        rng.normal(size=n),
        rng.uniform(SYMKL_LO, SYMKL_HI),
        SYMKL_LO,
        SYMKL_HI,
    )


def deficient_instance(rng: np.random.Generator, kind: str) -> Instance:
    """Noise-free instance whose Gram matrix is singular.

    ``duplicate``: rbf data with repeated points (identical rows).
    ``finite_rank``: symkl data with more points than the score's feature
    rank, so rows are linearly dependent without being identical.
    """
    if kind == "duplicate":
        # distinct points are kept well conditioned so that the exact
        # duplicates are the only source of deficiency
        while True:
            base = rbf_instance(rng, noise=(0.0,), n_max=8)
            if np.linalg.cond(similarity.similarity_matrix(base.spec, base.points)) < 1e6:
                break
        n = base.points.shape[0]
        extra = base.points[rng.integers(0, n, size=int(rng.integers(1, n + 2)))]
        pts = np.vstack([base.points, extra])
        rng.shuffle(pts)
        return Instance(base.spec, pts, rng.normal(size=len(pts)), base.query, base.lo, base.hi)
    return symkl_instance(rng, n=int(rng.integers(14, 25)))


def _rel_err(g: np.ndarray, ref: np.ndarray) -> float:
    return float(np.linalg.norm(g - ref) / max(np.linalg.norm(ref), 1e-6))


def central_difference(fun, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return out


# --- suites ----------------------------------------------------------------------


def gp_equivalence(n_instances: int = 100, tol: float = 1e-6, seed: int = 0) -> SuiteResult:
    res = SuiteResult("gp-equivalence")
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_mean = worst_var = 0.0
    for _ in range(n_instances):
        inst = rbf_instance(rng)
        state = influence.build(inst.spec, inst.points, inst.values)
        K = similarity.similarity_matrix(inst.spec, inst.points) + inst.spec.noise * np.eye(len(inst.values))
        k = similarity.similarity_row(inst.spec, inst.query, inst.points)
        gp_mean = k @ np.linalg.solve(K, inst.values)
        gp_var = abs(1.0 - k @ np.linalg.solve(K, k))
        worst_mean = max(worst_mean, abs(influence.predictive_mean(state, inst.query) - gp_mean))
        worst_var = max(worst_var, abs(influence.predictive_variance(state, inst.query) - gp_var))
    res.seconds = time.perf_counter() - t0
    res.add("max |mean - gp mean|", worst_mean <= tol, f"{worst_mean:.3e} <= {tol:g}")
    res.add("max |var - gp var|", worst_var <= tol, f"{worst_var:.3e} <= {tol:g}")
    return res


def geometric_view(n_instances: int = 100, tol: float = 1e-8, seed: int = 0) -> SuiteResult:
    res = SuiteResult("geometric-view")
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for _ in range(n_instances):
        inst = rbf_instance(rng)
        rep = influence.verify_geometric_view(inst.spec, inst.points, inst.values, inst.spec.noise, inst.query, tol)
        for c in rep.checks:
            worst[c.name] = max(worst.get(c.name, 0.0), c.value)
    res.seconds = time.perf_counter() - t0
    for name, value in worst.items():
        res.add(name, value <= tol, f"{value:.3e} <= {tol:g}")
    return res


def rank_deficient(n_instances: int = 50, tol: float = 1e-8, seed: int = 0) -> SuiteResult:
    res = SuiteResult("rank-deficient")
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_resid = worst_proj = worst_fill = 0.0
    deficient = 0
    for i in range(n_instances):
        inst = deficient_instance(rng, "duplicate" if i % 2 == 0 else "finite_rank")
        state = influence.build(inst.spec, inst.points, inst.values)
        deficient += state.basis.rank < state.n
        out = influence.influence_vector(state, inst.query)
        s = similarity.similarity_row(inst.spec, inst.query, inst.points)
        pinv = np.linalg.pinv(state.gram.T) @ s
        oracle = np.linalg.norm(s - pinv @ state.gram)
        scale = max(1.0, float(np.abs(state.gram).max()))
        worst_resid = max(worst_resid, abs(out.residual - oracle) / scale)
        off = np.setdiff1d(np.arange(state.n), out.basis_rows)
        worst_fill = max(worst_fill, float(np.max(np.abs(out.coefficients[off]), initial=0.0)))
        rep = influence.verify_empirical_projection(state, inst.query, tol * scale)
        worst_proj = max(worst_proj, next(c.value for c in rep.checks if c.name == "residual") / scale)
    res.seconds = time.perf_counter() - t0
    res.add("instances are rank deficient", deficient == n_instances, f"{deficient}/{n_instances}")
    res.add("residual vs pinv oracle", worst_resid <= tol, f"{worst_resid:.3e} <= {tol:g} (relative to max |G|)")
    res.add("zero fill exact", worst_fill == 0.0, f"max off-basis |I_i| = {worst_fill:g}")
    res.add("empirical projection residual", worst_proj <= tol, f"{worst_proj:.3e} <= {tol:g} (relative to max |G|)")
    return res


def _interior(rng, lo, hi, margin: float = 0.05):
    w = hi - lo
    return rng.uniform(lo + margin * w, hi - margin * w)


def gradients(
    n_points: int = 50,
    tol: float = 1e-4,
    mc_seeds: int = 30,
    mc_samples: int = 20000,
    seed: int = 0,
) -> SuiteResult:
    res = SuiteResult("gradients")
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()

    spec = SimilaritySpec("symkl").resolve(SYMKL_LO, SYMKL_HI)
    worst = 0.0
    for _ in range(n_points):
        a, b = _interior(rng, SYMKL_LO, SYMKL_HI), _interior(rng, SYMKL_LO, SYMKL_HI)
        fd = central_difference(lambda z: similarity.eval(spec, z, b), a)
        worst = max(worst, _rel_err(similarity.grad_x(spec, a, b), fd))
    res.add("symkl grad S vs finite differences", worst <= tol, f"{worst:.3e} <= {tol:g}")

    worst1 = worst2 = 0.0
    checked2 = 0
    floor = AcquisitionConfig().variance_floor
    for i in range(n_points):
        if i % 3 == 0:
            inst = symkl_instance(rng, n=int(rng.integers(3, 20)), noise=0.5)
        elif i % 3 == 1:
            inst = rbf_instance(rng)
        else:
            inst = deficient_instance(rng, "duplicate")
        state = influence.build(inst.spec, inst.points, inst.values)
        x = _interior(rng, inst.lo, inst.hi)
        fd1 = central_difference(lambda z: acquisition.u1(state, z), x)
        worst1 = max(worst1, _rel_err(acquisition.grad_u1(state, x), fd1))
        if abs(influence.signed_variance(state, x)) >= 10 * floor:
            fd2 = central_difference(lambda z: acquisition.u2(state, z, 2.0), x)
            worst2 = max(worst2, _rel_err(acquisition.grad_u2(state, x, 2.0, floor), fd2))
            checked2 += 1
    res.add("grad u1 vs finite differences", worst1 <= tol, f"{worst1:.3e} <= {tol:g}")
    res.add("grad u2 vs finite differences", worst2 <= tol, f"{worst2:.3e} <= {tol:g} ({checked2} points)")

    a, b = _interior(rng, SYMKL_LO, SYMKL_HI), _interior(rng, SYMKL_LO, SYMKL_HI)
    closed = similarity.grad_x(spec, a, b)
    ests = np.array([
        similarity.grad_sym_kl_mc(
            GaussianConditional.from_point(a, mc_samples, seed=s),
            GaussianConditional.from_point(b, mc_samples, seed=10_000 + s),
        )
        for s in range(mc_seeds)
    ])
    pooled_se = ests.std(axis=0, ddof=1) / np.sqrt(mc_seeds)
    z = np.abs(ests.mean(axis=0) - closed) / pooled_se
    res.add("MC gradient within 3 pooled SE", bool(np.all(z <= 3.0)), f"max z = {z.max():.2f}")
    res.seconds = time.perf_counter() - t0
    return res


def fixed_point(n_instances: int = 20, seed: int = 0) -> SuiteResult:
    res = SuiteResult("fixed-point")
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    bad_conv = bad_bound = bad_mono = bad_count = 0
    total = conv = bound = 0
    for i in range(n_instances):
        inst = rbf_instance(rng, n_max=15) if i % 2 == 0 else symkl_instance(rng, n=int(rng.integers(2, 15)), noise=0.5)
        config = AcquisitionConfig(step=0.1 if i % 2 == 0 else 0.01, max_iters=300, grad_tol=1e-4)
        state = influence.build(inst.spec, inst.points, inst.values)
        utility = acquisition.make_utility(state, config, "u2" if i % 4 < 2 else "u1")
        for j, x0 in enumerate(state.points):
            trace: list[float] = []
            e = acquisition.fixed_point_ascend(utility, x0, config, inst.lo, inst.hi, j, history=trace)
            total += 1
            if e.converged:
                conv += 1
                if np.linalg.norm(utility.grad(e.location)) > config.grad_tol:
                    bad_conv += 1
            if e.at_bound:
                bound += 1
                g = utility.grad(e.location)
                blocked = ((e.location <= inst.lo) & (g < 0)) | ((e.location >= inst.hi) & (g > 0))
                if np.linalg.norm(np.where(blocked, 0.0, g)) > config.grad_tol:
                    bad_bound += 1
            if np.any(np.diff(trace) < 0):
                bad_mono += 1
        eq = acquisition.equilibrium_set(state, config, inst.lo, inst.hi)
        bad_count += len(eq) > state.n
    res.seconds = time.perf_counter() - t0
    res.add("converged => ||grad u|| <= grad_tol", bad_conv == 0, f"{conv}/{total} converged, {bad_conv} violations")
    res.add("at_bound => projected ||grad u|| <= grad_tol", bad_bound == 0, f"{bound}/{total} on the boundary, {bad_bound} violations")
    res.add("accepted steps monotone", bad_mono == 0, f"{bad_mono} violations")
    res.add("|EQ| <= n", bad_count == 0, f"{bad_count} violations")
    return res


SUITES = {
    "gp-equivalence": gp_equivalence,
    "geometric-view": geometric_view,
    "rank-deficient": rank_deficient,
    "gradients": gradients,
    "fixed-point": fixed_point,
}


def run_suites(names: list[str]) -> list[SuiteResult]:
    if names == ["all"]:
        names = list(SUITES)
    return [SUITES[n]() for n in names]
