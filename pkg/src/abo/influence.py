"""Influence-vector surrogate over a similarity Gram matrix.

Given data ``(x_i, y_i)`` and a similarity score ``S``, the influence vector
of a query ``x`` is the least-squares solution of::

    min_I || S_x - I (S + noise * Id) ||^2

When the Gram matrix ``G = S + noise * Id`` is singular we solve the reduced
problem over a row basis ``B`` of ``G`` and scatter the reduced solution back
into the basis positions, leaving zeros elsewhere. The result is
basis-supported rather than minimal norm; both attain the same residual.

Every downstream quantity is linear in ``S_x`` through a fixed map ``M``
(``I(x) = S_x M``), which is what makes closed-form gradients cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from abo import similarity
from abo.similarity import SimilaritySpec

DEFAULT_RANK_TOL = 1e-10


class InfluenceError(ValueError):
    pass


@dataclass(frozen=True)
class BasisCache:
    """Row basis ``B = G[basis_rows]`` stored as ``B = L @ Q``.

    ``Q`` has orthonormal rows and ``L`` is lower triangular with a positive
    diagonal, so ``L`` is the Cholesky factor of ``B B^T``.
    """

    basis_rows: np.ndarray
    B: np.ndarray
    L: np.ndarray
    Q: np.ndarray
    rank_tol: float

    @property
    def rank(self) -> int:
        return int(self.basis_rows.size)


def row_basis(M, rank_tol: float = DEFAULT_RANK_TOL) -> BasisCache:
    """Select a maximal set of linearly independent rows, lowest index first.

    Row ``i`` joins the basis when the norm of its component orthogonal to the
    rows already chosen exceeds ``rank_tol`` times the largest row norm.
    Orthogonalization is modified Gram-Schmidt with one re-orthogonalization
    pass.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InfluenceError(f"row_basis needs a square matrix, got {M.shape}")
    n = M.shape[0]
    norms = np.linalg.norm(M, axis=1) if n else np.zeros(0)
    scale = float(norms.max()) if n else 0.0
    rows: list[int] = []
    qs: list[np.ndarray] = []
    coefs: list[np.ndarray] = []
    if scale > 0:
        for i in range(n):
            v = M[i].copy()
            c = np.zeros(len(qs) + 1)
            for _ in range(2):
                for j, q in enumerate(qs):
                    a = q @ v
                    v -= a * q
                    c[j] += a
            pivot = np.linalg.norm(v)
            if pivot > rank_tol * scale:
                c[-1] = pivot
                rows.append(i)
                qs.append(v / pivot)
                coefs.append(c)
    r = len(rows)
    L = np.zeros((r, r))
    for k, c in enumerate(coefs):
        L[k, : k + 1] = c
    Q = np.array(qs).reshape(r, n)
    basis_rows = np.array(rows, dtype=int)
    return BasisCache(basis_rows, M[basis_rows], L, Q, rank_tol)


@dataclass(frozen=True)
class InfluenceResult:
    coefficients: np.ndarray
    basis_rows: np.ndarray
    residual: float


@dataclass(frozen=True)
class SurrogateState:
    """Dataset, Gram matrix ``S + noise * Id`` and its factorization.

    Immutable; build a new state when data is added.
    """

    spec: SimilaritySpec
    points: np.ndarray
    values: np.ndarray
    gram: np.ndarray
    basis: BasisCache
    _lu: tuple | None = field(default=None, repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def full_rank(self) -> bool:
        return self.basis.rank == self.n

    def apply_row(self, s: np.ndarray) -> np.ndarray:
        """``s @ M``: the influence coefficients of a similarity row ``s``."""
        if self.n == 0:
            return np.zeros(0)
        if self.full_rank:
            # G is symmetric, so s G^-1 = (G^-1 s^T)^T.
            return scipy.linalg.lu_solve(self._lu, s, check_finite=False)
        b = self.basis
        if b.rank == 0:
            return np.zeros(self.n)
        z = scipy.linalg.solve_triangular(b.L, b.Q @ s, trans="T", lower=True)
        out = np.zeros(self.n)
        out[b.basis_rows] = z
        return out

    def apply_col(self, v: np.ndarray) -> np.ndarray:
        """``M @ v``, so that ``<I(x), v> = S_x @ apply_col(v)``."""
        if self.n == 0:
            return np.zeros(0)
        if self.full_rank:
            return scipy.linalg.lu_solve(self._lu, v, check_finite=False)
        b = self.basis
        if b.rank == 0:
            return np.zeros(self.n)
        w = scipy.linalg.solve_triangular(b.L, v[b.basis_rows], lower=True)
        return b.Q.T @ w


def build(
    spec: SimilaritySpec,
    points,
    values,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> SurrogateState:
    values = np.asarray(values, dtype=float).reshape(-1)
    P = np.asarray(points, dtype=float)
    if P.size == 0:
        P = P.reshape(0, P.shape[-1] if P.ndim == 2 else 0)
    if P.ndim != 2:
        raise InfluenceError("points must be a 2-d array (n, d)")
    if P.shape[0] != values.size:
        raise InfluenceError(f"{P.shape[0]} points but {values.size} values")
    if np.any(np.isnan(values)):
        raise InfluenceError("NaN in observed values")
    gram = similarity.similarity_matrix(spec, P) + spec.noise * np.eye(values.size)
    basis = row_basis(gram, rank_tol)
    lu = None
    if values.size and basis.rank == values.size:
        lu = scipy.linalg.lu_factor(gram, check_finite=False)
    state = SurrogateState(spec, P, values, gram, basis, lu)
    # M y, reused by every mean and mean-gradient evaluation.
    object.__setattr__(state, "weights", state.apply_col(values))
    return state


def _influence_from_row(state: SurrogateState, s: np.ndarray) -> InfluenceResult:
    coef = state.apply_row(s)
    if state.n == 0:
        return InfluenceResult(coef, state.basis.basis_rows, 0.0)
    resid = float(np.linalg.norm(s - coef @ state.gram))
    if not np.all(np.isfinite(coef)):
        raise InfluenceError("influence solve failed; check rank_tol")
    return InfluenceResult(coef, state.basis.basis_rows, resid)


def influence_vector(state: SurrogateState, x) -> InfluenceResult:
    s = similarity.similarity_row(state.spec, x, state.points, check=False)
    return _influence_from_row(state, s)


def predictive_mean(state: SurrogateState, x) -> float:
    if state.n == 0:
        return 0.0
    s = similarity.similarity_row(state.spec, x, state.points, check=False)
    return float(state.apply_row(s) @ state.values)


def signed_variance(state: SurrogateState, x) -> float:
    """``S(x, x) - <I(x), S_x>`` before the absolute value."""
    self_sim = similarity.eval_self(state.spec, x)
    if state.n == 0:
        return self_sim
    s = similarity.similarity_row(state.spec, x, state.points, check=False)
    return float(self_sim - state.apply_row(s) @ s)


def predictive_variance(state: SurrogateState, x) -> float:
    return abs(signed_variance(state, x))


def empirical_feature(state: SurrogateState, x, match_tol: float = 0.0) -> np.ndarray:
    """``[S(x, x_i) + noise * [x == x_i]]_i``."""
    s = similarity.similarity_row(state.spec, x, state.points, check=False)
    if state.n:
        hit = np.max(np.abs(state.points - np.asarray(x, dtype=float)), axis=1) <= match_tol
        s = s + state.spec.noise * hit
    return s


# --- exact GP baseline --------------------------------------------------------


def gp_posterior(spec: SimilaritySpec, points, values, noise: float, x) -> tuple[float, float]:
    """Exact GP posterior mean and (absolute) variance at ``x``."""
    P = np.asarray(points, dtype=float)
    y = np.asarray(values, dtype=float).reshape(-1)
    kxx = similarity.eval_self(spec, x)
    if y.size == 0:
        return 0.0, abs(kxx)
    K = similarity.similarity_matrix(spec, P) + noise * np.eye(y.size)
    kx = similarity.similarity_row(spec, x, P)
    try:
        cf = scipy.linalg.cho_factor(K, lower=True)
    except np.linalg.LinAlgError as exc:
        raise InfluenceError("K + noise * Id is singular") from exc
    mean = float(kx @ scipy.linalg.cho_solve(cf, y))
    var = abs(float(kxx - kx @ scipy.linalg.cho_solve(cf, kx)))
    return mean, var


class GaussianProcess:
    """GP posterior with cached Cholesky factor and closed-form gradients."""

    def __init__(self, spec: SimilaritySpec, points, values, noise: float | None = None):
        if spec.variant != "rbf":
            raise InfluenceError("GP baseline requires a positive definite (rbf) kernel")
        self.spec = spec
        self.noise = spec.noise if noise is None else noise
        self.points = np.asarray(points, dtype=float)
        self.values = np.asarray(values, dtype=float).reshape(-1)
        K = similarity.similarity_matrix(spec, self.points) + self.noise * np.eye(self.values.size)
        if self.values.size:
            try:
                self._cf = scipy.linalg.cho_factor(K, lower=True)
            except np.linalg.LinAlgError as exc:
                raise InfluenceError("K + noise * Id is singular") from exc
            self._alpha = scipy.linalg.cho_solve(self._cf, self.values)

    def mean_var(self, x) -> tuple[float, float]:
        kxx = similarity.eval_self(self.spec, x)
        if self.values.size == 0:
            return 0.0, kxx
        kx = similarity.similarity_row(self.spec, x, self.points, check=False)
        return float(kx @ self._alpha), abs(float(kxx - kx @ scipy.linalg.cho_solve(self._cf, kx, check_finite=False)))

    def ucb(self, x, kappa: float) -> float:
        m, v = self.mean_var(x)
        return m + kappa * np.sqrt(v)

    def ucb_grad(self, x, kappa: float, variance_floor: float = 1e-9) -> np.ndarray:
        d = np.asarray(x, dtype=float).size
        if self.values.size == 0:
            return np.zeros(d)
        kx, jac = similarity.row_and_jacobian(self.spec, x, self.points, check=False)
        g = jac.T @ self._alpha
        if kappa:
            w = scipy.linalg.cho_solve(self._cf, kx, check_finite=False)
            a = similarity.eval_self(self.spec, x) - kx @ w
            # K(x, x) is constant for rbf, so only the data term contributes
            da = -2.0 * jac.T @ w
            g = g + kappa * np.sign(a) * da / (2.0 * np.sqrt(max(abs(a), variance_floor)))
        return g


# --- verification reports -----------------------------------------------------


@dataclass
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)


@dataclass
class Report:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, value: float, tol: float) -> None:
        self.checks.append(Check(name, float(value), tol))


def verify_geometric_view(spec: SimilaritySpec, points, values, noise: float, x, tol: float = 1e-8) -> Report:
    """Check the projection view of the GP posterior with Gram arithmetic only.

    The projection coefficients ``d`` minimize::

        J(d) = K~(x, x) - 2 K_x d + d^T K_sigma d,   K~ = K + noise * Id

    whose minimum value is the squared rejection norm ``||R(x)||^2``. The
    stationary point is found through an eigendecomposition of ``K_sigma``,
    independently of the Cholesky route used by :func:`gp_posterior`.

    Checks: (a) ``d`` equals ``K_sigma^-1 K_x``; (b) ``||R||^2 = V + noise``;
    (c) the posterior mean equals ``<d, y>``.
    """
    P = np.asarray(points, dtype=float)
    y = np.asarray(values, dtype=float).reshape(-1)
    report = Report()
    mean, var = gp_posterior(spec, P, y, noise, x)
    kx = similarity.similarity_row(spec, x, P)
    K_sigma = similarity.similarity_matrix(spec, P) + noise * np.eye(y.size)
    evals, U = np.linalg.eigh(K_sigma)
    if y.size and evals.min() <= 0:
        raise InfluenceError("K + noise * Id is singular")
    d = U @ ((U.T @ kx) / evals) if y.size else np.zeros(0)

    closed = scipy.linalg.solve(K_sigma, kx, assume_a="pos") if y.size else np.zeros(0)
    report.add("coefficients", np.max(np.abs(d - closed), initial=0.0), tol)

    # Queries are taken off the data set, so K~(x, x_i) = K(x, x_i).
    r2 = similarity.eval_self(spec, x) + noise - 2.0 * kx @ d + d @ K_sigma @ d
    report.add("rejection_norm", abs(r2 - var - noise), tol)
    report.add("mean", abs(mean - d @ y), tol)
    return report


def verify_empirical_projection(state: SurrogateState, x, tol: float = 1e-8) -> Report:
    """Compare the influence solve with a direct projection of the empirical
    feature onto the span of the data features.

    The oracle is a minimal-norm ``lstsq`` solve, so coefficients are compared
    only when the Gram matrix has full rank; residual norms are always
    compared.
    """
    report = Report()
    if state.n == 0:
        return report
    phi = empirical_feature(state, x)
    ours = _influence_from_row(state, phi)
    oracle, *_ = np.linalg.lstsq(state.gram.T, phi, rcond=None)
    oracle_resid = float(np.linalg.norm(phi - oracle @ state.gram))
    report.add("residual", abs(ours.residual - oracle_resid), tol)
    off_basis = np.setdiff1d(np.arange(state.n), state.basis.basis_rows)
    report.add("zero_fill", float(np.max(np.abs(ours.coefficients[off_basis]), initial=0.0)), 0.0)
    if state.full_rank:
        report.add("coefficients", np.max(np.abs(ours.coefficients - oracle)), tol)
    return report
