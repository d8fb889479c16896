import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abo import similarity as sim
from abo.similarity import GaussianConditional, SimilarityError, SimilaritySpec

RBF = SimilaritySpec("rbf", lengthscale=1.0)


def symkl(const, k):
    return SimilaritySpec("symkl", const=const, dim=k)


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def gauss_points(k, lo=0.1, hi=1.0):
    mu = st.lists(st.floats(-1, 1), min_size=k, max_size=k)
    var = st.lists(st.floats(lo, hi), min_size=k, max_size=k)
    return st.tuples(mu, var).map(lambda t: np.array(t[0] + t[1]))


# --- eval ------------------------------------------------------------------------


def test_rbf_identity():
    x = np.array([0.3, -1.2])
    assert sim.eval(RBF, x, x) == 1.0


def test_rbf_formula():
    spec = SimilaritySpec("rbf", lengthscale=0.7)
    x, y = np.array([0.1, 0.2, 0.3]), np.array([-0.5, 0.0, 1.0])
    assert sim.eval(spec, x, y) == pytest.approx(np.exp(-np.sum((x - y) ** 2) / (2 * 0.49)))


def test_symkl_substitution():
    s = sim.eval(symkl(2.0, 2), [0, 0, 1, 1], [1, 0, 1, 1])
    assert s == pytest.approx(0.5)


def test_symkl_identical_points():
    x = [0.3, -0.2, 0.5, 2.0]
    assert sim.eval(symkl(2.0, 2), x, x) == pytest.approx(1.0)


def test_symkl_variances_not_std():
    # v/v' + v'/v with v=1, v'=4 gives 4.25, the std reading would give 2.5
    s = sim.eval(symkl(10.0, 1), [0, 1], [0, 4])
    assert s == pytest.approx(10 - 0.25 * 4.25)


def test_dimension_mismatch():
    with pytest.raises(SimilarityError):
        sim.eval(RBF, [0, 0], [0, 0, 0])
    with pytest.raises(SimilarityError):
        sim.eval(symkl(2.0, 2), [0, 0, 1], [0, 0, 1])


def test_nonpositive_variance_rejected():
    with pytest.raises(SimilarityError):
        sim.eval(symkl(2.0, 1), [0, 0.0], [0, 1])
    with pytest.raises(SimilarityError):
        sim.eval(symkl(2.0, 1), [0, 1], [0, -1])


def test_unresolved_const():
    with pytest.raises(SimilarityError):
        sim.eval(SimilaritySpec("symkl"), [0, 1], [0, 1])


def test_clamp_logs_once(caplog):
    spec = symkl(1.0, 1)
    with caplog.at_level(logging.WARNING, logger="abo.similarity"):
        a = sim.eval(spec, [0, 1], [5, 1])
        b = sim.eval(spec, [0, 1], [6, 1])
    assert a == 0.0 and b == 0.0
    assert sum("clamping" in r.message for r in caplog.records) <= 1


# --- eval_self ---------------------------------------------------------------------


def test_eval_self_rbf():
    assert sim.eval_self(RBF, np.array([4.0, -3.0])) == 1.0


def test_eval_self_symkl():
    x = [0.1, 0.2, 0.3, 0.4, 1, 1, 1, 1]
    assert sim.eval_self(symkl(3.0, 4), x) == pytest.approx(1.0)
    assert sim.eval_self(symkl(1.0, 4), x) == 0.0


@given(gauss_points(3))
def test_eval_self_matches_eval(x):
    spec = symkl(5.0, 3)
    assert sim.eval_self(spec, x) == pytest.approx(sim.eval(spec, x, x), abs=1e-12)


# --- default const -----------------------------------------------------------------


def test_default_const_keeps_box_nonnegative():
    lo, hi = np.array([-1, -1, 0.05, 0.05]), np.array([1, 1, 1, 1.0])
    spec = SimilaritySpec("symkl").resolve(lo, hi)
    corners = np.array(np.meshgrid(*zip(lo, hi))).reshape(4, -1).T
    raw = sim._symkl_raw(spec, corners, corners)
    assert raw.min() == pytest.approx(0.0, abs=1e-9)
    assert raw.min() >= -1e-9


def test_default_const_acceptance_box():
    lo, hi = [-1, -1, 0.01, 0.01], [1, 1, 1, 1]
    # per coordinate the worst corner pair is v = v' = 0.01 with a mean gap of 2:
    # 1/4 * 2 + 1/4 * 4 * 200 = 200.5, so const = 2 * 200.5
    assert sim.default_const(lo, hi, 1e-2) == pytest.approx(401.0)


def test_default_const_floors_variance():
    assert sim.default_const([0, 0.0], [0, 1.0], 0.5) == pytest.approx(0.25 * (0.5 + 2))


# --- gradients ---------------------------------------------------------------------


def test_grad_stationary_at_identity():
    x = np.array([0.3, -0.1, 0.5, 0.7])
    np.testing.assert_allclose(sim.grad_x(symkl(5.0, 2), x, x), 0.0, atol=1e-15)


def test_grad_substitution():
    g = sim.grad_x(symkl(2.0, 1), [0, 1], [1, 1])
    assert g[0] == pytest.approx(1.0)
    # d/dv of -1/4 (v/v' + v'/v) - 1/4 dmu^2 (1/v + 1/v') at v = v' = 1, dmu = 1
    assert g[1] == pytest.approx(0.25)


def test_grad_zero_on_clamped_branch():
    assert np.all(sim.grad_x(symkl(1.0, 1), [0, 1], [5, 1]) == 0.0)


@settings(max_examples=50, deadline=None)
@given(gauss_points(2, 0.2, 1.0), gauss_points(2, 0.2, 1.0))
def test_symkl_grad_matches_fd(x, y):
    spec = symkl(200.0, 2)
    fd = fd_grad(lambda z: sim.eval(spec, z, y), x)
    g = sim.grad_x(spec, x, y)
    assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1.0)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
)
def test_rbf_grad_matches_fd(x, y):
    spec = SimilaritySpec("rbf", lengthscale=0.8)
    x, y = np.array(x), np.array(y)
    fd = fd_grad(lambda z: sim.eval(spec, z, y), x)
    assert np.linalg.norm(sim.grad_x(spec, x, y) - fd) <= 1e-5 * max(np.linalg.norm(fd), 1.0)


def test_grad_self_matches_fd():
    for spec, x in [(SimilaritySpec("rbf"), np.array([0.2, 0.4])), (symkl(5.0, 2), np.array([0.2, -0.3, 0.4, 0.9]))]:
        fd = fd_grad(lambda z: sim.eval_self(spec, z), x)
        np.testing.assert_allclose(sim.grad_self(spec, x), fd, atol=1e-8)


def test_row_jacobian_shape_and_rows():
    spec = symkl(50.0, 2)
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(-1, 1, (6, 2)), rng.uniform(0.1, 1, (6, 2))])
    x = np.array([0.1, 0.2, 0.3, 0.4])
    s, jac = sim.row_and_jacobian(spec, x, pts)
    assert jac.shape == (6, 4)
    np.testing.assert_array_equal(s, sim.similarity_row(spec, x, pts))
    for i in range(6):
        np.testing.assert_allclose(jac[i], sim.grad_x(spec, x, pts[i]))


# --- MC gradient --------------------------------------------------------------------


def test_mc_grad_deterministic():
    p = GaussianConditional.from_point([0.1, 0.5], n_mc=500, seed=3)
    q = GaussianConditional.from_point([0.4, 0.8], n_mc=500, seed=4)
    assert np.array_equal(sim.grad_sym_kl_mc(p, q), sim.grad_sym_kl_mc(p, q))


def test_mc_grad_identity_is_zero():
    x = [0.2, -0.3, 0.5, 0.8]
    p = GaussianConditional.from_point(x, n_mc=50000, seed=1)
    q = GaussianConditional.from_point(x, n_mc=50000, seed=2)
    g, se = sim.grad_sym_kl_mc(p, q, return_stderr=True)
    assert np.all(np.abs(g) <= 3 * se)


def test_mc_grad_matches_closed_form_single_pair():
    x, y = np.array([0.1, -0.4, 0.5, 0.9]), np.array([0.6, 0.2, 0.3, 0.7])
    closed = sim.grad_x(symkl(100.0, 2), x, y)
    g, se = sim.grad_sym_kl_mc(
        GaussianConditional.from_point(x, 50000, seed=11),
        GaussianConditional.from_point(y, 50000, seed=12),
        return_stderr=True,
    )
    assert np.all(np.abs(g - closed) <= 3 * se)


def test_mc_grad_unbiased_over_seeds():
    x, y = np.array([0.3, 0.2, 0.4, 0.6]), np.array([-0.2, 0.5, 0.8, 0.3])
    closed = sim.grad_x(symkl(100.0, 2), x, y)
    est = np.array([
        sim.grad_sym_kl_mc(
            GaussianConditional.from_point(x, 20000, seed=s),
            GaussianConditional.from_point(y, 20000, seed=1000 + s),
        )
        for s in range(30)
    ])
    pooled = est.std(axis=0, ddof=1) / np.sqrt(30)
    assert np.all(np.abs(est.mean(axis=0) - closed) <= 3 * pooled)


def test_conditional_validation():
    with pytest.raises(SimilarityError):
        GaussianConditional([0.0], [0.0])
    with pytest.raises(SimilarityError):
        GaussianConditional([0.0], [1.0], n_mc=0)
    with pytest.raises(SimilarityError):
        sim.grad_sym_kl_mc(GaussianConditional([0.0], [1.0]), GaussianConditional([0.0, 0.0], [1.0, 1.0]))


# --- matrices and rows ---------------------------------------------------------------


def test_matrix_examples():
    assert sim.similarity_matrix(RBF, [[0.5, 0.5]]).tolist() == [[1.0]]
    np.testing.assert_array_equal(sim.similarity_matrix(RBF, [[1.0, 2.0], [1.0, 2.0]]), np.ones((2, 2)))
    assert sim.similarity_matrix(RBF, np.zeros((0, 2))).shape == (0, 0)


@pytest.mark.parametrize("spec", [RBF, symkl(30.0, 2)])
def test_matrix_symmetric_exactly(spec):
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-1, 1, (20, 2)), rng.uniform(0.1, 1, (20, 2))])
    M = sim.similarity_matrix(spec, pts)
    assert np.array_equal(M, M.T)


def test_row_examples():
    pts = np.array([[0.0, 0.0], [10.0, 10.0], [-10.0, 5.0]])
    row = sim.similarity_row(RBF, pts[0], pts)
    assert row[0] == 1.0 and row[1] < 1e-20 and row[2] < 1e-20
    assert sim.similarity_row(RBF, [0.0, 0.0], np.zeros((0, 2))).shape == (0,)
    M = sim.similarity_matrix(RBF, pts)
    np.testing.assert_array_equal(sim.similarity_row(RBF, pts[2], pts), M[2])


# --- properties ----------------------------------------------------------------------


@settings(max_examples=200)
@given(gauss_points(2, 0.01, 1.0), gauss_points(2, 0.01, 1.0))
def test_symkl_symmetric_and_nonnegative(x, y):
    spec = symkl(3.0, 2)
    a, b = sim.eval(spec, x, y), sim.eval(spec, y, x)
    assert a == b
    assert a >= 0.0


@settings(max_examples=200)
@given(
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
)
def test_rbf_symmetric_and_bounded(x, y):
    a, b = sim.eval(RBF, x, y), sim.eval(RBF, y, x)
    assert a == b
    assert 0.0 <= a <= 1.0


@settings(max_examples=200)
@given(gauss_points(2, 0.05, 1.0), gauss_points(2, 0.05, 1.0))
def test_symkl_self_dominance(x, y):
    spec = SimilaritySpec("symkl", sigma_min=0.05).resolve([-1, -1, 0.05, 0.05], [1, 1, 1, 1])
    s = sim.eval(spec, x, y)
    assert s <= sim.eval_self(spec, x) + 1e-9
    if not np.allclose(x, y, atol=1e-6):
        assert s < sim.eval_self(spec, x)


def test_spec_roundtrip_and_validation():
    spec = SimilaritySpec("symkl", const=4.0, sigma_min=0.01, noise=0.1)
    assert SimilaritySpec.from_dict(spec.to_dict()) == SimilaritySpec("symkl", const=4.0, sigma_min=0.01, noise=0.1)
    for bad in [dict(variant="poly"), dict(lengthscale=0.0), dict(const=-1.0), dict(sigma_min=0.0), dict(noise=-0.1)]:
        with pytest.raises(SimilarityError):
            SimilaritySpec(**bad)
    with pytest.raises(SimilarityError):
        SimilaritySpec.from_dict({"variant": "rbf", "bogus": 1})
