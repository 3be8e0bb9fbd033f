import numpy as np
import pytest
from conftest import random_spd
from hypothesis import given
from hypothesis import strategies as st

from logos_gpo import autodiff as ad
from logos_gpo.exceptions import DimensionMismatch, NotPositiveDefinite
from logos_gpo.linalg import (
    BandedFactor,
    band_cholesky,
    band_from_dense,
    band_matvec,
    band_to_dense,
    cholesky,
    jitter_schedule,
    kron_matvec,
    kron_solve,
    robust_cholesky,
    tri_solve,
)


def test_cholesky_identity():
    np.testing.assert_array_equal(cholesky(np.eye(3)), np.eye(3))


def test_cholesky_two_by_two():
    L = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], rtol=0, atol=1e-15)


def test_cholesky_reconstructs_random_spd(rng):
    A = random_spd(rng, 6)
    L = cholesky(A)
    assert np.linalg.norm(L @ L.T - A) / np.linalg.norm(A) < 1e-10
    assert np.all(np.diag(L) > 0)


@given(st.integers(1, 12), st.floats(0.0, 1e-2), st.integers(0, 2**32 - 1))
def test_cholesky_with_jitter_reconstructs(n, jitter, seed):
    A = random_spd(np.random.default_rng(seed), n)
    L = cholesky(A, jitter)
    assert np.linalg.norm(L @ L.T - (A + jitter * np.eye(n))) / np.linalg.norm(A) < 1e-8


def test_cholesky_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.diag([1.0, -1.0]))


def test_cholesky_rejects_non_square():
    with pytest.raises(DimensionMismatch):
        cholesky(np.ones((2, 3)))


def test_jitter_escalates_by_decades():
    levels = jitter_schedule(2.0, 1e-6, 1e-2)
    np.testing.assert_allclose(levels, 2.0 * np.array([1e-6, 1e-5, 1e-4, 1e-3, 1e-2]))


def test_robust_cholesky_repairs_singular_matrix():
    A = np.ones((3, 3))
    L, jit = robust_cholesky(A)
    assert jit > 0
    np.testing.assert_allclose(L @ L.T, A + jit * np.eye(3), atol=1e-12)


def test_robust_cholesky_gives_up_on_strongly_indefinite():
    with pytest.raises(NotPositiveDefinite):
        robust_cholesky(np.diag([1.0, -5.0]))


def test_tri_solve_identity():
    np.testing.assert_array_equal(tri_solve(np.eye(3), np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])


def test_tri_solve_twice_solves_system(rng):
    A = random_spd(rng, 7)
    b = rng.standard_normal(7)
    L = cholesky(A)
    x = tri_solve(L, tri_solve(L, b), transposed=True)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-9


def test_tri_solve_singular_factor():
    L = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(np.linalg.LinAlgError):
        tri_solve(L, np.ones(2))


def test_tri_solve_shape_check():
    with pytest.raises(DimensionMismatch):
        tri_solve(np.eye(3), np.ones(4))


def test_kron_matvec_identity():
    v = np.arange(6.0)
    np.testing.assert_array_equal(kron_matvec(np.eye(2), np.eye(3), v), v)


def test_kron_matvec_scalar_block():
    np.testing.assert_array_equal(kron_matvec(np.array([[2.0]]), np.eye(3), np.ones(3)), [2.0, 2.0, 2.0])


def test_kron_matvec_matches_dense(rng):
    A, B, v = rng.standard_normal((3, 3)), rng.standard_normal((4, 4)), rng.standard_normal(12)
    np.testing.assert_allclose(kron_matvec(A, B, v), np.kron(A, B) @ v, rtol=1e-12, atol=1e-13)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_kron_matvec_property(n, m, seed):
    r = np.random.default_rng(seed)
    A, B, v = r.standard_normal((n, n)), r.standard_normal((m, m)), r.standard_normal(n * m)
    want = np.kron(A, B) @ v
    assert np.linalg.norm(kron_matvec(A, B, v) - want) <= 1e-12 * max(np.linalg.norm(want), 1e-300) + 1e-14


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_kron_solve_matches_dense_inverse(n, m, seed):
    r = np.random.default_rng(seed)
    A, B, v = random_spd(r, n), random_spd(r, m), r.standard_normal(n * m)
    x = kron_solve(np.linalg.cholesky(A), np.linalg.cholesky(B), v)
    want = np.linalg.solve(np.kron(A, B), v)
    assert np.linalg.norm(x - want) / np.linalg.norm(want) < 1e-8


def test_kron_matvec_length_check():
    with pytest.raises(DimensionMismatch):
        kron_matvec(np.eye(2), np.eye(3), np.ones(5))


@given(st.integers(2, 20), st.integers(0, 6), st.integers(0, 2**32 - 1))
def test_banded_cholesky_matches_dense(n, b, seed):
    r = np.random.default_rng(seed)
    b = min(b, n - 1)
    A = random_spd(r, n)
    mask = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) <= b
    A = np.where(mask, A, 0.0) + n * np.eye(n)  # diagonally dominant, stays SPD after masking
    band = band_from_dense(A, b)
    L = band_cholesky(band)
    np.testing.assert_allclose(band_to_dense(L), np.linalg.cholesky(A), atol=1e-11)
    x = r.standard_normal(n)
    np.testing.assert_allclose(band_matvec(L, x), np.linalg.cholesky(A) @ x, atol=1e-11)
    F = BandedFactor.factor(band)
    np.testing.assert_allclose(F.solve(x), np.linalg.solve(A, x), atol=1e-10)
    np.testing.assert_allclose(F.logdet(), np.linalg.slogdet(A)[1], atol=1e-10)


def test_kron_solve_with_banded_spatial_factor(rng):
    A = random_spd(rng, 3)
    B = np.diag(np.full(5, 3.0)) + np.diag(np.ones(4), 1) + np.diag(np.ones(4), -1)
    v = rng.standard_normal(15)
    x = kron_solve(np.linalg.cholesky(A), BandedFactor.factor(band_from_dense(B, 1)), v)
    np.testing.assert_allclose(np.kron(A, B) @ x, v, atol=1e-10)


# -- reverse mode --------------------------------------------------------------


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_grad(build, x, tol=1e-6):
    t = ad.parameter(x)
    out = build(t)
    out.backward()
    want = numeric_grad(lambda z: float(build(ad.Tensor(z)).data), x)
    np.testing.assert_allclose(t.grad, want, rtol=tol, atol=tol)


UNARY = {
    "exp": lambda t: ad.tsum(ad.exp(t)),
    "log": lambda t: ad.tsum(ad.log(t * t + 1.0)),
    "sqrt": lambda t: ad.tsum(ad.sqrt(t * t + 1.0)),
    "gelu": lambda t: ad.tsum(ad.gelu(t) * t),
    "power": lambda t: ad.tsum(ad.power(t * t + 0.5, 1.5)),
    "div": lambda t: ad.tsum(1.0 / (t * t + 1.0)),
    "mean_axis": lambda t: ad.tsum(ad.square(ad.tmean(t, axis=0))),
    "transpose": lambda t: ad.tsum(ad.transpose(t) * np.arange(12.0).reshape(4, 3)),
    "getitem": lambda t: ad.tsum(ad.square(t[1:, ::2])),
    "concatenate": lambda t: ad.tsum(ad.square(ad.concatenate([t, 2.0 * t], axis=1))),
    "stack": lambda t: ad.tsum(ad.stack([t, t * t], axis=0)),
    "broadcast": lambda t: ad.tsum(ad.broadcast_to(ad.tsum(t, axis=0, keepdims=True), (5, 4)) ** 2),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_elementwise_and_shape_ops(name, rng):
    check_grad(UNARY[name], rng.standard_normal((3, 4)))


def test_matmul_and_einsum_gradients(rng):
    B = rng.standard_normal((4, 5))
    check_grad(lambda t: ad.tsum(ad.square(ad.matmul(t, B))), rng.standard_normal((3, 4)))
    check_grad(lambda t: ad.tsum(ad.einsum("ij,jk->ik", t, B) ** 2), rng.standard_normal((3, 4)))


def test_cholesky_and_solve_gradients(rng):
    base = random_spd(rng, 4)
    b = rng.standard_normal((4, 2))

    def f(t):
        A = ad.matmul(t, ad.transpose(t)) + base
        L = ad.cholesky(A)
        return ad.tsum(ad.square(ad.tri_solve(L, b))) + ad.logdet_from_cholesky_diag(ad.diagonal(L))

    check_grad(f, 0.3 * rng.standard_normal((4, 4)))


def test_band_cholesky_gradient(rng):
    n, b = 6, 2
    A = np.diag(np.full(n, 4.0)) + np.diag(np.full(n - 1, 1.0), 1) + np.diag(np.full(n - 1, 1.0), -1)
    A += np.diag(np.full(n - 2, 0.5), 2) + np.diag(np.full(n - 2, 0.5), -2)
    base = band_from_dense(A, b)
    x = rng.standard_normal(n)

    def f(t):
        L = ad.band_cholesky(t)
        return ad.tsum(ad.square(ad.band_matvec(L, ad.Tensor(x)))) + ad.tsum(ad.log(ad.square(L[:, 0])))

    pert = 0.05 * rng.standard_normal(base.shape)
    pert[n - 1, 1:] = 0.0
    pert[n - 2, 2] = 0.0
    check_grad(f, base + pert, tol=1e-5)


def test_gradient_accumulates_over_shared_leaf():
    t = ad.parameter(np.array([2.0, 3.0]))
    (ad.tsum(t * t) + ad.tsum(3.0 * t)).backward()
    np.testing.assert_allclose(t.grad, 2 * np.array([2.0, 3.0]) + 3.0)
