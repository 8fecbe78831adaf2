"""The oracles check the library; these tests check the oracles, against
numpy/scipy built-ins and closed forms only."""

import numpy as np
from scipy.stats import wasserstein_distance

import oracles as orc


def test_jacobi_svd_matches_numpy():
    rng = np.random.default_rng(11)
    for i in range(20):
        m, n = rng.integers(1, 17, size=2)
        a = rng.normal(size=(m, n))
        ours = orc.jacobi_singular_values(a)
        ref = np.linalg.svd(a, compute_uv=False)
        assert np.allclose(ours, ref, atol=1e-9), (m, n, i)


def test_spectral_norm_ref_is_largest_singular_value():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(9, 5))
    assert abs(orc.spectral_norm_ref(a) - np.linalg.norm(a, 2)) < 1e-9


def test_fd_gradient_on_quadratic():
    # f(x) = x^T A x has gradient (A + A^T) x, exact for central differences
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 4))
    x = rng.normal(size=4)
    g = orc.fd_gradient(lambda v: float(v @ a @ v), x)
    assert np.allclose(g, (a + a.T) @ x, atol=1e-5)


def test_mlp_input_grad_matches_fd():
    rng = np.random.default_rng(7)
    weights = [(rng.normal(size=(3, 8), scale=0.5), rng.normal(size=8, scale=0.1)),
               (rng.normal(size=(8, 1), scale=0.5), rng.normal(size=1, scale=0.1))]
    x = rng.normal(size=(1, 3))
    analytic = orc.mlp_input_grad(x, weights)[0]
    numeric = orc.fd_gradient(
        lambda v: float(orc.mlp_forward(v[None, :], weights)[0]), x[0])
    assert orc.rel_err(analytic, numeric) < 1e-6


def test_energy_distance_ref_closed_form():
    # two one-point clouds: ED^2 = 2|a-b|, so ED = sqrt(2|a-b|)
    a = np.array([[0.0, 0.0]])
    b = np.array([[3.0, 4.0]])
    assert abs(orc.energy_distance_ref(a, b) - np.sqrt(2 * 5.0)) < 1e-12
    assert orc.energy_distance_ref(b, b) == 0.0


def test_mmd_ref_closed_form():
    # one-point clouds: MMD^2 = k(a,a) + k(b,b) - 2k(a,b) = 2(1 - k(a,b))
    a = np.array([[0.0]])
    b = np.array([[2.0]])
    bw = 1.0
    expected = 2.0 * (1.0 - np.exp(-4.0 / 2.0))
    assert abs(orc.mmd2_rbf_ref(a, b, bw) - expected) < 1e-12


def test_w1_sorted_matches_scipy():
    rng = np.random.default_rng(9)
    a = rng.normal(size=64)
    b = rng.normal(1.0, 2.0, size=64)
    assert abs(orc.w1_sorted_ref(a, b) - wasserstein_distance(a, b)) < 1e-12


def test_batchnorm_refs():
    rng = np.random.default_rng(13)
    x = rng.normal(2.0, 3.0, size=(64, 5))
    gamma, beta = rng.normal(size=5), rng.normal(size=5)
    y, mu, var = orc.batchnorm_train_ref(x, gamma, beta, eps=1e-5)
    assert np.allclose(mu, x.mean(axis=0), atol=1e-12)
    assert np.allclose(var, x.var(axis=0), atol=1e-12)
    z = (y - beta) / gamma
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-10)
    assert np.allclose(z.std(axis=0), 1.0, atol=1e-3)
    rmean, rvar = rng.normal(size=5), rng.uniform(0.5, 2.0, size=5)
    ye = orc.batchnorm_eval_ref(x, gamma, beta, rmean, rvar, eps=1e-5)
    manual = gamma * (x - rmean) / np.sqrt(rvar + 1e-5) + beta
    assert np.allclose(ye, manual, atol=1e-12)


def test_gradient_penalty_value_closed_form():
    # linear critic D(x) = w.x: grad norm is |w| everywhere
    w = np.array([[2.0], [0.0]])
    weights = [(w, np.zeros(1))]
    xhat = np.random.default_rng(1).normal(size=(8, 2))
    val = orc.gradient_penalty_value(xhat, weights, lam=10.0)
    assert abs(val - 10.0) < 1e-9  # (2-1)^2 * 10
    w_unit = np.array([[0.6], [0.8]])
    assert abs(orc.gradient_penalty_value(xhat, [(w_unit, np.zeros(1))], lam=10.0)) < 1e-9
