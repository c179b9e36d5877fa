import numpy as np
import pytest

from mfinverse.likelihood import (
    TauVariational,
    clip_gradient,
    hf_loglik,
    init_tau_variational,
    marginalized_grads,
    mf_loglik,
    mf_loglik_grads,
    vbem_tau,
)


def test_marginalization_against_monte_carlo():
    # closed-form marginal vs Monte-Carlo integration of the nested model:
    # y_hf ~ N(m, v), y ~ N(y_hf, 1/tau)
    rng = np.random.default_rng(0)
    n_mc = 200_000
    for _ in range(6):
        m = rng.normal()
        v = 0.1 + rng.random()
        tau = 0.5 + 2.0 * rng.random()
        y = rng.normal()
        draws = rng.normal(m, np.sqrt(v), n_mc)
        dens = np.exp(-0.5 * tau * (y - draws) ** 2) * np.sqrt(tau / (2 * np.pi))
        mc = dens.mean()
        se = dens.std() / np.sqrt(n_mc)
        closed = np.exp(mf_loglik(np.array([m]), np.array([v]), np.array([y]), tau))
        assert abs(closed - mc) <= 3 * se


def test_gradients_finite_differences():
    rng = np.random.default_rng(1)
    M = rng.standard_normal((10, 2))
    V = 0.1 + rng.random((10, 2))
    Y = rng.standard_normal((10, 2))
    tau = 1.7
    dM, dV, dtau = mf_loglik_grads(M, V, Y, tau)
    eps = 1e-6
    for arr, g, f in (
        (M, dM, lambda A: mf_loglik(A, V, Y, tau)),
        (V, dV, lambda A: mf_loglik(M, A, Y, tau)),
    ):
        for _ in range(5):
            d = rng.standard_normal(arr.shape)
            d /= np.linalg.norm(d)
            fd = (f(arr + eps * d) - f(arr - eps * d)) / (2 * eps)
            an = float(np.sum(g * d))
            assert abs(fd - an) <= 1e-7 * max(abs(fd), 1e-8)
    fd_tau = (mf_loglik(M, V, Y, tau + eps) - mf_loglik(M, V, Y, tau - eps)) / (2 * eps)
    assert abs(fd_tau - dtau) <= 1e-7 * max(abs(fd_tau), 1e-8)


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    M = rng.standard_normal((8, 2))
    V = 0.2 + rng.random((8, 2))
    Y = rng.standard_normal((8, 2))
    perm = rng.permutation(8)
    assert mf_loglik(M, V, Y, 1.3) == pytest.approx(
        mf_loglik(M[perm], V[perm], Y[perm], 1.3), rel=1e-14
    )


def test_hf_consistency_with_zero_variance():
    rng = np.random.default_rng(3)
    Y_model = rng.standard_normal((6, 2))
    Y = rng.standard_normal((6, 2))
    tau = 2.2
    v_hf, g_hf = hf_loglik(Y_model, Y, tau)
    assert v_hf == pytest.approx(mf_loglik(Y_model, np.zeros_like(Y_model), Y, tau))
    dM, _, _ = mf_loglik_grads(Y_model, np.zeros_like(Y_model), Y, tau)
    np.testing.assert_allclose(g_hf, dM, rtol=1e-12)


def test_hf_at_mode():
    Y = np.random.default_rng(4).standard_normal((5, 2))
    tau = 3.0
    value, grad = hf_loglik(Y, Y, tau)
    assert value == pytest.approx(0.5 * Y.size * (np.log(tau) - np.log(2 * np.pi)))
    np.testing.assert_array_equal(grad, 0.0)


def test_hf_gradient_fd():
    rng = np.random.default_rng(5)
    Y_model = rng.standard_normal((4, 2))
    Y = rng.standard_normal((4, 2))
    tau = 1.1
    _, grad = hf_loglik(Y_model, Y, tau)
    eps = 1e-6
    d = rng.standard_normal(Y_model.shape)
    d /= np.linalg.norm(d)
    fd = (
        hf_loglik(Y_model + eps * d, Y, tau)[0] - hf_loglik(Y_model - eps * d, Y, tau)[0]
    ) / (2 * eps)
    assert abs(fd - float(np.sum(grad * d))) <= 1e-8 * abs(fd)


def test_clipping_properties():
    rng = np.random.default_rng(6)
    g = rng.standard_normal(50)
    t = np.linalg.norm(g)
    # below threshold: unchanged
    np.testing.assert_array_equal(clip_gradient(g, 2 * t), g)
    # above: output norm equals threshold and direction is preserved
    clipped = clip_gradient(g, t / 2)
    assert np.linalg.norm(clipped) == pytest.approx(t / 2)
    cos = g @ clipped / (np.linalg.norm(g) * np.linalg.norm(clipped))
    assert cos == pytest.approx(1.0, abs=1e-12)
    # idempotent
    np.testing.assert_allclose(clip_gradient(clipped, t / 2), clipped, rtol=1e-15)


def test_vbem_matches_conjugate_gamma():
    # with V = 0 the noise precision has an exact Gamma posterior; the
    # log-normal variational mean must land within 5% of its mean
    rng = np.random.default_rng(7)
    n = 100
    tau_true = 4.0
    Y_model = rng.standard_normal((n, 2))
    Y = Y_model + rng.normal(0.0, 1.0 / np.sqrt(tau_true), (n, 2))
    V = np.zeros_like(Y_model)
    a0 = b0 = 1e-9
    phi0 = init_tau_variational(Y_model, Y)
    phi, taus, trace = vbem_tau(
        Y_model, V, Y, phi0, steps=600, n_tau=30, seed=0, lr=5e-2, a0=a0, b0=b0
    )
    a_n = a0 + Y.size / 2.0
    b_n = b0 + 0.5 * np.sum((Y - Y_model) ** 2)
    exact_mean = a_n / b_n
    q_mean = np.exp(phi.mu_tau + 0.5 * phi.sigma_tau**2)
    assert abs(q_mean - exact_mean) <= 0.05 * exact_mean
    assert trace[-1] > trace[0]


def test_marginalized_grads_single_tau():
    rng = np.random.default_rng(8)
    M = rng.standard_normal((5, 2))
    V = 0.3 + rng.random((5, 2))
    Y = rng.standard_normal((5, 2))
    dM, dV, value = marginalized_grads(M, V, Y, [1.4])
    dM_ref, dV_ref, _ = mf_loglik_grads(M, V, Y, 1.4)
    np.testing.assert_array_equal(dM, dM_ref)
    np.testing.assert_array_equal(dV, dV_ref)
    assert value == pytest.approx(mf_loglik(M, V, Y, 1.4))
    # duplicate tau collapses to the same result
    dM2, dV2, _ = marginalized_grads(M, V, Y, [1.4, 1.4])
    np.testing.assert_allclose(dM2, dM, rtol=1e-15)


def test_marginalized_grads_quadrature_oracle():
    # scalar case: E_q[dM] via dense quadrature over the log-normal q(tau)
    m, v, y = 0.3, 0.5, -0.2
    phi = TauVariational(mu_tau=0.4, log_sigma_tau=np.log(0.3))
    ts = np.linspace(-6, 6, 4001)
    w = np.exp(-0.5 * ts**2) / np.sqrt(2 * np.pi)
    taus_q = np.exp(phi.mu_tau + phi.sigma_tau * ts)
    dms = np.array(
        [mf_loglik_grads(np.array([m]), np.array([v]), np.array([y]), t)[0][0] for t in taus_q]
    )
    quad = np.trapezoid(w * dms, ts)
    rng = np.random.default_rng(9)
    samples = phi.sample(rng, 20_000)
    dM_bar, _, _ = marginalized_grads(np.array([m]), np.array([v]), np.array([y]), samples)
    dms_s = np.array(
        [mf_loglik_grads(np.array([m]), np.array([v]), np.array([y]), t)[0][0] for t in samples]
    )
    se = dms_s.std() / np.sqrt(len(samples))
    assert abs(dM_bar[0] - quad) <= 3 * se


def test_invalid_tau():
    with pytest.raises(ValueError):
        mf_loglik(np.zeros(2), np.zeros(2), np.zeros(2), -1.0)
    with pytest.raises(ValueError):
        clip_gradient(np.ones(3), 0.0)
