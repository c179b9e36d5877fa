"""Marginalized Gaussian multi-fidelity likelihood and noise-precision VB-EM.

The conditional model contributes a diagonal predictive variance V, the noise
model an isotropic variance 1/tau, so each observation entry carries total
variance 1/tau + V_e and the log-likelihood factorizes over entries.  The
noise precision tau is handled variationally with a log-normal family whose
parameters are fit by reparameterized stochastic ascent; the resulting tau
samples marginalize the likelihood gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


def mf_loglik(M, V, Y_obs, tau: float) -> float:
    """Sum over entries of log N(y | m, 1/tau + v)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    M, V, Y_obs = (np.asarray(a, dtype=float) for a in (M, V, Y_obs))
    total_var = 1.0 / tau + V
    r = M - Y_obs
    return float(np.sum(-0.5 * LOG_2PI - 0.5 * np.log(total_var) - r**2 / (2 * total_var)))


def mf_loglik_grads(M, V, Y_obs, tau: float):
    """(dM, dV, dtau) of mf_loglik; shapes match M, V; dtau is scalar."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    M, V, Y_obs = (np.asarray(a, dtype=float) for a in (M, V, Y_obs))
    total_var = 1.0 / tau + V
    r = M - Y_obs
    dM = -r / total_var
    dV = -0.5 / total_var + r**2 / (2 * total_var**2)
    dtau = float(np.sum(0.5 / (tau**2 * total_var) - r**2 / (2 * tau**2 * total_var**2)))
    return dM, dV, dtau


def hf_loglik(Y_model, Y_obs, tau: float):
    """Plain Gaussian log-likelihood log N(Y_obs | Y_model, I/tau) and its Y gradient."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    Y_model, Y_obs = np.asarray(Y_model, dtype=float), np.asarray(Y_obs, dtype=float)
    r = Y_model - Y_obs
    n = Y_model.size
    value = 0.5 * n * (np.log(tau) - LOG_2PI) - 0.5 * tau * float(np.sum(r**2))
    return value, -tau * r


def clip_gradient(g: np.ndarray, threshold: float) -> np.ndarray:
    """Global-norm clipping; preserves direction, caps the 2-norm."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    g = np.asarray(g, dtype=float)
    norm = float(np.linalg.norm(g))
    if norm > threshold:
        return g * (threshold / norm)
    return g


@dataclass
class TauVariational:
    """Log-normal variational posterior of the noise precision tau."""

    mu_tau: float
    log_sigma_tau: float

    @property
    def sigma_tau(self) -> float:
        return float(np.exp(self.log_sigma_tau))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        r = rng.standard_normal(n)
        return np.exp(self.mu_tau + self.sigma_tau * r)

    def entropy(self) -> float:
        return self.mu_tau + 0.5 * np.log(2 * np.pi * np.e) + self.log_sigma_tau


def init_tau_variational(Y_model, Y_obs, log_sigma: float = np.log(0.5)) -> TauVariational:
    """Data-scaled start: mu at the log empirical precision of the residuals."""
    r = np.asarray(Y_model, dtype=float) - np.asarray(Y_obs, dtype=float)
    var = max(float(np.mean(r**2)), 1e-12)
    return TauVariational(mu_tau=float(-np.log(var)), log_sigma_tau=log_sigma)


def vbem_tau(
    M,
    V,
    Y_obs,
    phi0: TauVariational,
    steps: int = 50,
    n_tau: int = 10,
    seed: int | np.random.Generator = 0,
    lr: float = 1e-2,
    a0: float = 1e-9,
    b0: float = 1e-9,
    n_batch: int = 1,
):
    """Inner SVI for q(tau): reparameterized ascent on the tau-ELBO.

    ``M``/``V`` may carry a leading batch axis of size ``n_batch`` (samples of
    the main variable); the likelihood term is then the batch mean, matching
    the expectation over the outer variational posterior.

    Returns (phi*, tau_samples from the converged q, elbo_trace).
    """
    if steps < 0 or n_tau < 1:
        raise ValueError("steps must be >= 0 and n_tau >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mu, log_sigma = float(phi0.mu_tau), float(phi0.log_sigma_tau)

    # Adam state (ascent)
    m1 = np.zeros(2)
    m2 = np.zeros(2)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    trace = []
    for t in range(1, steps + 1):
        sigma = np.exp(log_sigma)
        r = rng.standard_normal(n_tau)
        taus = np.exp(mu + sigma * r)
        # f(tau) = L_MF(tau) + log p(tau) up to constants
        values = np.empty(n_tau)
        fprime = np.empty(n_tau)
        for j, tau in enumerate(taus):
            _, _, dtau = mf_loglik_grads(M, V, Y_obs, tau)
            fprime[j] = dtau / n_batch + (a0 - 1.0) / tau - b0
            values[j] = (
                mf_loglik(M, V, Y_obs, tau) / n_batch + (a0 - 1.0) * np.log(tau) - b0 * tau
            )
        g_mu = float(np.mean(fprime * taus)) + 1.0
        g_ls = float(np.mean(fprime * taus * sigma * r)) + 1.0
        elbo = float(np.mean(values)) + mu + 0.5 * np.log(2 * np.pi * np.e) + log_sigma
        if not np.isfinite(elbo):
            raise FloatingPointError(
                f"tau ELBO diverged at step {t}; trace so far: {trace}"
            )
        trace.append(elbo)
        grad = np.array([g_mu, g_ls])
        m1 = beta1 * m1 + (1 - beta1) * grad
        m2 = beta2 * m2 + (1 - beta2) * grad**2
        mhat = m1 / (1 - beta1**t)
        vhat = m2 / (1 - beta2**t)
        mu += lr * mhat[0] / (np.sqrt(vhat[0]) + eps)
        log_sigma += lr * mhat[1] / (np.sqrt(vhat[1]) + eps)

    phi = TauVariational(mu_tau=mu, log_sigma_tau=log_sigma)
    tau_samples = phi.sample(rng, n_tau)
    return phi, tau_samples, np.asarray(trace)


def marginalized_grads(M, V, Y_obs, tau_samples):
    """Average mf_loglik value and (dM, dV) gradients over the tau samples."""
    tau_samples = np.asarray(tau_samples, dtype=float)
    if tau_samples.size == 0:
        raise ValueError("tau_samples must be non-empty")
    dM_bar = np.zeros_like(np.asarray(M, dtype=float))
    dV_bar = np.zeros_like(dM_bar)
    value = 0.0
    for tau in tau_samples:
        dM, dV, _ = mf_loglik_grads(M, V, Y_obs, tau)
        dM_bar += dM
        dV_bar += dV
        value += mf_loglik(M, V, Y_obs, tau)
    n = len(tau_samples)
    return dM_bar / n, dV_bar / n, value / n
