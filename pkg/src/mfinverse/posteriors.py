"""Unnormalized log-posterior callbacks for the inference loop.

Both posteriors are stateful: once per outer iteration ``begin_batch``
receives the whole batch of field samples, runs the hyper-parameter EM steps
(delta from the batch quadratic forms, tau by its inner variational loop with
warm starts) and precomputes per-sample values and gradients; the per-sample
calls then drain the precomputed queue in order.

The inferred field x lives on the fine field mesh.  The LF solver consumes
the field restricted (bilinearly interpolated) to its own coarser mesh, so
the only expensive model inside the multi-fidelity callback is the cheap LF
solve; the HF solver is never touched here.
"""

from __future__ import annotations

import numpy as np

from .conditional import ConditionalModel, feature_image
from .darcy import DarcySolver
from .likelihood import (
    TauVariational,
    clip_gradient,
    hf_loglik,
    init_tau_variational,
    marginalized_grads,
    vbem_tau,
)
from .mesh import Mesh, ObservationGrid, interpolation_matrix
from .prior import MarkovPrior


class _TauState:
    """Warm-started log-normal variational posterior over the noise precision."""

    def __init__(self, lik_cfg: dict, seed: int):
        self.cfg = lik_cfg
        self.rng = np.random.default_rng(seed)
        self.phi: TauVariational | None = None
        self.samples: np.ndarray | None = None

    def update(self, M: np.ndarray, V: np.ndarray, Y_obs: np.ndarray, n_batch: int):
        if self.phi is None:
            first = M[0] if M.shape != Y_obs.shape else M
            self.phi = init_tau_variational(first, Y_obs)
        self.phi, self.samples, _ = vbem_tau(
            M,
            V,
            Y_obs,
            self.phi,
            steps=self.cfg["vbem_steps"],
            n_tau=self.cfg["n_tau"],
            seed=self.rng,
            lr=self.cfg["vbem_lr"],
            a0=self.cfg["a0"],
            b0=self.cfg["b0"],
            n_batch=n_batch,
        )
        return self.samples


class MultiFidelityPosterior:
    """log p(Y_obs | x) (marginalized multi-fidelity likelihood) + EM prior."""

    def __init__(
        self,
        prior: MarkovPrior,
        field_mesh: Mesh,
        lf_solver: DarcySolver,
        model: ConditionalModel,
        grid: ObservationGrid,
        Y_obs: np.ndarray,
        lik_cfg: dict,
        seed: int = 0,
    ):
        self.prior = prior
        self.lf_solver = lf_solver
        self.model = model
        self.grid = grid
        self.Y_obs = np.asarray(Y_obs, dtype=float)
        self.lik_cfg = lik_cfg
        # field mesh -> LF solver nodes (restriction) and -> observation coords
        self.R = interpolation_matrix(field_mesh, lf_solver.mesh.node_coords())
        self.S = interpolation_matrix(field_mesh, grid.coords)
        self.tau = _TauState(lik_cfg, seed)
        self.e_delta = np.nan
        self._queue: list[tuple[float, np.ndarray]] = []

    def begin_batch(self, xs: np.ndarray) -> None:
        xs = np.atleast_2d(xs)
        n_batch = xs.shape[0]
        self.e_delta = self.prior.batch_expected_delta(xs)

        sols = []
        z_batch = np.empty((n_batch, self.grid.rows, self.grid.cols, 3))
        for b, x in enumerate(xs):
            sol = self.lf_solver.solve(self.R @ x)
            sols.append(sol)
            z_batch[b] = feature_image(sol.Y, self.S @ x, self.grid.rows, self.grid.cols)

        M, V = self.model.predict(z_batch, keep_cache=True)
        y_img = self.grid.to_image(self.Y_obs)
        taus = self.tau.update(M, V, y_img, n_batch)

        dM = np.empty_like(M)
        dV = np.empty_like(V)
        values = np.empty(n_batch)
        for b in range(n_batch):
            dM[b], dV[b], values[b] = marginalized_grads(M[b], V[b], y_img, taus)
        dz = self.model.backprop_inputs(dM, dV)

        self._queue = []
        threshold = self.lik_cfg["clip_threshold"]
        for b, x in enumerate(xs):
            dz_b = clip_gradient(dz[b], threshold)
            dY_lf = dz_b[:, :, :2].reshape(-1, 2)
            grad = self.R.T @ self.lf_solver.adjoint(self.R @ xs[b], sols[b], dY_lf)
            grad += self.S.T @ dz_b[:, :, 2].ravel()
            p_val, p_grad = self.prior.log_prior_em(x, e_delta=self.e_delta)
            self._queue.append((values[b] + p_val, grad + p_grad))

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        if not self._queue:
            raise RuntimeError("log-posterior called outside a batch")
        return self._queue.pop(0)

    def info(self) -> dict:
        return {
            "E_delta": float(self.e_delta),
            "mu_tau": float(self.tau.phi.mu_tau) if self.tau.phi else np.nan,
        }


class SingleFidelityPosterior:
    """Reference posterior through one solver with the plain Gaussian
    likelihood (the V = 0 limit); the same tau and delta EM machinery."""

    def __init__(
        self,
        prior: MarkovPrior,
        field_mesh: Mesh,
        solver: DarcySolver,
        Y_obs: np.ndarray,
        lik_cfg: dict,
        seed: int = 0,
    ):
        self.prior = prior
        self.solver = solver
        self.Y_obs = np.asarray(Y_obs, dtype=float)
        self.lik_cfg = lik_cfg
        if solver.mesh == field_mesh:
            self.R = None
        else:
            self.R = interpolation_matrix(field_mesh, solver.mesh.node_coords())
        self.tau = _TauState(lik_cfg, seed)
        self.e_delta = np.nan
        self._queue: list[tuple[float, np.ndarray]] = []

    def begin_batch(self, xs: np.ndarray) -> None:
        xs = np.atleast_2d(xs)
        n_batch = xs.shape[0]
        self.e_delta = self.prior.batch_expected_delta(xs)

        sols = [
            self.solver.solve(x if self.R is None else self.R @ x) for x in xs
        ]
        M = np.stack([sol.Y for sol in sols])
        V = np.zeros_like(M)
        taus = self.tau.update(M, V, self.Y_obs, n_batch)

        self._queue = []
        for b, x in enumerate(xs):
            value = 0.0
            dY = np.zeros_like(sols[b].Y)
            for tau in taus:
                v, g = hf_loglik(sols[b].Y, self.Y_obs, tau)
                value += v
                dY += g
            value /= len(taus)
            dY /= len(taus)
            grad = self.solver.adjoint(
                x if self.R is None else self.R @ x, sols[b], dY
            )
            if self.R is not None:
                grad = self.R.T @ grad
            p_val, p_grad = self.prior.log_prior_em(x, e_delta=self.e_delta)
            self._queue.append((value + p_val, grad + p_grad))

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        if not self._queue:
            raise RuntimeError("log-posterior called outside a batch")
        return self._queue.pop(0)

    def info(self) -> dict:
        return {
            "E_delta": float(self.e_delta),
            "mu_tau": float(self.tau.phi.mu_tau) if self.tau.phi else np.nan,
        }
