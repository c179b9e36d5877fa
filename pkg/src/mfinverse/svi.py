"""Sparse Gaussian variational family and the stochastic inference loop.

The variational covariance is L L^T with L a banded lower-triangular factor;
the diagonal is log-parameterized so the factor stays positive under
unconstrained updates.  The loop maximizes a single-batch Monte-Carlo ELBO
estimate by reparameterized gradient ascent over (mean, factor) for any
differentiable unnormalized log-posterior callback.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass
class SparseGaussian:
    """N(mu, L L^T) with banded lower Cholesky factor.

    ``lvals`` has shape (band + 1, dim); row 0 stores the log of the diagonal,
    row k the k-th sub-diagonal L[i, i-k] at column index i (entries with
    i < k are unused and stay zero).
    """

    mu: np.ndarray
    band: int
    lvals: np.ndarray = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        if self.lvals is None:
            self.lvals = np.zeros((self.band + 1, self.dim))
            self.lvals[0] = np.log(0.1)
        self.lvals = np.asarray(self.lvals, dtype=float)
        if self.lvals.shape != (self.band + 1, self.dim):
            raise ValueError("lvals shape must be (band + 1, dim)")
        self._zero_invalid()

    def _zero_invalid(self):
        for k in range(1, self.band + 1):
            self.lvals[k, :k] = 0.0

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def diag_L(self) -> np.ndarray:
        return np.exp(self.lvals[0])

    def L_matvec(self, r: np.ndarray) -> np.ndarray:
        """L r for a batch (..., dim) of standard-normal draws."""
        r = np.asarray(r, dtype=float)
        out = self.diag_L() * r
        for k in range(1, self.band + 1):
            out[..., k:] += self.lvals[k, k:] * r[..., :-k]
        return out

    def sample(self, n_samples: int, rng: np.random.Generator):
        """Reparameterized draws: returns (xs, rs), both (n_samples, dim)."""
        rs = rng.standard_normal((n_samples, self.dim))
        xs = self.mu + self.L_matvec(rs)
        return xs, rs

    def entropy(self) -> tuple[float, np.ndarray]:
        """H(q) and its gradient w.r.t. lvals (1 per log-diagonal entry)."""
        h = 0.5 * self.dim * np.log(2 * np.pi * np.e) + float(np.sum(self.lvals[0]))
        grad = np.zeros_like(self.lvals)
        grad[0] = 1.0
        return h, grad

    def dense_L(self) -> np.ndarray:
        L = np.diag(self.diag_L())
        for k in range(1, self.band + 1):
            for i in range(k, self.dim):
                L[i, i - k] = self.lvals[k, i]
        return L

    def copy(self) -> "SparseGaussian":
        return SparseGaussian(self.mu.copy(), self.band, self.lvals.copy())

    def save(self, path: str | Path):
        """JSON header + little-endian float64 blob (mu then lvals)."""
        path = Path(path)
        header = {"dim": self.dim, "band": self.band, "format": 1}
        blob = np.concatenate([self.mu, self.lvals.ravel()]).astype("<f8").tobytes()
        with open(path, "wb") as fh:
            head = json.dumps(header).encode()
            fh.write(len(head).to_bytes(8, "little"))
            fh.write(head)
            fh.write(blob)

    @classmethod
    def load(cls, path: str | Path) -> "SparseGaussian":
        with open(path, "rb") as fh:
            hlen = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(hlen).decode())
            blob = np.frombuffer(fh.read(), dtype="<f8")
        dim, band = header["dim"], header["band"]
        mu = blob[:dim].copy()
        lvals = blob[dim:].reshape(band + 1, dim).copy()
        return cls(mu, band, lvals)


def elbo_grad(q: SparseGaussian, rs: np.ndarray, per_sample_grads: np.ndarray):
    """Pathwise ELBO gradient from log-posterior gradients at the samples.

    Returns (grad_mu, grad_lvals) including the entropy contribution.
    """
    rs = np.atleast_2d(rs)
    gs = np.atleast_2d(per_sample_grads)
    if rs.shape != gs.shape:
        raise ValueError("rs and per_sample_grads must align")
    grad_mu = gs.mean(axis=0)
    grad_lvals = np.zeros_like(q.lvals)
    # d x_i / d L[i, i-k] = r[i-k]; diagonal chains through the exp parameterization
    grad_lvals[0] = (gs * rs).mean(axis=0) * q.diag_L()
    for k in range(1, q.band + 1):
        grad_lvals[k, k:] = (gs[:, k:] * rs[:, :-k]).mean(axis=0)
    _, ent_grad = q.entropy()
    return grad_mu, grad_lvals + ent_grad


class Optimizer:
    """Stochastic ascent on a dict of named parameter arrays."""

    def __init__(self, kind: str, lr: float):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer: {kind!r}")
        self.kind = kind
        self.lr = lr
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        if self.kind == "sgd":
            for name, g in grads.items():
                params[name] += self.lr * g
            return
        self._t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for name, g in grads.items():
            m = self._m.setdefault(name, np.zeros_like(g))
            v = self._v.setdefault(name, np.zeros_like(g))
            m[:] = b1 * m + (1 - b1) * g
            v[:] = b2 * v + (1 - b2) * g**2
            mhat = m / (1 - b1**self._t)
            vhat = v / (1 - b2**self._t)
            params[name] += self.lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class SviConfig:
    batch_size: int = 6
    max_solver_calls: int = 4000
    optimizer: str = "sgd"
    learning_rate: float = 1e-3
    seed: int = 0
    refine_epochs: tuple[int, ...] = ()
    checkpoint_path: str | None = None

    @property
    def n_iterations(self) -> int:
        return -(-self.max_solver_calls // self.batch_size)


@dataclass
class SviTrace:
    """Per-iteration convergence records."""

    records: list[dict] = field(default_factory=list)

    def append(self, **kwargs):
        self.records.append(kwargs)

    def column(self, name: str) -> np.ndarray:
        return np.array([rec.get(name, np.nan) for rec in self.records], dtype=float)

    def save_csv(self, path: str | Path):
        if not self.records:
            return
        keys = list(self.records[0].keys())
        lines = [",".join(keys)]
        for rec in self.records:
            lines.append(",".join(f"{rec.get(k, float('nan'))}" for k in keys))
        Path(path).write_text("\n".join(lines) + "\n")


LogPosterior = Callable[[np.ndarray], tuple[float, np.ndarray]]


def run_inference(
    logpost: LogPosterior,
    q0: SparseGaussian,
    cfg: SviConfig,
    hooks: dict[int, Callable[[int, SparseGaussian], None]] | None = None,
    info_cb: Callable[[], dict] | None = None,
) -> tuple[SparseGaussian, SviTrace]:
    """Reparameterized stochastic ELBO ascent (the outer inference loop).

    ``hooks`` maps iteration index -> callback fired after the optimizer step
    (used for mid-run conditional refinement).  ``info_cb`` may supply extra
    per-iteration trace fields (e.g. hyper-parameter summaries).
    """
    q = q0.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(cfg.optimizer, cfg.learning_rate)
    trace = SviTrace()
    hooks = hooks or {}

    for it in range(cfg.n_iterations):
        xs, rs = q.sample(cfg.batch_size, rng)
        # Stateful posteriors (hyper-parameter EM steps, warm starts) get the
        # whole batch before the per-sample evaluations.
        begin = getattr(logpost, "begin_batch", None)
        if begin is not None:
            begin(xs)
        values = np.empty(cfg.batch_size)
        grads = np.empty_like(xs)
        try:
            for i, x in enumerate(xs):
                values[i], grads[i] = logpost(x)
        except Exception:
            if cfg.checkpoint_path is not None:
                q.save(cfg.checkpoint_path)
            raise
        g_mu, g_lvals = elbo_grad(q, rs, grads)
        params = {"mu": q.mu, "lvals": q.lvals}
        opt.step(params, {"mu": g_mu, "lvals": g_lvals})
        q._zero_invalid()

        entropy, _ = q.entropy()
        rec = {
            "iteration": it,
            "elbo": float(values.mean()) + entropy,
            "mean_norm": float(np.linalg.norm(q.mu)),
            "logdiag_mean": float(np.mean(q.lvals[0])),
        }
        if info_cb is not None:
            rec.update(info_cb())
        trace.append(**rec)

        if it in hooks:
            hooks[it](it, q)
            trace.records[-1]["refined"] = 1.0
    return q, trace


def gaussian_kl(q: SparseGaussian, mean: np.ndarray, cov: np.ndarray) -> float:
    """KL(q || N(mean, cov)) via dense formulas (test/diagnostic helper)."""
    L = q.dense_L()
    qcov = L @ L.T
    n = q.dim
    cov_inv = np.linalg.inv(cov)
    d = q.mu - mean
    logdet_q = 2.0 * float(np.sum(q.lvals[0]))
    sign, logdet_p = np.linalg.slogdet(cov)
    return 0.5 * (
        np.trace(cov_inv @ qcov) + d @ cov_inv @ d - n + logdet_p - logdet_q
    )
