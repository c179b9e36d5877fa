"""Synthetic ground truth and noisy velocity observations at a target SNR."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import ObservationGrid
from .prior import MarkovPrior


class DegenerateSignalError(ValueError):
    """All-zero signal cannot be scaled to a finite SNR."""


@dataclass
class ObservationSet:
    Y_obs: np.ndarray
    sigma2: float
    snr: float
    seed: int
    grid: ObservationGrid

    def save(self, csv_path: str | Path):
        """CSV with (c1, c2, u1, u2) columns plus a JSON metadata sidecar."""
        csv_path = Path(csv_path)
        data = np.column_stack([self.grid.coords, self.Y_obs])
        header = f"coords rows={self.grid.rows} cols={self.grid.cols}\nc1,c2,u1,u2"
        np.savetxt(csv_path, data, delimiter=",", header=header)
        meta = {
            "snr": self.snr if np.isfinite(self.snr) else "inf",
            "sigma2": self.sigma2,
            "seed": self.seed,
            "rows": self.grid.rows,
            "cols": self.grid.cols,
        }
        csv_path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, csv_path: str | Path) -> "ObservationSet":
        csv_path = Path(csv_path)
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        data = np.loadtxt(csv_path, delimiter=",")
        grid = ObservationGrid(data[:, :2], meta["rows"], meta["cols"])
        snr = np.inf if meta["snr"] == "inf" else float(meta["snr"])
        return cls(
            Y_obs=data[:, 2:4],
            sigma2=meta["sigma2"],
            snr=snr,
            seed=meta["seed"],
            grid=grid,
        )


def make_ground_truth(prior: MarkovPrior, delta_gt: float, seed: int) -> np.ndarray:
    """One reproducible prior draw serving as the ground-truth field."""
    if delta_gt <= 0:
        raise ValueError("delta_gt must be positive")
    rng = np.random.default_rng(seed)
    return prior.sample(delta_gt, rng, count=1)[0]


def noise_variance(Y_gt: np.ndarray, snr: float) -> float:
    """sigma^2 = mean-square signal entry / snr (zero for infinite snr)."""
    Y_gt = np.asarray(Y_gt, dtype=float)
    if np.isinf(snr):
        return 0.0
    if snr <= 0:
        raise ValueError("snr must be positive")
    power = float(np.mean(Y_gt**2))
    if power == 0.0:
        raise DegenerateSignalError("all-zero signal has no finite-SNR noise scale")
    return power / snr


def gen_observations(
    Y_gt: np.ndarray, snr: float, seed: int, grid: ObservationGrid
) -> ObservationSet:
    """Corrupt the clean velocities with i.i.d. Gaussian noise at the target SNR."""
    Y_gt = np.asarray(Y_gt, dtype=float)
    if not np.all(np.isfinite(Y_gt)):
        raise ValueError("clean signal contains non-finite entries")
    sigma2 = noise_variance(Y_gt, snr)
    if sigma2 == 0.0:
        Y_obs = Y_gt.copy()
    else:
        rng = np.random.default_rng(seed)
        Y_obs = Y_gt + rng.normal(0.0, np.sqrt(sigma2), size=Y_gt.shape)
    return ObservationSet(Y_obs=Y_obs, sigma2=sigma2, snr=snr, seed=seed, grid=grid)
