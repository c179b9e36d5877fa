"""Posterior summaries: permeability mean/spread fields on a raster, diagonal
slice percentile tables, and ground-truth coverage of the credible band.

All summaries are Monte Carlo over draws from the converged variational
posterior pushed through interpolation and the exponential, because the
permeability k = exp(x) at an interpolated point mixes several DoFs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, interpolation_matrix
from .svi import SparseGaussian


def _sample_at(q: SparseGaussian, S, n_samples: int, rng, chunk: int = 1000) -> np.ndarray:
    """Draws of exp(x) evaluated at the coordinates encoded in S; (n, n_pts)."""
    out = np.empty((n_samples, S.shape[0]))
    done = 0
    while done < n_samples:
        take = min(chunk, n_samples - done)
        xs, _ = q.sample(take, rng)
        out[done : done + take] = np.exp(xs @ S.T)
        done += take
    return out


def diagonal_slice_coords(n_points: int, rising: bool) -> np.ndarray:
    """Points along a diagonal of the unit square, clipped off the corners."""
    t = np.linspace(0.02, 0.98, n_points)
    c2 = t if rising else 1.0 - t
    return np.column_stack([t, c2])


@dataclass
class SliceTable:
    coords: np.ndarray   # (n, 2)
    p5: np.ndarray
    p50: np.ndarray
    p95: np.ndarray
    gt: np.ndarray

    @property
    def coverage(self) -> float:
        inside = (self.gt >= self.p5) & (self.gt <= self.p95)
        return float(np.mean(inside))

    def save_csv(self, path: str) -> None:
        table = np.column_stack([self.coords, self.p5, self.p50, self.p95, self.gt])
        with open(path, "w") as fh:
            fh.write("c1,c2,p5,p50,p95,gt\n")
            np.savetxt(fh, table, delimiter=",")


@dataclass
class PosteriorReport:
    raster_shape: tuple[int, int]
    mean_field: np.ndarray      # (rows, cols) posterior mean of k
    spread_field: np.ndarray    # (rows, cols) 2 * posterior std of k
    slices: list[SliceTable] = field(default_factory=list)

    @property
    def coverage(self) -> float:
        return float(np.mean([s.coverage for s in self.slices]))

    def save(self, dirpath: str) -> None:
        os.makedirs(dirpath, exist_ok=True)
        np.savetxt(os.path.join(dirpath, "mean_field.csv"), self.mean_field, delimiter=",")
        np.savetxt(os.path.join(dirpath, "spread_field.csv"), self.spread_field, delimiter=",")
        for i, s in enumerate(self.slices):
            s.save_csv(os.path.join(dirpath, f"slice_{i}.csv"))
        summary = {
            "raster_shape": list(self.raster_shape),
            "coverage_90": self.coverage,
            "per_slice_coverage": [s.coverage for s in self.slices],
        }
        with open(os.path.join(dirpath, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)


def make_report(
    q: SparseGaussian,
    mesh: Mesh,
    x_gt: np.ndarray,
    raster_shape: tuple[int, int] = (20, 20),
    n_slice_points: int = 41,
    n_samples: int = 10000,
    seed: int = 0,
) -> PosteriorReport:
    rows, cols = raster_shape
    rng = np.random.default_rng(seed)

    # raster of pixel centers for the field summaries
    cc1 = (np.arange(cols) + 0.5) / cols
    cc2 = (np.arange(rows) + 0.5) / rows
    g1, g2 = np.meshgrid(cc1, cc2)
    raster = np.column_stack([g1.ravel(), g2.ravel()])
    S = interpolation_matrix(mesh, raster)
    ks = _sample_at(q, S, n_samples, rng)
    mean_field = ks.mean(axis=0).reshape(rows, cols)
    spread_field = 2.0 * ks.std(axis=0).reshape(rows, cols)

    slices = []
    for rising in (True, False):
        coords = diagonal_slice_coords(n_slice_points, rising)
        Ss = interpolation_matrix(mesh, coords)
        ks_s = _sample_at(q, Ss, n_samples, rng)
        p5, p50, p95 = np.percentile(ks_s, [5.0, 50.0, 95.0], axis=0)
        gt = np.exp(Ss @ np.asarray(x_gt, dtype=float))
        slices.append(SliceTable(coords=coords, p5=p5, p50=p50, p95=p95, gt=gt))

    return PosteriorReport(
        raster_shape=raster_shape,
        mean_field=mean_field,
        spread_field=spread_field,
        slices=slices,
    )


def relative_l2(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / ||b|| over flattened arrays."""
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))
