"""Training data for the multi-fidelity conditional: paired feature images
(low-fidelity velocities plus the interpolated input field) and high-fidelity
velocity images on the shared observation grid.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np


STD_FLOOR = 1e-8


@dataclass
class ChannelStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray   # (C,)

    @classmethod
    def from_images(cls, images: np.ndarray) -> "ChannelStats":
        mean = images.mean(axis=(0, 1, 2))
        std = np.maximum(images.std(axis=(0, 1, 2)), STD_FLOOR)
        return cls(mean=mean, std=std)

    def standardize(self, images: np.ndarray) -> np.ndarray:
        return (images - self.mean) / self.std

    def destandardize(self, images: np.ndarray) -> np.ndarray:
        return images * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ChannelStats":
        return cls(mean=np.array(obj["mean"]), std=np.array(obj["std"]))


@dataclass
class TrainingSet:
    """Paired (Z, Y) images with per-channel standardization statistics."""

    z: np.ndarray  # (N, H, W, Cz)
    y: np.ndarray  # (N, H, W, 2)
    z_stats: ChannelStats = None
    y_stats: ChannelStats = None

    def __post_init__(self):
        if self.z.shape[0] != self.y.shape[0]:
            raise ValueError("feature and target sample counts differ")
        if self.z_stats is None:
            self.z_stats = ChannelStats.from_images(self.z)
        if self.y_stats is None:
            self.y_stats = ChannelStats.from_images(self.y)

    @property
    def n_samples(self) -> int:
        return self.z.shape[0]

    def standardized(self) -> tuple[np.ndarray, np.ndarray]:
        return self.z_stats.standardize(self.z), self.y_stats.standardize(self.y)

    def extend(self, z_new: np.ndarray, y_new: np.ndarray) -> "TrainingSet":
        """Union with new records; standardization stats are recomputed."""
        if z_new.shape[0] == 0:
            return self
        return TrainingSet(
            z=np.concatenate([self.z, z_new]),
            y=np.concatenate([self.y, y_new]),
        )

    # --- directory persistence: manifest.json + one CSV per sample ---

    def save(self, dirpath: str) -> None:
        os.makedirs(dirpath, exist_ok=True)
        n, h, w, cz = self.z.shape
        names = []
        for i in range(n):
            name = f"sample_{i:05d}.csv"
            names.append(name)
            zi = self.z[i].reshape(h * w, cz)
            yi = self.y[i].reshape(h * w, 2)
            table = np.hstack([zi, yi])
            cols = [f"z{c}" for c in range(cz)] + ["y0", "y1"]
            with open(os.path.join(dirpath, name), "w") as fh:
                fh.write(",".join(cols) + "\n")
                np.savetxt(fh, table, delimiter=",")
        manifest = {
            "image_shape": [h, w],
            "z_channels": cz,
            "samples": names,
            "z_stats": self.z_stats.to_json(),
            "y_stats": self.y_stats.to_json(),
        }
        with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)

    @classmethod
    def load(cls, dirpath: str) -> "TrainingSet":
        with open(os.path.join(dirpath, "manifest.json")) as fh:
            manifest = json.load(fh)
        h, w = manifest["image_shape"]
        cz = manifest["z_channels"]
        zs, ys = [], []
        for name in manifest["samples"]:
            table = np.loadtxt(os.path.join(dirpath, name), delimiter=",", skiprows=1)
            zs.append(table[:, :cz].reshape(h, w, cz))
            ys.append(table[:, cz:].reshape(h, w, 2))
        return cls(
            z=np.stack(zs),
            y=np.stack(ys),
            z_stats=ChannelStats.from_json(manifest["z_stats"]),
            y_stats=ChannelStats.from_json(manifest["y_stats"]),
        )


def sample_training_inputs(prior, delta_range, count: int, seed: int) -> np.ndarray:
    """Draw input fields from the hierarchical prior with a uniform hyper-prior:
    delta_i ~ U(a, b), then x_i ~ N(mu0, (delta_i P)^-1). Returns (count, dim)."""
    a, b = delta_range
    if not 0 < a < b:
        raise ValueError(f"need 0 < a < b for the delta range, got [{a}, {b}]")
    rng = np.random.default_rng(seed)
    deltas = rng.uniform(a, b, size=count)
    return np.stack([prior.sample(d, rng)[0] for d in deltas])


def feature_image(y_lf: np.ndarray, x_obs: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Stack LF velocities and the interpolated input field into (H, W, 3)."""
    img = np.empty((rows, cols, 3))
    img[:, :, 0] = y_lf[:, 0].reshape(rows, cols)
    img[:, :, 1] = y_lf[:, 1].reshape(rows, cols)
    img[:, :, 2] = x_obs.reshape(rows, cols)
    return img


def velocity_image(y: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return y.reshape(rows, cols, 2)
