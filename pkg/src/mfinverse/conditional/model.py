"""Probabilistic conditional model: a heteroscedastic Gaussian over the
high-fidelity velocity image given the low-fidelity feature image.

Training minimizes the Gaussian negative log likelihood in standardized
space; prediction and input gradients are de-standardized so callers work in
physical units throughout.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..svi import Optimizer
from .dataset import ChannelStats, TrainingSet
from .network import GaussianFieldNet

NUGGET = 1e-5
MODEL_FORMAT_VERSION = 1


def _pad_up(n: int) -> int:
    return -(-n // 4) * 4


def _edge_pad(images: np.ndarray, hp: int, wp: int) -> np.ndarray:
    h, w = images.shape[1:3]
    return np.pad(images, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)), mode="edge")


def _fold_pad_gradient(g: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of edge padding: replicated rows/cols accumulate onto the edge."""
    out = g[:, :h, :w, :].copy()
    if g.shape[1] > h:
        out[:, h - 1, :, :] += g[:, h:, :w, :].sum(axis=1)
    if g.shape[2] > w:
        out[:, :, w - 1, :] += g[:, :h, w:, :].sum(axis=2)
    if g.shape[1] > h and g.shape[2] > w:
        out[:, h - 1, w - 1, :] += g[:, h:, w:, :].sum(axis=(1, 2))
    return out


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the model was rolled back to the last good epoch."""


class ConditionalModel:
    def __init__(self, net: GaussianFieldNet, z_stats: ChannelStats, y_stats: ChannelStats,
                 nugget: float = NUGGET, image_shape: tuple[int, int] | None = None):
        self.net = net
        self.z_stats = z_stats
        self.y_stats = y_stats
        self.nugget = nugget
        # observed image shape; may be smaller than the network's (padded) one
        self.image_shape = tuple(image_shape) if image_shape else net.image_shape
        self._cache = None

    @classmethod
    def for_training_set(cls, data: TrainingSet, channels=(16, 32, 64), bottleneck=200,
                         dropout=0.3, pool="max", seed=0, nugget: float = NUGGET):
        h, w, cz = data.z.shape[1:]
        net = GaussianFieldNet((_pad_up(h), _pad_up(w)), cz, channels=channels,
                               bottleneck=bottleneck, dropout=dropout, pool=pool, seed=seed)
        return cls(net, data.z_stats, data.y_stats, nugget=nugget, image_shape=(h, w))

    def _pad(self, images: np.ndarray) -> np.ndarray:
        hp, wp = self.net.image_shape
        if images.shape[1:3] == (hp, wp):
            return images
        return _edge_pad(images, hp, wp)

    # --- training ---

    def _nll_and_seed(self, out: np.ndarray, y_std: np.ndarray):
        """Mean NLL per entry in standardized space plus the gradient seed
        with respect to the raw network output."""
        m = out[..., :2]
        lv = out[..., 2:]
        v = np.exp(lv) + self.nugget
        r = m - y_std
        n_entries = y_std.size
        nll = 0.5 * np.sum(np.log(v) + r**2 / v) / n_entries
        seed = np.empty_like(out)
        seed[..., :2] = r / v / n_entries
        dv = (0.5 / v - 0.5 * r**2 / v**2) / n_entries
        seed[..., 2:] = dv * np.exp(lv)
        return nll, seed

    def train(self, data: TrainingSet, epochs: int = 4000, batch_size: int = 128,
              learning_rate: float = 1e-3, optimizer: str = "adam", seed: int = 0,
              callback=None) -> list[float]:
        z_std, y_std = data.standardized()
        z_std, y_std = self._pad(z_std), self._pad(y_std)
        n = data.n_samples
        batch_size = min(batch_size, n)
        rng = np.random.default_rng(seed)
        opt = Optimizer(optimizer, learning_rate)
        losses = []
        checkpoint = {k: v.copy() for k, v in self.net.state_arrays().items()}
        for epoch in range(epochs):
            if epoch % 100 == 0:
                checkpoint = {k: v.copy() for k, v in self.net.state_arrays().items()}
            idx = rng.permutation(n)[:batch_size]
            out = self.net.forward(z_std[idx], training=True)
            nll, seed_out = self._nll_and_seed(out, y_std[idx])
            if not np.isfinite(nll):
                self.net.set_state(checkpoint)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}; rolled back")
            self.net.backward(seed_out)
            params = self.net.named_params()
            grads = {k: -g for k, g in self.net.named_grads().items()}
            opt.step(params, grads)
            losses.append(nll)
            if callback is not None:
                callback(epoch, nll)
        return losses

    def refine(self, data: TrainingSet, z_new: np.ndarray, y_new: np.ndarray,
               epochs: int = 4000, **kwargs) -> tuple[TrainingSet, list[float]]:
        """Warm-start retraining on the extended set. An empty extension is a
        strict no-op: the weights are left bit-identical."""
        if z_new.shape[0] == 0:
            return data, []
        extended = data.extend(z_new, y_new)
        self.z_stats = extended.z_stats
        self.y_stats = extended.y_stats
        losses = self.train(extended, epochs=epochs, **kwargs)
        return extended, losses

    # --- inference-time evaluation ---

    def predict(self, z_raw: np.ndarray, keep_cache: bool = False):
        """Mean and variance images in physical units for a batch of feature
        images (N, H, W, Cz) -> (M, V) each (N, H, W, 2)."""
        h, w = self.image_shape
        z_std = self._pad(self.z_stats.standardize(z_raw))
        out = self.net.forward(z_std, training=False)
        lv = out[..., 2:]
        m_std = out[:, :h, :w, :2]
        v_std = np.exp(lv[:, :h, :w, :]) + self.nugget
        ys = self.y_stats.std
        M = m_std * ys + self.y_stats.mean
        V = v_std * ys**2
        if keep_cache:
            self._cache = lv
        return M, V

    def backprop_inputs(self, dM: np.ndarray, dV: np.ndarray) -> np.ndarray:
        """Gradient with respect to the raw feature image, chained through the
        standardization of inputs and outputs. Uses the cache from the last
        predict(..., keep_cache=True) call."""
        if self._cache is None:
            raise RuntimeError("no cached forward pass; call predict(keep_cache=True) first")
        lv = self._cache
        h, w = self.image_shape
        hp, wp = self.net.image_shape
        ys = self.y_stats.std
        seed = np.zeros((dM.shape[0], hp, wp, 4))
        seed[:, :h, :w, :2] = dM * ys
        seed[:, :h, :w, 2:] = dV * ys**2 * np.exp(lv[:, :h, :w, :])
        dz_std = self.net.backward(seed)
        if (hp, wp) != (h, w):
            dz_std = _fold_pad_gradient(dz_std, h, w)
        return dz_std / self.z_stats.std

    # --- persistence: JSON header + little-endian float64 blob ---

    def save(self, path: str) -> None:
        state = self.net.state_arrays()
        order = sorted(state)
        header = {
            "format_version": MODEL_FORMAT_VERSION,
            "architecture": self.net.config(),
            "z_stats": self.z_stats.to_json(),
            "y_stats": self.y_stats.to_json(),
            "nugget": self.nugget,
            "image_shape": list(self.image_shape),
            "arrays": [{"name": k, "shape": list(state[k].shape)} for k in order],
        }
        blob = b"".join(np.ascontiguousarray(state[k], dtype="<f8").tobytes() for k in order)
        head = json.dumps(header).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            fh.write(blob)

    @classmethod
    def load(cls, path: str) -> "ConditionalModel":
        with open(path, "rb") as fh:
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode())
            blob = fh.read()
        if header["format_version"] != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {header['format_version']}")
        net = GaussianFieldNet.from_config(header["architecture"])
        state = {}
        offset = 0
        for entry in header["arrays"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            state[entry["name"]] = arr.reshape(entry["shape"])
            offset += size * 8
        net.set_state(state)
        return cls(
            net,
            ChannelStats.from_json(header["z_stats"]),
            ChannelStats.from_json(header["y_stats"]),
            nugget=header["nugget"],
            image_shape=tuple(header["image_shape"]),
        )
