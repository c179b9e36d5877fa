"""Encoder-decoder network mapping low-fidelity feature images to a Gaussian
field over the high-fidelity observables.

Input: (N, H, W, C_in) feature images.  Output: (N, H, W, 4) where channels
0..1 are the predicted means of the two velocity components and channels 2..3
are log-variances, all in standardized space.  The exp + nugget head and the
de-standardization live in the model wrapper.
"""

from __future__ import annotations

import numpy as np

from .layers import (
    AvgPool2,
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    ELU,
    Flatten,
    Layer,
    MaxPool2,
    Reshape,
    Upsample2,
)


class GaussianFieldNet:
    def __init__(
        self,
        image_shape: tuple[int, int],
        in_channels: int,
        channels: tuple[int, int, int] = (16, 32, 64),
        bottleneck: int = 200,
        dropout: float = 0.3,
        pool: str = "max",
        seed: int = 0,
    ):
        h, w = image_shape
        if h % 4 or w % 4:
            raise ValueError("image sides must be divisible by 4 for two pooling stages")
        rng = np.random.default_rng(seed)
        c1, c2, c3 = channels
        pool_cls = MaxPool2 if pool == "max" else AvgPool2
        hq, wq = h // 4, w // 4

        self.image_shape = image_shape
        self.in_channels = in_channels
        self.channels = channels
        self.bottleneck = bottleneck
        self.dropout = dropout
        self.pool = pool

        self.layers: list[Layer] = [
            Conv2D(in_channels, c1, rng),
            BatchNorm(c1),
            ELU(),
            pool_cls(),
            Conv2D(c1, c2, rng),
            BatchNorm(c2),
            ELU(),
            pool_cls(),
            Conv2D(c2, c3, rng),
            BatchNorm(c3),
            ELU(),
            Flatten(),
            Dropout(dropout, rng),
            Dense(hq * wq * c3, bottleneck, rng),
            BatchNorm(bottleneck),
            ELU(),
            Dropout(dropout, rng),
            Dense(bottleneck, hq * wq * c3, rng),
            BatchNorm(hq * wq * c3),
            ELU(),
            Reshape((hq, wq, c3)),
            Conv2D(c3, c2, rng),
            BatchNorm(c2),
            ELU(),
            Upsample2(),
            Conv2D(c2, c1, rng),
            BatchNorm(c1),
            ELU(),
            Upsample2(),
            Conv2D(c1, 4, rng),
        ]
        # A near-linear default for the log-variance channels keeps the first
        # training steps well scaled.
        self.layers[-1].b[2:] = -2.0

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        out = x
        for layer in self.layers:
            out = layer.forward(out, training)
        return out

    def backward(self, gout: np.ndarray) -> np.ndarray:
        g = gout
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    # --- flat parameter access (optimizer state, checkpoints) ---

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for idx, layer in enumerate(self.layers):
            for name, arr in layer.param_arrays().items():
                out[f"{idx}.{name}"] = arr
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for idx, layer in enumerate(self.layers):
            for name, arr in layer.grad_arrays().items():
                out[f"{idx}.{name}"] = arr
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running statistics."""
        out = dict(self.named_params())
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                out[f"{idx}.run_mean"] = layer.run_mean
                out[f"{idx}.run_var"] = layer.run_var
        return out

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        for key, arr in state.items():
            idx, name = key.split(".")
            target = getattr(self.layers[int(idx)], name)
            target[...] = arr

    def config(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "bottleneck": self.bottleneck,
            "dropout": self.dropout,
            "pool": self.pool,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "GaussianFieldNet":
        return cls(
            image_shape=tuple(cfg["image_shape"]),
            in_channels=cfg["in_channels"],
            channels=tuple(cfg["channels"]),
            bottleneck=cfg["bottleneck"],
            dropout=cfg["dropout"],
            pool=cfg["pool"],
        )
