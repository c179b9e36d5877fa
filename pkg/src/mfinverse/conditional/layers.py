"""Neural-network layers with reverse mode w.r.t. both weights and inputs.

All layers operate on float64 arrays in channels-last layout (N, H, W, C) or
(N, F) for dense stages.  ``forward`` caches what ``backward`` needs;
``backward`` returns the input gradient and stores parameter gradients on the
layer.  A plain-numpy implementation keeps the input-gradient path (needed by
the inference loop) and the training path in one place.
"""

from __future__ import annotations

import numpy as np


class Layer:
    params: list[str] = []

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.params}

    def grad_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, "g_" + name) for name in self.params}


class Conv2D(Layer):
    """3x3 (or kxk) same-padding convolution, stride 1."""

    params = ["W", "b"]

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, ksize: int = 3):
        fan_in = ksize * ksize * in_ch
        scale = np.sqrt(2.0 / fan_in)
        self.W = rng.normal(0.0, scale, size=(ksize, ksize, in_ch, out_ch))
        self.b = np.zeros(out_ch)
        self.ksize = ksize
        self.pad = ksize // 2

    def forward(self, x, training):
        n, h, w, _ = x.shape
        p = self.pad
        xpad = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        out = np.tile(self.b, (n, h, w, 1))
        for di in range(self.ksize):
            for dj in range(self.ksize):
                out += xpad[:, di : di + h, dj : dj + w, :] @ self.W[di, dj]
        self._xpad = xpad
        self._shape = (n, h, w)
        return out

    def backward(self, gout):
        n, h, w = self._shape
        p = self.pad
        gxpad = np.zeros_like(self._xpad)
        self.g_W = np.empty_like(self.W)
        gflat = gout.reshape(-1, gout.shape[-1])
        for di in range(self.ksize):
            for dj in range(self.ksize):
                patch = self._xpad[:, di : di + h, dj : dj + w, :]
                self.g_W[di, dj] = patch.reshape(-1, patch.shape[-1]).T @ gflat
                gxpad[:, di : di + h, dj : dj + w, :] += gout @ self.W[di, dj].T
        self.g_b = gout.sum(axis=(0, 1, 2))
        return gxpad[:, p : p + h, p : p + w, :]


class Dense(Layer):
    params = ["W", "b"]

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        scale = np.sqrt(2.0 / in_dim)
        self.W = rng.normal(0.0, scale, size=(in_dim, out_dim))
        self.b = np.zeros(out_dim)

    def forward(self, x, training):
        self._x = x
        return x @ self.W + self.b

    def backward(self, gout):
        self.g_W = self._x.T @ gout
        self.g_b = gout.sum(axis=0)
        return gout @ self.W.T


class BatchNorm(Layer):
    """Normalization over all axes but the last; running stats for inference."""

    params = ["gamma", "beta"]

    def __init__(self, n_ch: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = np.ones(n_ch)
        self.beta = np.zeros(n_ch)
        self.run_mean = np.zeros(n_ch)
        self.run_var = np.ones(n_ch)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training):
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.run_mean = self.momentum * self.run_mean + (1 - self.momentum) * mean
            self.run_var = self.momentum * self.run_var + (1 - self.momentum) * var
        else:
            mean, var = self.run_mean, self.run_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, axes, training)
        return self.gamma * xhat + self.beta

    def backward(self, gout):
        xhat, inv_std, axes, training = self._cache
        self.g_gamma = (gout * xhat).sum(axis=axes)
        self.g_beta = gout.sum(axis=axes)
        if not training:
            return gout * self.gamma * inv_std
        m = np.prod([xhat.shape[a] for a in axes])
        gxhat = gout * self.gamma
        return (
            inv_std
            / m
            * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        )


class ELU(Layer):
    def forward(self, x, training):
        neg = x <= 0
        ex = np.exp(np.minimum(x, 0.0))
        self._deriv = np.where(neg, ex, 1.0)
        return np.where(neg, ex - 1.0, x)

    def backward(self, gout):
        return gout * self._deriv


class MaxPool2(Layer):
    def forward(self, x, training):
        n, h, w, c = x.shape
        blocks = x.reshape(n, h // 2, 2, w // 2, 2, c)
        blocks = blocks.transpose(0, 1, 3, 2, 4, 5).reshape(n, h // 2, w // 2, 4, c)
        arg = blocks.argmax(axis=3)
        out = np.take_along_axis(blocks, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        self._arg = arg
        self._shape = (n, h, w, c)
        return out

    def backward(self, gout):
        n, h, w, c = self._shape
        gblocks = np.zeros((n, h // 2, w // 2, 4, c))
        np.put_along_axis(gblocks, self._arg[:, :, :, None, :], gout[:, :, :, None, :], axis=3)
        gx = gblocks.reshape(n, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        return gx.reshape(n, h, w, c)


class AvgPool2(Layer):
    def forward(self, x, training):
        n, h, w, c = x.shape
        self._shape = (n, h, w, c)
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(self, gout):
        n, h, w, c = self._shape
        gx = np.repeat(np.repeat(gout, 2, axis=1), 2, axis=2)
        return gx / 4.0


class Upsample2(Layer):
    """Nearest-neighbor 2x upsampling (mirror of the pooling stages)."""

    def forward(self, x, training):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, gout):
        n, h, w, c = gout.shape
        return gout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class Dropout(Layer):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng

    def forward(self, x, training):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, gout):
        if self._mask is None:
            return gout
        return gout * self._mask


class Flatten(Layer):
    def forward(self, x, training):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gout):
        return gout.reshape(self._shape)


class Reshape(Layer):
    def __init__(self, target: tuple[int, int, int]):
        self.target = target

    def forward(self, x, training):
        return x.reshape(x.shape[0], *self.target)

    def backward(self, gout):
        return gout.reshape(gout.shape[0], -1)
