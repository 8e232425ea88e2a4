"""Layers with explicit forward/backward passes on (N, C, H, W) arrays.

Every layer caches what its backward pass needs during a training-mode
forward call.  Parameters live in ``layer.params`` and their gradients in
``layer.grads`` under the same keys; non-trainable state (batch-norm running
statistics) lives in ``layer.buffers``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def out_shape(self, in_shape):
        return in_shape

    def init(self, rng, dtype):
        pass

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def children(self):
        """(name, layer) pairs of nested layers."""
        return []

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called without a training-mode forward")
        return self._cache


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    """Cross-correlation with zero padding."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, pad=0, bias=True):
        super().__init__()
        self.cin, self.cout, self.k, self.s, self.p = in_channels, out_channels, kernel, stride, pad
        self.use_bias = bias

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if c != self.cin:
            raise ShapeError(f"conv expects {self.cin} input channels, got {c}")
        hp, wp = h + 2 * self.p, w + 2 * self.p
        if self.k > hp or self.k > wp:
            raise ShapeError(f"conv kernel {self.k} larger than padded input {hp}x{wp}")
        return (self.cout, (hp - self.k) // self.s + 1, (wp - self.k) // self.s + 1)

    def init(self, rng, dtype):
        fan_in = self.cin * self.k * self.k
        self.params["weight"] = _he_normal(rng, (self.cout, self.cin, self.k, self.k), fan_in, dtype)
        if self.use_bias:
            self.params["bias"] = np.zeros(self.cout, dtype=dtype)

    def _cols(self, x):
        p, k, s = self.p, self.k, self.s
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        return cols, xp.shape, (n, ho, wo)

    def forward(self, x, train=False, rng=None):
        cols, xp_shape, (n, ho, wo) = self._cols(x)
        w = self.params["weight"].reshape(self.cout, -1)
        out = cols @ w.T
        if self.use_bias:
            out += self.params["bias"]
        if train:
            self._cache = (cols, xp_shape, x.shape, (n, ho, wo))
        return out.reshape(n, ho, wo, self.cout).transpose(0, 3, 1, 2)

    def backward(self, dy):
        cols, xp_shape, x_shape, (n, ho, wo) = self._need_cache()
        k, s, p = self.k, self.s, self.p
        d = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.cout)
        w = self.params["weight"]
        self.grads["weight"] = (d.T @ cols).reshape(w.shape)
        if self.use_bias:
            self.grads["bias"] = d.sum(axis=0)
        dcols = (d @ w.reshape(self.cout, -1)).reshape(n, ho, wo, self.cin, k, k)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        mask = x > 0
        if train:
            self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._need_cache()


class MaxPool2d(Layer):
    """Window maxima; gradient goes to the first (row-major) maximal element."""

    kind = "maxpool"

    def __init__(self, kernel=2, stride=2):
        super().__init__()
        self.k, self.s = kernel, stride

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if self.k > h or self.k > w:
            raise ShapeError(f"pool window {self.k} larger than input {h}x{w}")
        return (c, (h - self.k) // self.s + 1, (w - self.k) // self.s + 1)

    def forward(self, x, train=False, rng=None):
        k, s = self.k, self.s
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(*win.shape[:4], k * k)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (idx, x.shape)
        return out

    def backward(self, dy):
        idx, x_shape = self._need_cache()
        k, s = self.k, self.s
        ho, wo = idx.shape[2:]
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                hit = idx == i * k + j
                if hit.any():
                    dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dy * hit
        return dx


class BatchNorm(Layer):
    """Batch normalization over channels; running stats blend as m*old + (1-m)*batch."""

    kind = "bn"

    def __init__(self, channels, eps=1e-5, momentum=0.9):
        super().__init__()
        self.c, self.eps, self.momentum = channels, eps, momentum

    def out_shape(self, in_shape):
        if in_shape[0] != self.c:
            raise ShapeError(f"batchnorm expects {self.c} channels, got {in_shape[0]}")
        return in_shape

    def init(self, rng, dtype):
        self.params["gamma"] = np.ones(self.c, dtype=dtype)
        self.params["beta"] = np.zeros(self.c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(self.c, dtype=dtype)
        self.buffers["running_var"] = np.ones(self.c, dtype=dtype)

    @staticmethod
    def _axes(x):
        return (0, 2, 3) if x.ndim == 4 else (0,)

    def _bcast(self, v, x):
        return v.reshape(1, -1, 1, 1) if x.ndim == 4 else v.reshape(1, -1)

    def forward(self, x, train=False, rng=None):
        axes = self._axes(x)
        if train:
            mu = x.mean(axis=axes)
            var = ((x - self._bcast(mu, x)) ** 2).mean(axis=axes)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = (m * rm + (1 - m) * mu).astype(rm.dtype)
            self.buffers["running_var"] = (m * rv + (1 - m) * var).astype(rv.dtype)
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mu, x)) * self._bcast(inv, x)
        if train:
            self._cache = (xhat, inv, axes)
        return xhat * self._bcast(self.params["gamma"], x) + self._bcast(self.params["beta"], x)

    def backward(self, dy):
        xhat, inv, axes = self._need_cache()
        m = dy.size // dy.shape[1]
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        dxhat = dy * self._bcast(self.params["gamma"], dy)
        s1 = self._bcast(dxhat.sum(axis=axes), dy)
        s2 = self._bcast((dxhat * xhat).sum(axis=axes), dy)
        return self._bcast(inv, dy) / m * (m * dxhat - s1 - xhat * s2)


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-rate) in training, identity otherwise."""

    kind = "dropout"

    def __init__(self, rate=0.5):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            if train:
                self._cache = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs a random generator")
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy if self._cache is None else dy * self._cache


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._need_cache())


class GlobalAvgPool(Layer):
    kind = "gap"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"global average pool expects (C, H, W), got {in_shape}")
        return (in_shape[0],)

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        shape = self._need_cache()
        return np.broadcast_to(dy[:, :, None, None] / (shape[2] * shape[3]), shape).copy()


class FullyConnected(Layer):
    kind = "fc"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.fin, self.fout = in_features, out_features

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"fully-connected expects a flat input, got {in_shape}; add flatten or gap")
        if in_shape[0] != self.fin:
            raise ShapeError(f"fully-connected expects {self.fin} features, got {in_shape[0]}")
        return (self.fout,)

    def init(self, rng, dtype):
        self.params["weight"] = _he_normal(rng, (self.fout, self.fin), self.fin, dtype)
        self.params["bias"] = np.zeros(self.fout, dtype=dtype)

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        x = self._need_cache()
        self.grads["weight"] = dy.T @ x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return [(str(i), l) for i, l in enumerate(self.layers)]

    def out_shape(self, in_shape):
        shape = in_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        return shape

    def init(self, rng, dtype):
        for layer in self.layers:
            layer.init(rng, dtype)

    def forward(self, x, train=False, rng=None, check_finite=False):
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, train, rng)
            if check_finite and not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite activation after layer {i} ({layer.kind})")
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class ResidualBlock(Layer):
    """out = inner(x) + x, or inner(x) + projection(x) with a strided 1x1 conv."""

    kind = "residual"

    def __init__(self, inner: Sequential, projection: Conv2d | None = None):
        super().__init__()
        self.inner = inner
        self.proj = projection

    def children(self):
        out = [("inner", self.inner)]
        if self.proj is not None:
            out.append(("proj", self.proj))
        return out

    def out_shape(self, in_shape):
        shape = self.inner.out_shape(in_shape)
        skip = self.proj.out_shape(in_shape) if self.proj is not None else tuple(in_shape)
        if tuple(shape) != tuple(skip):
            raise ShapeError(
                f"residual branch output {tuple(shape)} does not match skip path {tuple(skip)}; set projection"
            )
        return shape

    def init(self, rng, dtype):
        self.inner.init(rng, dtype)
        if self.proj is not None:
            self.proj.init(rng, dtype)

    def forward(self, x, train=False, rng=None):
        out = self.inner.forward(x, train, rng)
        return out + (self.proj.forward(x, train, rng) if self.proj is not None else x)

    def backward(self, dy):
        dx = self.inner.backward(dy)
        return dx + (self.proj.backward(dy) if self.proj is not None else dy)


def walk(layer: Layer, prefix: str = ""):
    """Yield (dotted path, layer) for the layer and all nested layers."""
    yield prefix, layer
    for name, child in layer.children():
        yield from walk(child, f"{prefix}.{name}" if prefix else name)
