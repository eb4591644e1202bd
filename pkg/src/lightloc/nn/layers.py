"""Layers with explicit forward/backward passes, float64 throughout.

Activations are batch-first and channels-last: ``(N, L, C)`` for sequence
layers and ``(N, F)`` for fully connected ones. Keeping channels last lets the
im2col products feed straight into the next layer without transposes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

LAYER_KINDS = ("conv1d", "batchnorm", "relu", "maxpool", "fc", "dropout", "flatten", "sigmoid")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    conv1d: in_channels, out_channels, kernel; batchnorm: features;
    maxpool: width; fc: fan_in, fan_out; dropout: p.
    """

    kind: str
    dims: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for key, value in self.dims.items():
            if key == "p":
                if not 0.0 <= value < 1.0:
                    raise ValueError("dropout p must be in [0, 1)")
            elif value <= 0:
                raise ValueError(f"layer dim {key} must be positive")

    def to_json(self) -> dict:
        return {"kind": self.kind, **self.dims}

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        return cls(d.pop("kind"), d)


class Layer:
    params: dict
    grads: dict
    buffers: dict

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a recorded forward pass")
        return self._cache


def _kaiming_uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Layer):
    """Stride-1 convolution with zero padding that preserves length (odd kernels).

    Weights are stored as ``(out_channels, in_channels, kernel)``.
    """

    def __init__(self, in_channels, out_channels, kernel, rng):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd for length-preserving padding")
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        fan_in = in_channels * kernel
        self.params["weight"] = _kaiming_uniform(rng, fan_in, (out_channels, in_channels, kernel))
        self.params["bias"] = np.zeros(out_channels)
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ShapeError(f"conv1d expects (N, L, {self.in_channels}), got {x.shape}")
        n, length, c = x.shape
        pad = self.kernel // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        cols = sliding_window_view(xp, self.kernel, axis=1).reshape(n * length, c * self.kernel)
        w = self.params["weight"].reshape(self.out_channels, -1)
        out = cols @ w.T
        out += self.params["bias"]
        self._cache = (cols, x.shape)
        return out.reshape(n, length, self.out_channels)

    def backward(self, grad):
        cols, (n, length, c) = self._need_cache()
        g = grad.reshape(n * length, self.out_channels)
        w = self.params["weight"].reshape(self.out_channels, -1)
        self.grads["weight"] += (g.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] += g.sum(axis=0)
        dcols = (g @ w).reshape(n, length, c, self.kernel)
        pad = self.kernel // 2
        dxp = np.zeros((n, length + 2 * pad, c))
        for k in range(self.kernel):
            dxp[:, k:k + length, :] += dcols[:, :, :, k]
        return dxp[:, pad:pad + length, :]


class BatchNorm1d(Layer):
    """Batch normalization over the batch (and length, for 3-D input) axes."""

    def __init__(self, features, momentum=0.1, eps=1e-5):
        super().__init__()
        self.features, self.momentum, self.eps = features, momentum, eps
        self.params["gamma"] = np.ones(features)
        self.params["beta"] = np.zeros(features)
        self.buffers["running_mean"] = np.zeros(features)
        self.buffers["running_var"] = np.ones(features)
        self.zero_grad()

    def _axes(self, x):
        if x.shape[-1] != self.features or x.ndim not in (2, 3):
            raise ShapeError(f"batchnorm({self.features}) got input {x.shape}")
        return tuple(range(x.ndim - 1))

    def forward(self, x, train=False, rng=None):
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size / self.features
            unbiased = var * m / max(m - 1, 1)
            self.buffers["running_mean"] = (1 - self.momentum) * self.buffers["running_mean"] + self.momentum * mean
            self.buffers["running_var"] = (1 - self.momentum) * self.buffers["running_var"] + self.momentum * unbiased
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        scale = self.params["gamma"] * inv
        out = x * scale
        out += self.params["beta"] - mean * scale
        self._cache = (x, mean, inv, axes, train)
        return out

    def backward(self, grad):
        x, mean, inv, axes, train = self._need_cache()
        xhat = (x - mean) * inv
        self.grads["gamma"] += (grad * xhat).sum(axis=axes)
        self.grads["beta"] += grad.sum(axis=axes)
        dxhat = grad * self.params["gamma"]
        if not train:
            return dxhat * inv
        mean_dxhat = dxhat.mean(axis=axes)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes)
        return (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return grad * self._need_cache()


class Sigmoid(Layer):
    def forward(self, x, train=False, rng=None):
        out = expit(x)
        self._cache = out
        return out

    def backward(self, grad):
        out = self._need_cache()
        return grad * out * (1.0 - out)


class MaxPool1d(Layer):
    """Non-overlapping max pooling along the length axis of ``(N, L, C)``; a
    trailing remainder shorter than the width is dropped. Ties go to the
    earliest position."""

    def __init__(self, width=2):
        super().__init__()
        self.width = width

    def forward(self, x, train=False, rng=None):
        if x.ndim != 3:
            raise ShapeError(f"maxpool expects (N, L, C), got {x.shape}")
        n, length, c = x.shape
        out_len = length // self.width
        if out_len < 1:
            raise ShapeError(f"sequence of length {length} too short for pool width {self.width}")
        blocks = x[:, :out_len * self.width].reshape(n, out_len, self.width, c)
        if self.width == 2:
            arg = blocks[:, :, 1] > blocks[:, :, 0]
            out = np.where(arg, blocks[:, :, 1], blocks[:, :, 0])
        else:
            arg = blocks.argmax(axis=2)
            out = np.take_along_axis(blocks, arg[:, :, None], axis=2)[:, :, 0]
        self._cache = (arg, x.shape)
        return out

    def backward(self, grad):
        arg, (n, length, c) = self._need_cache()
        out_len = arg.shape[1]
        dx = np.zeros((n, length, c))
        blocks = dx[:, :out_len * self.width].reshape(n, out_len, self.width, c)
        if self.width == 2:
            blocks[:, :, 1] = grad * arg
            blocks[:, :, 0] = grad * ~arg
        else:
            np.put_along_axis(blocks, arg[:, :, None], grad[:, :, None], axis=2)
        return dx


class Linear(Layer):
    def __init__(self, fan_in, fan_out, rng):
        super().__init__()
        self.fan_in, self.fan_out = fan_in, fan_out
        self.params["weight"] = _kaiming_uniform(rng, fan_in, (fan_out, fan_in))
        self.params["bias"] = np.zeros(fan_out)
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ShapeError(f"fc expects (N, {self.fan_in}), got {x.shape}")
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        x = self._need_cache()
        self.grads["weight"] += grad.T @ x
        self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"]


class Dropout(Layer):
    """Inverted dropout; the identity outside training."""

    def __init__(self, p):
        super().__init__()
        self.p = p

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0:
            self._cache = None
            return x
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        keep = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        self._cache = keep
        return x * keep

    def backward(self, grad):
        return grad if self._cache is None else grad * self._cache


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._need_cache())


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    d = spec.dims
    if spec.kind == "conv1d":
        return Conv1d(d["in_channels"], d["out_channels"], d["kernel"], rng)
    if spec.kind == "batchnorm":
        return BatchNorm1d(d["features"])
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "maxpool":
        return MaxPool1d(d.get("width", 2))
    if spec.kind == "fc":
        return Linear(d["fan_in"], d["fan_out"], rng)
    if spec.kind == "dropout":
        return Dropout(d["p"])
    if spec.kind == "flatten":
        return Flatten()
    if spec.kind == "sigmoid":
        return Sigmoid()
    raise ValueError(spec.kind)


class Sequential:
    """A chain of layers built from ``LayerSpec``s with a shared parameter registry."""

    def __init__(self, specs, seed: int = 0):
        self.specs = list(specs)
        rng = np.random.default_rng(seed)
        self.layers = [build_layer(s, rng) for s in self.specs]
        self._forwarded = False

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        self._forwarded = True
        return x

    __call__ = forward

    def backward(self, grad):
        if not self._forwarded:
            raise RuntimeError("backward called without a forward pass")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield f"{i}.{name}", layer, name

    def parameters(self):
        return [layer.params[name] for _, layer, name in self.named_parameters()]

    def gradients(self):
        return [layer.grads[name] for _, layer, name in self.named_parameters()]

    def state_dict(self) -> dict:
        state = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                state[f"{i}.{name}"] = value.copy()
            for name, value in layer.buffers.items():
                state[f"{i}.{name}"] = np.asarray(value).copy()
        return state

    def load_state_dict(self, state: dict):
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name in store:
                    key = f"{i}.{name}"
                    if key not in state:
                        raise KeyError(f"missing tensor {key}")
                    value = np.asarray(state[key], dtype=np.float64)
                    if value.shape != np.shape(store[name]):
                        raise ShapeError(f"{key}: shape {value.shape} != {np.shape(store[name])}")
                    store[name] = value.copy()
            layer.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())
