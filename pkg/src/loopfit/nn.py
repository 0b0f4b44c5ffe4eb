"""Layers and optimizers built on the autograd tape.

Initialization draws from a caller-supplied numpy Generator in float64 and
casts to the layer dtype, so the draw sequence (and therefore the model) is
reproducible for a given seed regardless of dtype.
"""

from __future__ import annotations

import numpy as np

from . import autograd
from .autograd import Parameter, Tensor


class Linear:
    def __init__(self, n_in, n_out, rng, dtype=np.float64):
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.w = Parameter(rng.uniform(-limit, limit, size=(n_in, n_out)), dtype=dtype)
        self.b = Parameter(np.zeros(n_out), dtype=dtype)

    def __call__(self, x):
        return autograd.linear(x, self.w, self.b)

    def named_parameters(self, prefix=""):
        return [(prefix + "w", self.w), (prefix + "b", self.b)]


class MLP:
    """Fully connected stack with ReLU between layers and a linear head."""

    def __init__(self, sizes, rng, dtype=np.float64):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, dtype=dtype) for i in range(len(sizes) - 1)
        ]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = layer(x).relu()
        return self.layers[-1](x)

    def named_parameters(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(prefix=f"{prefix}fc{i}."))
        return out


class Conv2d:
    """3x3 convolution, stride 1, same padding (fixed by the kernel backend).

    `bias=False` is for layers feeding straight into batchnorm, where a bias
    would be cancelled by the mean subtraction anyway.
    """

    def __init__(self, c_in, c_out, rng, dtype=np.float64, bias=True):
        std = np.sqrt(2.0 / (c_in * 9))
        self.w = Parameter(rng.normal(0.0, std, size=(c_out, c_in, 3, 3)), dtype=dtype)
        if bias:
            self.b = Parameter(np.zeros(c_out), dtype=dtype)
        else:
            self.b = Tensor(np.zeros(c_out, dtype=dtype))

    def __call__(self, x):
        return autograd.conv2d(x, self.w, self.b)

    def named_parameters(self, prefix=""):
        out = [(prefix + "w", self.w)]
        if isinstance(self.b, Parameter):
            out.append((prefix + "b", self.b))
        return out


class BatchNorm2d:
    """Per-channel batch normalization over (batch, time, width).

    Training mode normalizes with current-batch statistics (optionally
    restricted to a validity mask over the time axis) and updates running
    statistics; eval mode uses the running statistics only, which makes
    single-utterance embedding deterministic.
    """

    def __init__(self, channels, dtype=np.float64, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.channels = channels

    def __call__(self, x, mask=None, training=True):
        c = self.channels
        if training:
            if mask is None:
                mean = x.mean(axis=(0, 2, 3), keepdims=True)
                var = ((x - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
            else:
                n_valid = float(mask.sum()) * x.shape[3]
                m = Tensor(mask.astype(x.dtype))
                mean = (x * m).sum(axis=(0, 2, 3), keepdims=True) * (1.0 / n_valid)
                var = (((x - mean) * m) ** 2).sum(axis=(0, 2, 3), keepdims=True) * (
                    1.0 / n_valid
                )
            mom = self.momentum
            self.running_mean += mom * (mean.data.reshape(c) - self.running_mean)
            self.running_var += mom * (var.data.reshape(c) - self.running_var)
            xhat = (x - mean) / (var + self.eps).sqrt()
        else:
            rm = Tensor(self.running_mean.reshape(1, c, 1, 1))
            rv = np.sqrt(self.running_var + self.eps).reshape(1, c, 1, 1)
            xhat = (x - rm) / Tensor(rv)
        return xhat * self.gamma.reshape(1, c, 1, 1) + self.beta.reshape(1, c, 1, 1)

    def named_parameters(self, prefix=""):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]

    def state_arrays(self, prefix=""):
        return {
            prefix + "running_mean": self.running_mean,
            prefix + "running_var": self.running_var,
        }

    def load_state_arrays(self, arrays, prefix=""):
        self.running_mean = np.asarray(arrays[prefix + "running_mean"], dtype=self.running_mean.dtype)
        self.running_var = np.asarray(arrays[prefix + "running_var"], dtype=self.running_var.dtype)


class Adam:
    """Adaptive-moment optimizer; parameter order fixes the update order.

    `weight_decay` is decoupled (applied directly to the weights, not mixed
    into the moments).
    """

    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state_arrays(self):
        out = {"opt.t": np.array([float(self.t)])}
        for name, _ in self.params:
            out[f"opt.m.{name}"] = self._m[name]
            out[f"opt.v.{name}"] = self._v[name]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(round(float(np.asarray(arrays["opt.t"]).reshape(-1)[0])))
        for name, p in self.params:
            self._m[name] = np.asarray(arrays[f"opt.m.{name}"], dtype=p.data.dtype).reshape(
                p.data.shape
            )
            self._v[name] = np.asarray(arrays[f"opt.v.{name}"], dtype=p.data.dtype).reshape(
                p.data.shape
            )


class SGD:
    def __init__(self, named_params, lr=1e-3):
        self.params = list(named_params)
        self.lr = lr

    def step(self):
        for _, p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state_arrays(self):
        return {}

    def load_state_arrays(self, arrays):
        pass
