"""Layers, parameter plumbing and the Adam optimizer used by every network.

Layers hold `Tensor` parameters (requires_grad=True) plus plain ndarray
buffers (batch-norm running statistics). `named_parameters` / `named_buffers`
give the flat name->array views the checkpoint container serializes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _he_scale(fan_in):
    return np.sqrt(2.0 / fan_in)


class Conv2d:
    """Convolution layer; He-scaled weight init, zero bias."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, *, rng, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2
        fan_in = in_channels * kernel * kernel
        w = rng.standard_normal((out_channels, in_channels, kernel, kernel)) * _he_scale(fan_in)
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def named_parameters(self, prefix=""):
        return [(prefix + "w", self.w), (prefix + "b", self.b)]

    def named_buffers(self, prefix=""):
        return []


class Linear:
    def __init__(self, in_features, out_features, *, rng, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        w = rng.standard_normal((out_features, in_features)) * _he_scale(in_features)
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, ad.transpose(self.w, (1, 0))) + ad.reshape(self.b, (1, -1))

    def named_parameters(self, prefix=""):
        return [(prefix + "w", self.w), (prefix + "b", self.b)]

    def named_buffers(self, prefix=""):
        return []


class BatchNorm2d:
    """Per-channel batch normalization without a learned affine.

    Training mode normalizes with batch statistics (and, unless stat updates
    are suppressed, folds them into the running estimates); eval mode uses the
    running estimates, so inference is a pure function of the inputs.
    """

    def __init__(self, channels, *, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x, *, training, update_stats=True):
        if training:
            mean = ad.tmean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mean
            var = ad.tmean(ad.square(centered), axis=(0, 2, 3), keepdims=True)
            if update_stats:
                m = self.momentum
                self.running_mean = ((1 - m) * self.running_mean + m * mean.data.reshape(-1)).astype(self.running_mean.dtype)
                self.running_var = ((1 - m) * self.running_var + m * var.data.reshape(-1)).astype(self.running_var.dtype)
            return centered / ad.sqrt(var + self.eps)
        mean = self.running_mean.reshape(1, -1, 1, 1)
        std = np.sqrt(self.running_var.reshape(1, -1, 1, 1) + self.eps)
        return (x - Tensor(mean)) / Tensor(std)

    def named_parameters(self, prefix=""):
        return []

    def named_buffers(self, prefix=""):
        return [(prefix + "running_mean", self.running_mean), (prefix + "running_var", self.running_var)]

    def load_buffers(self, prefix, arrays):
        self.running_mean = np.array(arrays[prefix + "running_mean"])
        self.running_var = np.array(arrays[prefix + "running_var"])


def collect_named(parts, prefix=""):
    """Flatten (name, layer) pairs into named parameter/buffer lists."""
    params, buffers = [], []
    for name, layer in parts:
        params.extend(layer.named_parameters(prefix + name + "."))
        buffers.extend(layer.named_buffers(prefix + name + "."))
    return params, buffers


class Adam:
    """Standard Adam over a fixed parameter list; state is index-keyed so the
    update order (and therefore training) is deterministic."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
