"""Hand-differentiated layers operating on numpy arrays.

Every layer caches what it needs in ``forward`` and consumes it in
``backward``; ``backward`` returns the gradient w.r.t. the layer input and
accumulates parameter gradients into ``Parameter.grad``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from magtac import kernels


class ShapeError(ValueError):
    """Input shape incompatible with a layer's configuration."""


@dataclass
class Parameter:
    value: np.ndarray
    decay: bool = True  # weight decay applies (weights yes, biases / BN affine no)
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)


class Module:
    training = True

    def named_parameters(self, prefix=""):
        """Yield ``(name, Parameter)`` in a fixed, documented order (attribute definition order)."""
        for name, obj in vars(self).items():
            if isinstance(obj, Parameter):
                yield prefix + name, obj
            elif isinstance(obj, Module):
                yield from obj.named_parameters(prefix + name + ".")
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix=""):
        for name, obj in vars(self).items():
            if name in getattr(self, "_buffers", ()):
                yield prefix + name, obj
            elif isinstance(obj, Module):
                yield from obj.named_buffers(prefix + name + ".")
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _children(self):
        for obj in vars(self).values():
            if isinstance(obj, Module):
                yield obj
            elif isinstance(obj, (list, tuple)):
                yield from (item for item in obj if isinstance(item, Module))

    def train(self, mode=True):
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        self._astype_buffers(dtype)
        return self

    def _astype_buffers(self, dtype):
        for name in getattr(self, "_buffers", ()):
            setattr(self, name, getattr(self, name).astype(dtype))
        for child in self._children():
            child._astype_buffers(dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _fan_in_uniform(rng, shape, fan_in, dtype):
    a = np.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(dtype)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int

    def out_size(self, size):
        out = (size + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise ShapeError(f"spatial size {size} too small for {self}")
        return out


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng=None, dtype=np.float64):
        rng = np.random.default_rng() if rng is None else rng
        self.spec = spec
        # the first layer of a network can skip the input gradient (col2im)
        self.needs_input_grad = True
        fan_in = spec.in_channels * spec.kernel**2
        self.weight = Parameter(
            _fan_in_uniform(rng, (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), fan_in, dtype)
        )
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=dtype), decay=False)

    def forward(self, x):
        s = self.spec
        if x.ndim != 4 or x.shape[1] != s.in_channels:
            raise ShapeError(f"conv expects (N, {s.in_channels}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        oh, ow = s.out_size(h), s.out_size(w)
        cols = kernels.im2col(x, s.kernel, s.kernel, s.stride, s.padding)
        out = cols @ self.weight.value.reshape(s.out_channels, -1).T
        out += self.bias.value
        self._cache = (cols, x.shape)
        return np.ascontiguousarray(out.reshape(n, oh, ow, s.out_channels).transpose(0, 3, 1, 2))

    def backward(self, dout):
        s = self.spec
        cols, xshape = self._cache
        d = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, s.out_channels)
        self.weight.grad += (d.T @ cols).reshape(self.weight.shape)
        self.bias.grad += d.sum(axis=0)
        if not self.needs_input_grad:
            return None
        dcols = d @ self.weight.value.reshape(s.out_channels, -1)
        return kernels.col2im(dcols, xshape, s.kernel, s.kernel, s.stride, s.padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype), decay=False)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), decay=False)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"batchnorm expects (N, {self.gamma.shape[0]}, H, W), got {x.shape}")
        g = self.gamma.value[None, :, None, None]
        b = self.beta.value[None, :, None, None]
        if not self.training:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None]) * inv[None, :, None, None]
            self._cache = (xhat, inv, False)
            return g * xhat + b
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in training mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mean
        # running variance tracks the unbiased estimate
        self.running_var = (1 - m) * self.running_var + m * var * count / (count - 1)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv, True)
        return g * xhat + b

    def backward(self, dout):
        xhat, inv, batch_stats = self._cache
        self.gamma.grad += (dout * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.gamma.value[None, :, None, None]
        if not batch_stats:
            return dxhat * inv[None, :, None, None]
        mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv[None, :, None, None]


class ReLU(Module):
    def forward(self, x):
        out = np.maximum(x, 0)
        self._mask = out > 0
        return out

    def backward(self, dout):
        return dout * self._mask


class Flatten(Module):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Linear(Module):
    """Fully connected layer, ``y = x @ W.T + b``."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float64):
        rng = np.random.default_rng() if rng is None else rng
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(_fan_in_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), decay=False)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dout):
        self.weight.grad += dout.T @ self._x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
            if dout is None:
                break
        return dout


def conv_bn_relu(spec: ConvSpec, rng=None, dtype=np.float64):
    """A CBR block: convolution, batch normalization, ReLU."""
    return Sequential(Conv2d(spec, rng, dtype), BatchNorm2d(spec.out_channels, dtype=dtype), ReLU())
