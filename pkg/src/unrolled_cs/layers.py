"""Stateful layer wrappers used to assemble the generator and discriminator.

Each layer's ``forward`` returns ``(output, cache)`` and ``backward(cache,
grad)`` returns the input gradient while *accumulating* into the
``Parameter.grad`` buffers. Accumulation is what makes weight sharing work:
calling one layer K times and back-propagating each call sums the
contributions.
"""

from __future__ import annotations

import numpy as np

from .tensor_core import (
    BatchNormParams,
    ConvLayerParams,
    activation,
    activation_backward,
    batchnorm_backward_cached,
    batchnorm_forward_cached,
    conv2d_backward_cached,
    conv2d_forward_cached,
    he_normal,
)


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Module:
    """Base class: owns named parameters, buffers and child modules."""

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_mode(self, mode: str):
        for child in self.children():
            child.set_mode(mode)

    def children(self) -> list["Module"]:
        return []

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, name, in_ch, out_ch, kernel, rng, stride=1, padding="same-zero", dtype=np.float64, bias=True):
        self.weight = Parameter(f"{name}.weight", he_normal(rng, (out_ch, in_ch, kernel, kernel), dtype))
        # a bias right before batch norm is cancelled by the mean subtraction
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch, dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    @property
    def params(self) -> ConvLayerParams:
        return ConvLayerParams(self.weight.value, None if self.bias is None else self.bias.value, self.stride, self.padding)

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def forward(self, x):
        out, cache = conv2d_forward_cached(x, self.params)
        return out, (x.shape, cache)

    def backward(self, cache, grad_out, need_input=True):
        x_shape, conv_cache = cache
        gi, gk, gb = conv2d_backward_cached(x_shape, self.params, grad_out, conv_cache, need_input)
        self.weight.grad += gk
        if self.bias is not None:
            self.bias.grad += gb
        return gi


class BatchNorm2d(Module):
    def __init__(self, name, channels, dtype=np.float64, epsilon=1e-5, momentum=0.9):
        self.name = name
        self.bn = BatchNormParams.create(channels, dtype, epsilon=epsilon, momentum=momentum)
        self.scale = Parameter(f"{name}.scale", self.bn.scale)
        self.shift = Parameter(f"{name}.shift", self.bn.shift)

    def parameters(self):
        return [self.scale, self.shift]

    def buffers(self):
        return {f"{self.name}.running_mean": self.bn.running_mean, f"{self.name}.running_var": self.bn.running_var}

    def set_mode(self, mode):
        self.bn.mode = mode

    def forward(self, x):
        # Parameter.value may have been rebound (checkpoint load), keep in sync
        self.bn.scale, self.bn.shift = self.scale.value, self.shift.value
        return batchnorm_forward_cached(x, self.bn)

    def backward(self, cache, grad_out):
        gi, gs, gb = batchnorm_backward_cached(self.bn, grad_out, cache)
        self.scale.grad += gs
        self.shift.grad += gb
        return gi


class Activation(Module):
    def __init__(self, kind):
        self.kind = kind

    def forward(self, x):
        out = activation(x, self.kind)
        return out, out

    def backward(self, cache, grad_out):
        return activation_backward(cache, grad_out, self.kind)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def children(self):
        return self.layers

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, caches, grad):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(c, grad)
        return grad
