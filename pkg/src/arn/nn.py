"""Affine layers on top of the tape. Weights are stored (in, out) for row-vector inputs."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, leaky_relu, matmul
from .errors import SizeMismatch


def uniform_init(rng, n_in, n_out):
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out))


class Linear:
    def __init__(self, weight, bias=None, name="linear"):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        self.weight.name = f"{name}.weight"
        self.bias = None
        if bias is not None:
            self.bias = bias if isinstance(bias, Tensor) else Tensor(bias, requires_grad=True)
            self.bias.name = f"{name}.bias"
        self.name = name

    @classmethod
    def init(cls, rng, n_in, n_out, name, bias=True):
        return cls(uniform_init(rng, n_in, n_out), np.zeros(n_out) if bias else None, name)

    @property
    def n_in(self):
        return self.weight.shape[0]

    @property
    def n_out(self):
        return self.weight.shape[1]

    def __call__(self, x):
        if x.shape[-1] != self.n_in:
            raise SizeMismatch(f"{self.name}: input width {x.shape[-1]} != {self.n_in}")
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y

    def parameters(self):
        out = [(self.weight.name, self.weight, True)]
        if self.bias is not None:
            out.append((self.bias.name, self.bias, False))
        return out


class MLP:
    """Affine layers with LeakyReLU between them (none after the last)."""

    def __init__(self, layers, slope=0.2):
        self.layers = list(layers)
        self.slope = slope

    @classmethod
    def init(cls, rng, sizes, name, slope=0.2, final_activation=False):
        layers = [Linear.init(rng, a, b, f"{name}.{k}") for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        m = cls(layers, slope)
        m.final_activation = final_activation
        return m

    final_activation = False

    def __call__(self, x):
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < last or self.final_activation:
                x = leaky_relu(x, self.slope)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]
