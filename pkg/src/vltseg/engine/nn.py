"""Parameter containers and the basic trainable layers."""

import math

import numpy as np

from . import functional as F
from .tensor import Tensor


def Parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad and val.is_leaf:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad and item.is_leaf:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = Parameter(uniform_fan_in(rng, (d_in, d_out), d_in))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Channel-last k x k convolution with 'same' zero padding."""

    def __init__(self, c_in, c_out, k, rng, stride=1):
        self.k = k
        self.stride = stride
        fan_in = k * k * c_in
        self.weight = Parameter(uniform_fan_in(rng, (fan_in, c_out), fan_in))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x):
        return F.conv2d(x, self.weight, self.bias, k=self.k, stride=self.stride, pad=self.k // 2)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num, dim, rng, scale=1.0):
        self.weight = Parameter(rng.normal(0.0, scale, size=(num, dim)))

    def __call__(self, ids):
        return F.embedding(self.weight, ids)
