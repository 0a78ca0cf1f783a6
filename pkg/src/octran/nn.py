"""Parameter containers and the layers the OCTraN graph is built from."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor, parameter


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=T.DTYPE)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(rng.standard_normal((d_in, d_out)) / math.sqrt(d_in))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x, tag: str = "linear"):
        y = T.matmul(x, self.weight, tag=tag)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, dim: int, mult: int, rng):
        self.fc1 = Linear(dim, dim * mult, rng)
        self.fc2 = Linear(dim * mult, dim, rng)

    def forward(self, x):
        return self.fc2(T.relu(self.fc1(x, tag="ff")), tag="ff")


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0):
        fan_in = c_in * kernel * kernel
        self.weight = parameter(rng.standard_normal((c_out, c_in, kernel, kernel)) * math.sqrt(2.0 / fan_in))
        self.bias = parameter(np.zeros((1, c_out, 1, 1)))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.stride, self.padding) + self.bias


class ConvTranspose3d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0):
        kernel = tuple(kernel) if isinstance(kernel, (tuple, list)) else (kernel,) * 3
        fan_in = c_in * math.prod(kernel)
        self.weight = parameter(rng.standard_normal((c_in, c_out, *kernel)) * math.sqrt(2.0 / fan_in))
        self.bias = parameter(np.zeros((1, c_out, 1, 1, 1)))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return T.conv_transpose3d(x, self.weight, self.stride, self.padding) + self.bias
