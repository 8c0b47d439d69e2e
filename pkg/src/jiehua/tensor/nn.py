"""Small module system: parameter containers and the layers the models need."""

from __future__ import annotations

import copy
import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .rng import Rng


class Module:
    """Parameter container.

    Parameters and sub-modules are discovered from instance attributes (and
    lists of modules) in definition order, which gives stable dotted names
    such as ``down.0.conv1.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> "Module":
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def set_locked(self, locked: bool) -> "Module":
        for p in self.parameters():
            p.locked = locked
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def clone(self) -> "Module":
        """Deep copy with fresh parameter arrays (bitwise equal values)."""
        return copy.deepcopy(self)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: Rng, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, rng: Rng | None = None, zero=False):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (cout, cin, k, k)
        if zero:
            self.weight = Parameter(np.zeros(shape, np.float32))
            self.bias = Parameter(np.zeros(cout, np.float32))
        else:
            bound = 1.0 / math.sqrt(cin * k * k)
            self.weight = Parameter(_uniform(rng, shape, math.sqrt(3.0) * bound))
            self.bias = Parameter(_uniform(rng, (cout,), bound))

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, fin, fout, rng: Rng):
        bound = 1.0 / math.sqrt(fin)
        self.weight = Parameter(_uniform(rng, (fin, fout), math.sqrt(3.0) * bound))
        self.bias = Parameter(_uniform(rng, (fout,), bound))

    def forward(self, x: Tensor) -> Tensor:
        return ag.add(ag.matmul(x, self.weight), self.bias)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        self.groups = min(groups, channels)
        while channels % self.groups:
            self.groups -= 1
        self.gamma = Parameter(np.ones(channels, np.float32))
        self.beta = Parameter(np.zeros(channels, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ag.group_norm(x, self.groups, self.gamma, self.beta)
