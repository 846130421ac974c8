"""Parameter containers and initialisers shared by the model components."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import Tensor, get_dtype


class Module:
    """Anything owning named parameters.

    Parameters are attributes holding requires-grad tensors; submodules are
    attributes holding modules or lists of modules. Names are dotted paths in
    attribute definition order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_dtype()), requires_grad=True)


def uniform_fan(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    """Xavier-uniform initialised parameter."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-bound, bound, size=shape or (fan_in, fan_out)))


def zeros(*shape) -> Tensor:
    return parameter(np.zeros(shape))


def ones(*shape) -> Tensor:
    return parameter(np.ones(shape))
