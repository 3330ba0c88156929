"""Parameter containers and the handful of layers the models need."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class Module:
    """Attribute-walking parameter registry.

    Parameters are ``Tensor`` attributes with ``requires_grad``; children are
    ``Module`` attributes or lists of modules.  Names are dotted paths.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key in sorted(vars(self)):
            val = getattr(self, key)
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        bad = [k for k in own if k in state and state[k].shape != own[k].shape]
        if missing or extra or bad:
            from .errors import LoadError
            detail = []
            if missing:
                detail.append(f"missing {missing}")
            if extra:
                detail.append(f"unexpected {extra}")
            if bad:
                detail.append("shape mismatch " + ", ".join(
                    f"{k}: {state[k].shape} vs {own[k].shape}" for k in bad))
            raise LoadError("state dict incompatible: " + "; ".join(detail))
        for k, p in own.items():
            p.data = np.array(state[k], dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x @ W + b with W stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = dc.parameter(xavier_uniform(rng, n_in, n_out, (n_in, n_out)))
        self.bias = dc.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = dc.matmul(x, self.weight)
        return y if self.bias is None else dc.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = dc.parameter(np.ones(dim))
        self.beta = dc.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return dc.layernorm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        # He-uniform for ReLU networks
        fan_in = c_in * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)
        self.weight = dc.parameter(rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel)))
        self.bias = dc.parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return dc.conv2d(x, self.weight, self.bias, self.stride, self.padding)
