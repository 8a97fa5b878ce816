"""Parameter containers and the small layers everything else is built from."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they lie within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    """Base class; parameters are discovered by walking attributes in definition order."""

    def parameters(self) -> list[Parameter]:
        found: dict[str, Parameter] = {}
        self._collect(found)
        return list(found.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _collect(self, found: dict[str, Parameter]) -> None:
        for value in vars(self).values():
            _collect_value(value, found)


def _collect_value(value, found: dict[str, Parameter]) -> None:
    if isinstance(value, Parameter):
        prev = found.get(value.name)
        if prev is None:
            found[value.name] = value
        elif prev is not value:
            raise ValueError(f"two distinct parameters share the name {value.name!r}")
    elif isinstance(value, Module):
        value._collect(found)
    elif isinstance(value, (list, tuple)):
        for item in value:
            _collect_value(item, found)
    elif isinstance(value, dict):
        for item in value.values():
            _collect_value(item, found)


class Linear(Module):
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.w = Parameter(f"{name}.w", truncated_normal(rng, (in_dim, out_dim), 1.0 / math.sqrt(in_dim)))
        self.b = Parameter(f"{name}.b", np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, name: str, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.scale = Parameter(f"{name}.scale", np.ones(channels))
        self.bias = Parameter(f"{name}.bias", np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.scale, self.bias, self.eps)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ops.mul(x, Tensor(keep))


class MLP(Module):
    """Two position-wise linear layers with a GELU in between."""

    def __init__(
        self,
        name: str,
        channels: int,
        hidden: int,
        rng: np.random.Generator,
        approximate_gelu: bool = False,
        dropout_rate: float = 0.0,
    ):
        self.fc1 = Linear(f"{name}.fc1", channels, hidden, rng)
        self.fc2 = Linear(f"{name}.fc2", hidden, channels, rng)
        self.approximate_gelu = approximate_gelu
        self.dropout_rate = dropout_rate

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = ops.gelu(self.fc1(x), approximate=self.approximate_gelu)
        h = dropout(h, self.dropout_rate, rng)
        return self.fc2(h)
