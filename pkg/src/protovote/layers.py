"""Small parameterized building blocks on top of the tensor core."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Linear:
    """Affine map x @ W + b with Kaiming-uniform init."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 name: str = "linear", zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
            b = np.zeros(out_dim)
        else:
            bound = np.sqrt(6.0 / in_dim)
            w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
            # nonzero bias keeps pre-activations off the relu kink, which
            # matters for finite-difference gradient checks
            b = rng.uniform(-1.0, 1.0, size=out_dim) / np.sqrt(in_dim)
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(b, requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class MLP:
    """Stack of Linear layers with relu between them (none after the last)."""

    def __init__(self, widths: list[int], rng: np.random.Generator,
                 name: str = "mlp", zero_init_last: bool = False):
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            self.layers.append(Linear(a, b, rng, name=f"{name}.{i}",
                                      zero_init=zero_init_last and last))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]


def collect_params(*modules) -> list[Tensor]:
    out = []
    for m in modules:
        out.extend(m.params())
    return out
