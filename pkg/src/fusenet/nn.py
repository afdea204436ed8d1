"""Parameter containers shared by the pipeline and fusion models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from fusenet.autograd import Tensor, conv2d, get_default_dtype


@dataclass
class ConvWeights:
    kernel: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.bias", self.bias

    @classmethod
    def he(cls, rng: np.random.Generator, cin: int, cout: int, k: int, dtype=None) -> "ConvWeights":
        """He-normal kernel (std = sqrt(2 / fan_in)), zero bias."""
        dtype = get_default_dtype() if dtype is None else np.dtype(dtype)
        std = np.sqrt(2.0 / (cin * k * k))
        kernel = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        return cls(Tensor(kernel, requires_grad=True), Tensor(np.zeros(cout, dtype), requires_grad=True))

    @classmethod
    def zeros(cls, cin: int, cout: int, k: int, dtype=None) -> "ConvWeights":
        dtype = get_default_dtype() if dtype is None else np.dtype(dtype)
        return cls(Tensor(np.zeros((cout, cin, k, k), dtype), requires_grad=True),
                   Tensor(np.zeros(cout, dtype), requires_grad=True))


def parameter_dict(model) -> dict[str, Tensor]:
    """``{name: tensor}`` for any object exposing ``named_parameters()``; names must be unique."""
    params: dict[str, Tensor] = {}
    for name, t in model.named_parameters():
        if name in params:
            raise ValueError(f"duplicate parameter name {name!r}")
        params[name] = t
    return params


def parameter_count(model) -> int:
    return sum(t.data.size for t in parameter_dict(model).values())


def zero_grad(model) -> None:
    for _, t in model.named_parameters():
        t.grad = None
