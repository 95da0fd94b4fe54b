"""Named-parameter bookkeeping shared by the model components."""

from __future__ import annotations

import numpy as np

from .numkern import Tensor, parameter

__all__ = ["ParamSet"]


class ParamSet:
    """Ordered collection of named parameter tensors."""

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        full = f"{self.prefix}.{name}" if self.prefix else name
        if full in self._params:
            raise ValueError(f"duplicate parameter name: {full}")
        p = parameter(value, full)
        self._params[full] = p
        return p

    def add_linear(self, rng: np.random.Generator, name: str, fan_in: int, fan_out: int,
                   scale: float | None = None, zero: bool = False, bias: bool = True):
        """Weight (fan_in x fan_out) with 1/sqrt(fan_in) init and optional zero bias."""
        if zero:
            w_val = np.zeros((fan_in, fan_out))
        else:
            s = scale if scale is not None else fan_in ** -0.5
            w_val = rng.standard_normal((fan_in, fan_out)) * s
        w = self.add(f"{name}.w", w_val)
        if not bias:
            return w, None
        b = self.add(f"{name}.b", np.zeros((1, fan_out)))
        return w, b

    def extend(self, other: "ParamSet") -> None:
        for name, p in other._params.items():
            if name in self._params:
                raise ValueError(f"duplicate parameter name: {name}")
            self._params[name] = p

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def by_name(self) -> dict[str, Tensor]:
        return dict(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()
