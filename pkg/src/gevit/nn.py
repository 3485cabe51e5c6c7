"""Minimal module system: named parameters, affine layers, layer norm."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .autograd import Tensor, get_default_dtype, layer_norm


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=get_default_dtype())


class Module:
    """Base class. Parameters are ``Tensor`` attributes with ``requires_grad``."""

    training: bool = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
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

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator[Module]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        bad = sorted(n for n in set(own) & set(state) if own[n].shape != tuple(state[n].shape))
        if missing or extra or bad:
            detail = []
            if missing:
                detail.append(f"missing: {', '.join(missing)}")
            if extra:
                detail.append(f"unexpected: {', '.join(extra)}")
            if bad:
                detail.append("shape mismatch: " + ", ".join(
                    f"{n} {own[n].shape} vs {tuple(state[n].shape)}" for n in bad))
            raise ValueError("incompatible state; " + "; ".join(detail))
        for name, p in own.items():
            p.data = np.asarray(state[name], dtype=p.dtype).copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else uniform_fan_in(rng, n_in, (n_in, n_out))
        self.weight = param(w)
        if bias:
            self.bias = param(np.zeros(n_out) if zero else uniform_fan_in(rng, n_in, (n_out,)))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)
