"""Optimizers and the polynomial learning-rate schedule."""

from __future__ import annotations

import warnings
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Variable


def poly_lr(base: float, t: int, total: int, power: float = 0.9) -> float:
    """base * (1 - t/total)^power; steps past ``total`` clamp to 0."""
    if t > total:
        warnings.warn(f"step {t} beyond schedule length {total}; learning rate clamped to 0", stacklevel=2)
        return 0.0
    if t < 0:
        raise ValueError("step must be non-negative")
    return base * (1.0 - t / total) ** power


class _Optimizer:
    def __init__(self, params: Mapping[str, Variable], frozen: Iterable[str] = ()):
        self.params = dict(params)
        self.frozen = set(frozen)
        self.live = [k for k in self.params if k not in self.frozen]
        self.buffers: dict = {}

    @property
    def steps(self) -> int:
        return self.buffers.get("t", 0)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _arrays(self):
        return [self.params[k].value for k in self.live], [self.params[k].grad for k in self.live]


class SGD(_Optimizer):
    """Momentum SGD, weight decay folded into the gradient."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0, frozen: Iterable[str] = ()):
        super().__init__(params, frozen)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, lr: float) -> None:
        sgd_step(*self._arrays(), self.buffers, lr, self.momentum, self.weight_decay)


class Adam(_Optimizer):
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0, frozen: Iterable[str] = ()):
        super().__init__(params, frozen)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay

    def step(self, lr: float) -> None:
        adam_step(*self._arrays(), self.buffers, lr, self.beta1, self.beta2, self.eps, self.weight_decay)


def sgd_step(params, grads, state: dict, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """v <- m v + g + wd p;  p <- p - lr v, in place over parallel lists of
    arrays.  ``state`` holds the velocity buffers keyed by position."""
    state["t"] = state.get("t", 0) + 1
    for i, (p, g) in enumerate(zip(params, grads)):
        vel = state.setdefault(i, np.zeros_like(p))
        vel *= momentum
        vel += g + weight_decay * p
        p -= lr * vel


def adam_step(params, grads, state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam in place; ``weight_decay`` is decoupled."""
    state["t"] = t = state.get("t", 0) + 1
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.setdefault(("m", i), np.zeros_like(p))
        v = state.setdefault(("v", i), np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
