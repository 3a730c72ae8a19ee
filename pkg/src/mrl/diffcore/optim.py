"""Parameter containers, the Adam update rule and a cosine learning-rate schedule."""
from __future__ import annotations

import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ..errors import MissingGradError
from .tensor import Tensor


class ParamGroup:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self, entries=None):
        self._entries: OrderedDict[str, Tensor] = OrderedDict()
        for name, tensor in (entries.items() if isinstance(entries, dict) else entries or ()):
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if not isinstance(name, str) or not name:
            raise ValueError("parameter names must be non-empty strings")
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must have requires_grad=True")
        tensor.name = name
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def numel(self) -> int:
        return sum(t.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def state_dict(self) -> OrderedDict:
        return OrderedDict((k, v.data.copy()) for k, v in self._entries.items())


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamGroup, state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update to every parameter in ``params``."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)


def clip_grad_norm(params: ParamGroup, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype, copy=False)
    return total


@dataclass(frozen=True)
class CosineSchedule:
    total_steps: int
    lr_initial: float = 5e-4
    lr_min: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    if step < 0 or step > schedule.total_steps:
        warnings.warn(f"step {step} outside [0, {schedule.total_steps}]; clamping", RuntimeWarning, stacklevel=2)
        step = min(max(step, 0), schedule.total_steps)
    if step == 0:
        return float(schedule.lr_initial)
    if step == schedule.total_steps:
        return float(schedule.lr_min)
    cos = math.cos(math.pi * step / schedule.total_steps)
    lr = schedule.lr_min + 0.5 * (schedule.lr_initial - schedule.lr_min) * (1.0 + cos)
    return min(max(lr, schedule.lr_min), schedule.lr_initial)
