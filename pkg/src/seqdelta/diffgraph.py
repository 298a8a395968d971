"""Parameters with gradient buffers and a central-difference gradient checker.

Each layer in this package implements its own backward pass by hand; this
module only provides the storage and the numerical oracle those backward
passes are tested against.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import NonFiniteLoss


class Param:
    """A named trainable array and its accumulated gradient."""

    __slots__ = ("name", "values", "grads", "trainable")

    def __init__(self, name: str, values, trainable: bool = True):
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        self.grads = np.zeros_like(self.values)
        self.trainable = trainable

    @property
    def shape(self):
        return self.values.shape

    def accumulate(self, grad) -> None:
        if grad.shape != self.values.shape:
            raise ValueError(f"{self.name}: grad shape {grad.shape} != {self.values.shape}")
        self.grads += grad

    def copy(self) -> "Param":
        p = Param(self.name, self.values.copy(), self.trainable)
        p.grads = self.grads.copy()
        return p

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.values.shape}, trainable={self.trainable})"


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.grads[...] = 0.0


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    epsilon: float
    tolerance: float
    worst: tuple[str, tuple] | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def finite_difference_check(
    loss_fn: Callable[[], float],
    params: Iterable[Param],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must run forward *and* backward, accumulating into each
    ``Param.grads``, and return the scalar loss. It is called once for the
    analytic gradient, then twice per scalar entry with the entry shifted by
    +/- epsilon. Parameter values are restored after every probe.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)

    def probe() -> float:
        value = float(loss_fn())
        if not np.isfinite(value):
            raise NonFiniteLoss(f"loss_fn returned {value}")
        return value

    zero_grads(params)
    probe()
    analytic = {p.name: p.grads.copy() for p in params}

    errors: dict[str, float] = {}
    worst, worst_err = None, -1.0
    for p in params:
        flat = p.values.reshape(-1)
        ana = analytic[p.name].reshape(-1)
        max_err = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = probe()
            flat[k] = orig - epsilon
            down = probe()
            flat[k] = orig
            num = (up - down) / (2.0 * epsilon)
            denom = max(abs(ana[k]), abs(num), 1e-8)
            err = abs(ana[k] - num) / denom
            if err > max_err:
                max_err = err
            if err > worst_err:
                worst_err = err
                worst = (p.name, np.unravel_index(k, p.values.shape))
        errors[p.name] = max_err
    zero_grads(params)
    return GradCheckReport(errors=errors, epsilon=epsilon, tolerance=tolerance, worst=worst)
