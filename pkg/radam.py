#!/usr/bin/env python3
"""
RAdam Optimizer
===============
RAdam over named numpy parameter arrays.

Rectified adaptive moments: while the variance of the adaptive learning rate
is intractable (rho_t <= 4) the step is momentum-only, afterwards it is the
Adam step scaled by the rectification multiplier.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from tensor_core import NonFiniteError


@dataclass
class RAdamState:
    """First/second moments per parameter name plus the shared step counter"""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    rectification_threshold: float = 4.0

    @property
    def rho_inf(self) -> float:
        return 2.0 / (1.0 - self.beta2) - 1.0

    def rho(self, t: int) -> float:
        beta2_t = self.beta2 ** t
        return self.rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)

    def rectified(self, t: int) -> bool:
        return self.rho(t) > self.rectification_threshold

    def step_size(self, lr: float, t: int) -> float:
        beta2_t = self.beta2 ** t
        bias1 = 1.0 - self.beta1 ** t
        if not self.rectified(t):
            return lr / bias1
        rho, rho_inf = self.rho(t), self.rho_inf
        return lr * math.sqrt(
            (1.0 - beta2_t) *
            (rho - 4.0) / (rho_inf - 4.0) *
            (rho - 2.0) / rho *
            rho_inf / (rho_inf - 2.0)) / bias1

    def arrays(self) -> Dict[str, np.ndarray]:
        """Moments and counter as named arrays for checkpointing"""
        out = {"radam.t": np.array(float(self.t))}
        out.update({f"radam.m.{n}": a for n, a in self.exp_avg.items()})
        out.update({f"radam.v.{n}": a for n, a in self.exp_avg_sq.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], **hyper) -> "RAdamState":
        state = cls(**hyper)
        state.t = int(arrays.get("radam.t", np.array(0.0)))
        for key, value in arrays.items():
            if key.startswith("radam.m."):
                state.exp_avg[key[len("radam.m."):]] = np.array(value, dtype=np.float64)
            elif key.startswith("radam.v."):
                state.exp_avg_sq[key[len("radam.v."):]] = np.array(value, dtype=np.float64)
        return state


def radam_step(state: RAdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               lr: float) -> Dict[str, np.ndarray]:
    """One descent step; returns new parameter arrays and advances `state`

    Parameters without a gradient entry are returned unchanged.
    """
    if lr < 0 or not math.isfinite(lr):
        raise ValueError(f"learning rate must be finite and >= 0, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name} is not finite")
        if name in params and np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient of {name} has shape {np.shape(g)}, parameter {np.shape(params[name])}")

    state.t += 1
    t = state.t
    step_size = state.step_size(lr, t)
    rectified = state.rectified(t)

    updated = {}
    for name, p in params.items():
        if name not in grads:
            updated[name] = p
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.exp_avg.get(name, np.zeros_like(g))
        v = state.exp_avg_sq.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.exp_avg[name], state.exp_avg_sq[name] = m, v

        if rectified:
            updated[name] = p - step_size * m / (np.sqrt(v) + state.eps)
        else:
            updated[name] = p - step_size * m
    return updated
