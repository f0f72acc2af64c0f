"""Rectified Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kwargs) -> "OptimizerState":
        state = cls(**kwargs)
        for name, value in params.items():
            state.exp_avg[name] = np.zeros_like(value)
            state.exp_avg_sq[name] = np.zeros_like(value)
        return state


def rho(step: int, beta2: float) -> float:
    """Length of the approximated simple moving average at ``step``."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2**step
    return rho_inf - 2.0 * step * b2t / (1.0 - b2t)


def is_rectified(step: int, beta2: float = 0.999) -> bool:
    return rho(step, beta2) > 4.0


def radam_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """Apply one update to ``params`` in place and advance ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"gradient of {name} has {bad} non-finite entries at step {state.step + 1}")
    beta1, beta2 = state.betas
    state.step += 1
    t = state.step
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    rho_t = rho(t, beta2)
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    if rho_t > 4.0:
        rect = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
    for name, g in grads.items():
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bias1
        if rho_t > 4.0:
            params[name] -= state.lr * rect * m_hat / (np.sqrt(v / bias2) + state.eps)
        else:
            params[name] -= state.lr * m_hat
