"""
AdamW Optimizer
Adam with decoupled weight decay and bias correction, plus the learning-rate
schedule hook used by the trainer
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from tensor import DTYPE, ShapeError, Tensor

LR_SCHEDULES = ("constant", "cosine")


@dataclass
class AdamWState:
    """Optimizer hyperparameters plus per-parameter moment buffers"""
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {value}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


def decays(param: Tensor) -> bool:
    """Only matrices and kernels are decayed; biases and norm params are not"""
    return param.ndim >= 2


def adamw_step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]],
               state: AdamWState) -> AdamWState:
    """
    One AdamW update, in place on each parameter's data

    grads defaults to each parameter's .grad; a missing grad counts as zero.
    """
    state.step += 1
    t = state.step
    lr = state.learning_rate
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    for name, param in params.items():
        grad = grads.get(name) if grads is not None else param.grad
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"grad for {name} has shape {grad.shape}, parameter has {param.shape}")

        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        elif m.shape != param.shape:
            raise ShapeError(f"moment buffers for {name} have shape {m.shape}, parameter has {param.shape}")

        m = DTYPE(state.beta1) * m + DTYPE(1.0 - state.beta1) * grad
        v = DTYPE(state.beta2) * v + DTYPE(1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v

        if state.weight_decay and decays(param):
            param.data *= DTYPE(1.0 - lr * state.weight_decay)
        m_hat = m / DTYPE(correction1)
        v_hat = v / DTYPE(correction2)
        param.data -= (DTYPE(lr) * m_hat / (np.sqrt(v_hat) + DTYPE(state.epsilon))).astype(DTYPE)

    return state


def zero_grad(params: Mapping[str, Tensor]):
    for param in params.values():
        param.zero_grad()


def scheduled_learning_rate(base_lr: float, step: int, total_steps: int, schedule: str = "constant") -> float:
    """Learning rate for a 0-based step"""
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        if total_steps <= 1:
            return base_lr
        progress = min(step, total_steps - 1) / (total_steps - 1)
        return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
    raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {schedule!r}")
