"""Adam with decoupled weight decay, and the warmup/decay learning-rate ramp."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigurationError, TrainingDivergenceError


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the step counter."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-6
    weight_decay_rate: float = 0.1


def init_adam_state(params: dict[str, Tensor], beta1: float = 0.9,
                    beta2: float = 0.999, epsilon: float = 1e-6,
                    weight_decay_rate: float = 0.1) -> AdamState:
    state = AdamState(step=0, beta1=beta1, beta2=beta2, epsilon=epsilon,
                      weight_decay_rate=weight_decay_rate)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place.

    Decoupled weight decay is applied to matrix-shaped parameters only;
    1-D parameters (biases, norm gains, per-position biases) are exempt.
    """
    if lr < 0:
        raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
    state.step += 1
    correct1 = 1.0 - state.beta1 ** state.step
    correct2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ConfigurationError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} of shape {p.data.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / correct1
        v_hat = v / correct2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if state.weight_decay_rate and p.data.ndim >= 2:
            p.data -= lr * state.weight_decay_rate * p.data
    return params, state


def clip_gradients_by_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clipping norm.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``peak_lr``, then linear decay to zero at ``total_steps``."""

    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.warmup_steps <= 0 or self.total_steps <= 0:
            raise ConfigurationError("warmup_steps and total_steps must be positive")
        if self.warmup_steps > self.total_steps:
            raise ConfigurationError(
                f"warmup_steps {self.warmup_steps} exceeds total_steps {self.total_steps}"
            )


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ConfigurationError(f"step must be non-negative, got {step}")
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    if step >= schedule.total_steps:
        return 0.0
    remaining = schedule.total_steps - step
    span = schedule.total_steps - schedule.warmup_steps
    return schedule.peak_lr * remaining / span
