"""Adam with a cosine learning-rate decay schedule.

Parameter packs are treated as immutable: each step returns fresh arrays, so
two runs from the same seed produce bit-identical trajectories and a retained
pack is never corrupted by later steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class DecaySchedule:
    """Cosine decay from ``initial_lr`` to ``min_lr`` over ``total_steps``."""

    initial_lr: float
    total_steps: int
    min_lr: float = 0.0

    def __post_init__(self):
        if self.initial_lr <= 0.0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.min_lr <= self.initial_lr:
            raise ValueError(f"min_lr must lie in [0, initial_lr], got {self.min_lr}")

    def learning_rate(self, step: int) -> float:
        # past the horizon the rate stays clamped at min_lr
        frac = min(step, self.total_steps) / self.total_steps
        return self.min_lr + 0.5 * (self.initial_lr - self.min_lr) * (1.0 + np.cos(np.pi * frac))


@dataclass
class OptimizerState:
    """First/second moment accumulators plus the step counter."""

    schedule: DecaySchedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @property
    def learning_rate(self) -> float:
        return self.schedule.learning_rate(self.step_count)


def init_optimizer(schedule: DecaySchedule, params: Params) -> OptimizerState:
    state = OptimizerState(schedule=schedule)
    state.m = {name: np.zeros_like(value) for name, value in params.items()}
    state.v = {name: np.zeros_like(value) for name, value in params.items()}
    return state


def optimizer_step(state: OptimizerState, params: Params, grads: Params) -> tuple[Params, OptimizerState]:
    """One Adam update; returns the new pack and the advanced state."""
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"gradients missing for parameters: {sorted(missing)}")
    lr = state.schedule.learning_rate(state.step_count)
    t = state.step_count + 1
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t

    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, value in params.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v

    advanced = OptimizerState(
        schedule=state.schedule,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        step_count=t,
        m=new_m,
        v=new_v,
    )
    return new_params, advanced
