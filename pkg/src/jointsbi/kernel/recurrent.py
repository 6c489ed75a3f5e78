"""A gated recurrent cell shared by the recurrent summary and the stepwise
likelihood memory.  One step is a pure function of ``(params, input, state)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatchError
from . import tensor as T


@dataclass(frozen=True)
class GruSpec:
    input_dim: int
    hidden_dim: int

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise DimensionMismatchError(
                f"gru dims must be >= 1, got input {self.input_dim}, hidden {self.hidden_dim}"
            )


def init_gru_params(spec: GruSpec, rng: np.random.Generator, prefix: str = "") -> dict[str, np.ndarray]:
    fan_in = spec.input_dim + spec.hidden_dim
    bound = np.sqrt(6.0 / (fan_in + spec.hidden_dim))
    params = {}
    for gate in ("r", "u", "h"):
        params[f"{prefix}w{gate}"] = rng.uniform(-bound, bound, size=(fan_in, spec.hidden_dim))
        params[f"{prefix}b{gate}"] = np.zeros(spec.hidden_dim)
    return params


def gru_step(spec: GruSpec, params: dict, inp, state, prefix: str = "") -> T.Tensor:
    """Advance the hidden state by one observation.

    ``inp`` has shape ``(batch, input_dim)`` and ``state`` shape
    ``(batch, hidden_dim)``; the returned state has the same shape as
    ``state``.
    """
    inp = T.as_tensor(inp)
    state = T.as_tensor(state)
    if inp.shape[1] != spec.input_dim:
        raise DimensionMismatchError(f"gru_step expected input dim {spec.input_dim}, got {inp.shape[1]}")
    if state.shape[1] != spec.hidden_dim:
        raise DimensionMismatchError(f"gru_step expected state dim {spec.hidden_dim}, got {state.shape[1]}")

    both = T.concat([inp, state], axis=1)
    reset = T.sigmoid(T.matmul(both, T.as_tensor(params[f"{prefix}wr"])) + _row(params[f"{prefix}br"]))
    update = T.sigmoid(T.matmul(both, T.as_tensor(params[f"{prefix}wu"])) + _row(params[f"{prefix}bu"]))
    gated = T.concat([inp, reset * state], axis=1)
    candidate = T.tanh(T.matmul(gated, T.as_tensor(params[f"{prefix}wh"])) + _row(params[f"{prefix}bh"]))
    return (1.0 - update) * state + update * candidate


def _row(bias) -> T.Tensor:
    return T.reshape(T.as_tensor(bias), (1, -1))
