"""Fully connected networks expressed as pure functions of parameter packs.

A network is described by an immutable :class:`DenseNetworkSpec`; its weights
live in a plain ``dict[str, ndarray]`` so optimizers, checkpoints, and
gradient bookkeeping can treat all networks uniformly.  ``dense_forward`` is a
pure function of ``(spec, params, input)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatchError, NonFiniteError
from . import tensor as T

ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu, "swish": T.swish}


@dataclass(frozen=True)
class DenseNetworkSpec:
    """Shape and activation of a fully connected network.

    The activation is applied after every hidden layer; the output layer is
    linear.  ``weight_init_scale`` multiplies the Glorot-uniform bound used at
    initialisation.
    """

    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    weight_init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise DimensionMismatchError(
                f"network dims must be >= 1, got {self.input_dim} -> {self.output_dim}"
            )
        if any(w < 1 for w in self.hidden_widths):
            raise DimensionMismatchError(f"hidden widths must be >= 1, got {self.hidden_widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {sorted(ACTIVATIONS)}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = (self.input_dim,) + self.hidden_widths + (self.output_dim,)
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]


def init_dense_params(
    spec: DenseNetworkSpec,
    rng: np.random.Generator,
    zero_final: bool = False,
    prefix: str = "",
) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and zero biases for ``spec``.

    With ``zero_final`` the last layer starts at exactly zero, which makes
    networks that feed affine transformations start at the identity map.
    """
    params: dict[str, np.ndarray] = {}
    layer_dims = spec.layer_dims
    for k, (fan_in, fan_out) in enumerate(layer_dims):
        bound = spec.weight_init_scale * np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if zero_final and k == len(layer_dims) - 1:
            weight = np.zeros((fan_in, fan_out))
        params[f"{prefix}w{k}"] = weight
        params[f"{prefix}b{k}"] = np.zeros(fan_out)
    return params


def dense_forward(spec: DenseNetworkSpec, params: dict, x, prefix: str = "") -> T.Tensor:
    """Apply the network to a batch of rows.

    ``x`` may be an ndarray or a :class:`Tensor` of shape ``(batch,
    input_dim)``; parameters may likewise be raw arrays or tensors, so the
    same code path serves plain evaluation and gradient computation.
    """
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionMismatchError(
            f"dense_forward expected input of shape (batch, {spec.input_dim}), got {x.shape}"
        )
    act = ACTIVATIONS[spec.activation]
    n_layers = len(spec.layer_dims)
    out = x
    for k in range(n_layers):
        weight = T.as_tensor(params[f"{prefix}w{k}"])
        bias = T.as_tensor(params[f"{prefix}b{k}"])
        out = T.matmul(out, weight) + T.reshape(bias, (1, -1))
        if k < n_layers - 1:
            out = act(out)
    if not np.isfinite(out.data).all():
        raise NonFiniteError(f"dense_forward[{prefix or 'net'}]")
    return out
