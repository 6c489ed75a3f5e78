"""Differentiable numerics: tape autodiff, dense and recurrent nets, Adam."""

from . import tensor
from .dense import ACTIVATIONS, DenseNetworkSpec, dense_forward, init_dense_params
from .optim import DecaySchedule, OptimizerState, init_optimizer, optimizer_step
from .recurrent import GruSpec, gru_step, init_gru_params
from .rng import derive_seed, make_rng, spawn_rng
from .tensor import Tensor, as_tensor, backward, value_and_grad

__all__ = [
    "ACTIVATIONS",
    "DecaySchedule",
    "DenseNetworkSpec",
    "GruSpec",
    "OptimizerState",
    "Tensor",
    "as_tensor",
    "backward",
    "dense_forward",
    "derive_seed",
    "gru_step",
    "init_dense_params",
    "init_gru_params",
    "init_optimizer",
    "make_rng",
    "optimizer_step",
    "spawn_rng",
    "tensor",
    "value_and_grad",
]
