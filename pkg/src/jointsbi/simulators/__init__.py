from .base import (
    AnalyticOracles,
    BayesianModel,
    DataShape,
    SimulationBatch,
    load_dataset,
    presimulate,
    save_dataset,
    simulate_row,
)
from .benchmarks import (
    MODELS,
    TWO_MOONS_VARIANTS,
    ar1,
    bernoulli_glm,
    ddm,
    gaussian_exchangeable_1d,
    gaussian_linear,
    gaussian_linear_uniform,
    gaussian_mixture,
    lotka_volterra,
    lotka_volterra_trajectory,
    make_model,
    sir,
    sir_trajectory,
    slcp,
    two_moons,
    two_moons_log_likelihood,
)

__all__ = [
    "AnalyticOracles",
    "BayesianModel",
    "DataShape",
    "SimulationBatch",
    "load_dataset",
    "presimulate",
    "save_dataset",
    "simulate_row",
    "MODELS",
    "TWO_MOONS_VARIANTS",
    "make_model",
    "ar1",
    "bernoulli_glm",
    "ddm",
    "gaussian_exchangeable_1d",
    "gaussian_linear",
    "gaussian_linear_uniform",
    "gaussian_mixture",
    "lotka_volterra",
    "lotka_volterra_trajectory",
    "sir",
    "sir_trajectory",
    "slcp",
    "two_moons",
    "two_moons_log_likelihood",
]
