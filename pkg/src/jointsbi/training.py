"""Joint training of the summary, posterior, and likelihood networks.

One optimizer minimizes the sum of the posterior negative log density, the
likelihood negative log density, and an optional kernel penalty that pushes
summary embeddings toward a unit Gaussian.  Training is deterministic given
the config seed, and the resulting :class:`JointApproximator` can be written
to a versioned binary checkpoint and reloaded bit for bit.

Log densities reported anywhere in this module are in the original data
units: flows operate on standardized values and the standardizer volume
corrections are folded back in.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION
from .errors import (
    CheckpointError,
    ConfigError,
    DimensionMismatchError,
    ModelMismatchError,
    NonFiniteError,
    TrainingDivergedError,
)
from .flows import (
    FlowSpec,
    LatentSpec,
    exchangeable_log_prob,
    flow_log_prob,
    flow_sample,
    flow_sample_batch,
    init_flow_params,
    markovian_log_prob,
    markovian_sample_batch,
)
from .kernel import DecaySchedule, init_optimizer, optimizer_step, value_and_grad
from .kernel import tensor as T
from .kernel.rng import derive_seed, spawn_rng
from .simulators.base import BayesianModel, DataShape, SimulationBatch, presimulate
from .summaries import (
    DeepSetSpec,
    IdentitySummarySpec,
    RecurrentSummarySpec,
    SummarySpec,
    init_summary_params,
    mmd_penalty,
    summarize,
)

REGIMES = ("offline", "online")
LATENT_KINDS = ("gaussian", "student_t")


@dataclass(frozen=True)
class TrainingConfig:
    """Budget and optimization settings for one training run."""

    budget: int
    epochs: int
    batch_size: int
    initial_lr: float
    min_lr: float = 0.0
    lambda_mmd: float = 0.0
    weight_decay: float = 0.0
    regime: str = "offline"
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 1 <= self.batch_size <= self.budget:
            raise ConfigError(
                f"batch_size must lie in [1, budget], got {self.batch_size}")
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0.0 <= self.min_lr <= self.initial_lr:
            raise ConfigError("min_lr must lie in [0, initial_lr]")
        if self.lambda_mmd < 0:
            raise ConfigError(f"lambda_mmd must be >= 0, got {self.lambda_mmd}")
        if self.lambda_mmd > 0 and self.batch_size < 2:
            raise ConfigError("the embedding penalty needs batches of at least 2")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not 0.0 <= self.validation_fraction < 0.5:
            raise ConfigError("validation_fraction must lie in [0, 0.5)")


@dataclass(frozen=True)
class ArchitectureConfig:
    """Network sizes; training-budget knobs live in :class:`TrainingConfig`."""

    posterior_layers: int = 5
    likelihood_layers: int = 5
    subnet_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    summary_dim: int = 10
    equivariant_modules: int = 2
    equivariant_dim: int = 32
    recurrent_hidden: int = 64
    memory_hidden: int = 32
    posterior_latent: str = "gaussian"
    posterior_df: float = 50.0
    likelihood_latent: str = "gaussian"
    likelihood_df: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "subnet_hidden",
                           tuple(int(w) for w in self.subnet_hidden))
        if self.posterior_layers < 1 or self.likelihood_layers < 1:
            raise ConfigError("both flows need at least one layer")
        if self.summary_dim < 1:
            raise ConfigError(f"summary_dim must be >= 1, got {self.summary_dim}")
        for name in (self.posterior_latent, self.likelihood_latent):
            if name not in LATENT_KINDS:
                raise ConfigError(f"latent must be one of {LATENT_KINDS}, got {name!r}")

    def to_json(self) -> dict:
        return {
            "posterior_layers": self.posterior_layers,
            "likelihood_layers": self.likelihood_layers,
            "subnet_hidden": list(self.subnet_hidden),
            "activation": self.activation,
            "summary_dim": self.summary_dim,
            "equivariant_modules": self.equivariant_modules,
            "equivariant_dim": self.equivariant_dim,
            "recurrent_hidden": self.recurrent_hidden,
            "memory_hidden": self.memory_hidden,
            "posterior_latent": self.posterior_latent,
            "posterior_df": self.posterior_df,
            "likelihood_latent": self.likelihood_latent,
            "likelihood_df": self.likelihood_df,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ArchitectureConfig":
        obj = dict(obj)
        obj["subnet_hidden"] = tuple(obj["subnet_hidden"])
        return cls(**obj)


# Per-benchmark budget and depth defaults used by the command line.
# (likelihood_layers, posterior_layers) follow the depth pairing of the
# corresponding run settings; the toy additions use our own numbers.
DEFAULT_RUN_SETTINGS: dict[str, dict] = {
    "gaussian_linear": {"budget": 10_000, "epochs": 50, "batch_size": 64,
                        "initial_lr": 0.001, "weight_decay": 1.0, "likelihood_layers": 5, "posterior_layers": 5},
    "gaussian_linear_uniform": {"budget": 10_000, "epochs": 50, "batch_size": 64,
                                "initial_lr": 0.001, "weight_decay": 1.0, "likelihood_layers": 5, "posterior_layers": 5},
    "slcp": {"budget": 10_000, "epochs": 100, "batch_size": 32,
             "initial_lr": 0.0005, "weight_decay": 1.0, "likelihood_layers": 4, "posterior_layers": 6},
    "bernoulli_glm": {"budget": 10_000, "epochs": 50, "batch_size": 32,
                      "initial_lr": 0.0001, "weight_decay": 1.0, "likelihood_layers": 5, "posterior_layers": 8},
    "gaussian_mixture": {"budget": 10_000, "epochs": 150, "batch_size": 64,
                         "initial_lr": 0.0005, "weight_decay": 1.0, "likelihood_layers": 6, "posterior_layers": 6},
    "two_moons": {"budget": 10_000, "epochs": 50, "batch_size": 32,
                  "initial_lr": 0.0005, "weight_decay": 1.0, "likelihood_layers": 6, "posterior_layers": 6},
    "sir": {"budget": 10_000, "epochs": 250, "batch_size": 32,
            "initial_lr": 0.0001, "weight_decay": 1.0, "likelihood_layers": 6, "posterior_layers": 6},
    "lotka_volterra": {"budget": 10_000, "epochs": 150, "batch_size": 128,
                       "initial_lr": 0.001, "weight_decay": 1.0, "likelihood_layers": 8, "posterior_layers": 6},
    "ddm": {"budget": 5_000, "epochs": 30, "batch_size": 64,
            "initial_lr": 0.001, "weight_decay": 1.0, "likelihood_layers": 6, "posterior_layers": 5},
    "gaussian_exchangeable_1d": {"budget": 5_000, "epochs": 40, "batch_size": 64,
                                 "initial_lr": 0.001, "weight_decay": 1.0, "likelihood_layers": 4, "posterior_layers": 4},
    "ar1": {"budget": 8_192, "epochs": 30, "batch_size": 128,
            "initial_lr": 0.01, "weight_decay": 1.0, "likelihood_layers": 2, "posterior_layers": 4},
}


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension affine transform fitted on training data.

    The transform is part of the density model: log densities in original
    units pick up ``log_det`` (= -sum log std) per transformed row.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Standardizer":
        rows = np.asarray(rows, dtype=np.float64)
        # floor keeps constant dimensions invertible
        return cls(mean=rows.mean(axis=0),
                   std=np.maximum(rows.std(axis=0), 1e-8))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    def transform(self, arr: np.ndarray) -> np.ndarray:
        return (np.asarray(arr, dtype=np.float64) - self.mean) / self.std

    def inverse(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr, dtype=np.float64) * self.std + self.mean

    @property
    def log_det(self) -> float:
        return float(-np.log(self.std).sum())

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Standardizer":
        return cls(mean=np.asarray(obj["mean"], dtype=np.float64),
                   std=np.asarray(obj["std"], dtype=np.float64))


def _split_pack(params: dict, prefix: str) -> dict:
    return {name[len(prefix):]: value for name, value in params.items()
            if name.startswith(prefix)}


def _latent(kind: str, df: float) -> LatentSpec:
    if kind == "student_t":
        return LatentSpec(kind="student_t", df=df)
    return LatentSpec()


def build_specs(theta_dim: int, data_shape: DataShape, arch: ArchitectureConfig
                ) -> tuple[SummarySpec, FlowSpec, FlowSpec]:
    """Derive the three network specs for a model's shapes.

    Flat data gets an identity summary and a vanilla likelihood flow over
    the whole vector; sets get a permutation-invariant summary and a
    per-point likelihood; series get a recurrent summary and a stepwise
    likelihood with memory.
    """
    kind = data_shape.kind
    if kind == "flat":
        summary: SummarySpec = IdentitySummarySpec(input_dim=data_shape.total_dim)
    elif kind == "set":
        summary = DeepSetSpec(
            point_dim=data_shape.dims[1],
            summary_dim=arch.summary_dim,
            n_equivariant_modules=arch.equivariant_modules,
            equivariant_dim=arch.equivariant_dim,
            equivariant_hidden=(arch.equivariant_dim,),
            post_hidden=(arch.equivariant_dim,),
            activation=arch.activation,
        )
    else:
        summary = RecurrentSummarySpec(
            channel_dim=data_shape.dims[1],
            summary_dim=arch.summary_dim,
            hidden_dim=arch.recurrent_hidden,
        )

    posterior = FlowSpec(
        target_dim=theta_dim,
        condition_dim=summary.summary_dim,
        n_layers=arch.posterior_layers,
        subnet_hidden=arch.subnet_hidden,
        activation=arch.activation,
        latent=_latent(arch.posterior_latent, arch.posterior_df),
        variant="vanilla",
        perm_seed=0,
    )
    if kind == "flat":
        likelihood = FlowSpec(
            target_dim=data_shape.total_dim,
            condition_dim=theta_dim,
            n_layers=arch.likelihood_layers,
            subnet_hidden=arch.subnet_hidden,
            activation=arch.activation,
            latent=_latent(arch.likelihood_latent, arch.likelihood_df),
            variant="vanilla",
            perm_seed=1,
        )
    else:
        likelihood = FlowSpec(
            target_dim=data_shape.dims[1],
            condition_dim=theta_dim,
            n_layers=arch.likelihood_layers,
            subnet_hidden=arch.subnet_hidden,
            activation=arch.activation,
            latent=_latent(arch.likelihood_latent, arch.likelihood_df),
            variant="exchangeable" if kind == "set" else "markovian",
            memory_hidden=arch.memory_hidden,
            perm_seed=1,
        )
    return summary, posterior, likelihood


def init_joint_params(summary_spec: SummarySpec, posterior_spec: FlowSpec,
                      likelihood_spec: FlowSpec, seed: int) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for name, value in init_summary_params(summary_spec, spawn_rng(seed, "init", 0)).items():
        params[f"summary/{name}"] = value
    for name, value in init_flow_params(posterior_spec, spawn_rng(seed, "init", 1)).items():
        params[f"posterior/{name}"] = value
    for name, value in init_flow_params(likelihood_spec, spawn_rng(seed, "init", 2)).items():
        params[f"likelihood/{name}"] = value
    return params


@dataclass
class JointApproximator:
    """Trained summary, posterior, and likelihood networks for one model.

    All public methods take and return numpy arrays in original data units;
    the shared parameter dict keys are prefixed ``summary/``, ``posterior/``,
    ``likelihood/``.
    """

    model_name: str
    theta_dim: int
    data_shape: DataShape
    arch: ArchitectureConfig
    summary_spec: SummarySpec
    posterior_spec: FlowSpec
    likelihood_spec: FlowSpec
    params: dict[str, np.ndarray]
    theta_standardizer: Standardizer
    x_standardizer: Standardizer

    # -- shape plumbing --------------------------------------------------

    def _as_theta_batch(self, theta) -> tuple[np.ndarray, bool]:
        theta = np.asarray(theta, dtype=np.float64)
        single = theta.ndim == 1
        theta = theta.reshape(-1, self.theta_dim)
        return theta, single

    def _as_x_batch(self, x) -> tuple[np.ndarray, bool]:
        """Normalize to a batch; sets and series may differ from the training
        length since summaries pool and likelihood heads factorize."""
        x = np.asarray(x, dtype=np.float64)
        expected = self.data_shape.array_shape
        if self.data_shape.kind == "flat":
            if x.shape == expected:
                return x[None, ...], True
            if x.ndim == 2 and x.shape[1:] == expected:
                return x, False
        else:
            channels = expected[1]
            if x.ndim == 2 and x.shape[0] >= 1 and x.shape[1] == channels:
                return x[None, ...], True
            if x.ndim == 3 and x.shape[1] >= 1 and x.shape[2] == channels:
                return x, False
        raise DimensionMismatchError(
            f"expected data shaped like {expected} or a batch of such, got {x.shape}")

    def _volume_multiplicity(self, x_batch: np.ndarray) -> int:
        # how many times the per-row standardizer correction applies
        return 1 if self.data_shape.kind == "flat" else x_batch.shape[1]

    # -- embeddings ------------------------------------------------------

    def _embed_tensor(self, params: dict, x_batch: np.ndarray) -> T.Tensor:
        x_std = self.x_standardizer.transform(x_batch)
        if self.data_shape.kind == "flat":
            x_std = x_std.reshape(x_std.shape[0], -1)
        return summarize(self.summary_spec, _split_pack(params, "summary/"), x_std)

    def embed(self, x) -> np.ndarray:
        """Summary-space embeddings, shape ``(batch, summary_dim)``."""
        x_batch, single = self._as_x_batch(x)
        emb = self._embed_tensor(self.params, x_batch).data
        return emb[0] if single else emb

    # -- posterior head --------------------------------------------------

    def posterior_log_prob(self, theta, x):
        theta_batch, single_t = self._as_theta_batch(theta)
        x_batch, single_x = self._as_x_batch(x)
        if theta_batch.shape[0] != x_batch.shape[0]:
            raise DimensionMismatchError(
                f"{theta_batch.shape[0]} parameter rows vs {x_batch.shape[0]} datasets")
        emb = self._embed_tensor(self.params, x_batch)
        lp = flow_log_prob(self.posterior_spec, _split_pack(self.params, "posterior/"),
                           self.theta_standardizer.transform(theta_batch), emb)
        values = lp.data + self.theta_standardizer.log_det
        return float(values[0]) if single_t and single_x else values

    def posterior_sample(self, x, n_draws: int, rng: np.random.Generator) -> np.ndarray:
        """Draw parameters for one observed dataset, shape ``(n_draws, theta_dim)``."""
        x_batch, _ = self._as_x_batch(x)
        if x_batch.shape[0] != 1:
            raise DimensionMismatchError("posterior_sample conditions on one dataset")
        emb = self._embed_tensor(self.params, x_batch).data[0]
        std_draws = flow_sample(self.posterior_spec,
                                _split_pack(self.params, "posterior/"),
                                emb, n_draws, rng)
        return self.theta_standardizer.inverse(std_draws)

    # -- likelihood head -------------------------------------------------

    def likelihood_log_prob(self, x, theta):
        """Joint log density of each dataset given its parameter row."""
        theta_batch, single_t = self._as_theta_batch(theta)
        x_batch, single_x = self._as_x_batch(x)
        if theta_batch.shape[0] != x_batch.shape[0]:
            raise DimensionMismatchError(
                f"{theta_batch.shape[0]} parameter rows vs {x_batch.shape[0]} datasets")
        lp = self._likelihood_tensor(self.params, x_batch, theta_batch)
        values = lp.data + self._volume_multiplicity(x_batch) * self.x_standardizer.log_det
        return float(values[0]) if single_t and single_x else values

    def likelihood_point_log_prob(self, points, thetas):
        """Log density of individual observations under an exchangeable
        likelihood head, one parameter row per observation."""
        if self.likelihood_spec.variant != "exchangeable":
            raise ConfigError(
                "per-point densities need an exchangeable likelihood head")
        channels = self.data_shape.dims[1]
        points = np.asarray(points, dtype=np.float64).reshape(-1, channels)
        thetas = np.asarray(thetas, dtype=np.float64).reshape(-1, self.theta_dim)
        if points.shape[0] != thetas.shape[0]:
            raise DimensionMismatchError(
                f"{points.shape[0]} observations vs {thetas.shape[0]} parameter rows")
        pack = _split_pack(self.params, "likelihood/")
        lp = flow_log_prob(self.likelihood_spec, pack,
                           self.x_standardizer.transform(points),
                           self.theta_standardizer.transform(thetas))
        return lp.data + self.x_standardizer.log_det

    def _likelihood_tensor(self, params: dict, x_batch: np.ndarray,
                           theta_batch: np.ndarray) -> T.Tensor:
        pack = _split_pack(params, "likelihood/")
        theta_std = self.theta_standardizer.transform(theta_batch)
        x_std = self.x_standardizer.transform(x_batch)
        variant = self.likelihood_spec.variant
        if variant == "vanilla":
            return flow_log_prob(self.likelihood_spec, pack,
                                 x_std.reshape(x_std.shape[0], -1), theta_std)
        if variant == "exchangeable":
            return exchangeable_log_prob(self.likelihood_spec, pack, x_std, theta_std)
        return markovian_log_prob(self.likelihood_spec, pack, x_std, theta_std)

    def surrogate_simulate_batch(self, thetas, rng: np.random.Generator) -> np.ndarray:
        """One synthetic dataset per parameter row, in original units."""
        thetas = np.asarray(thetas, dtype=np.float64).reshape(-1, self.theta_dim)
        theta_std = self.theta_standardizer.transform(thetas)
        pack = _split_pack(self.params, "likelihood/")
        spec = self.likelihood_spec
        kind = self.data_shape.kind
        if kind == "flat":
            draws = flow_sample_batch(spec, pack, theta_std, rng)
            x_std = draws.reshape((-1,) + self.data_shape.array_shape)
        elif kind == "set":
            n_points = self.data_shape.dims[0]
            tiled = np.repeat(theta_std, n_points, axis=0)
            draws = flow_sample_batch(spec, pack, tiled, rng)
            x_std = draws.reshape(thetas.shape[0], n_points, -1)
        else:
            x_std = markovian_sample_batch(spec, pack, theta_std,
                                           self.data_shape.dims[0], rng)
        return self.x_standardizer.inverse(x_std)

    def surrogate_simulate(self, theta, rng: np.random.Generator) -> np.ndarray:
        """One synthetic dataset for a single parameter vector."""
        theta = np.asarray(theta, dtype=np.float64).reshape(1, self.theta_dim)
        return self.surrogate_simulate_batch(theta, rng)[0]

    # -- bookkeeping -----------------------------------------------------

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.params[name]).tobytes())
        return digest.hexdigest()

    def with_params(self, params: dict[str, np.ndarray]) -> "JointApproximator":
        return replace(self, params=dict(params))


def build_approximator(model_name: str, theta_dim: int, data_shape: DataShape,
                       arch: ArchitectureConfig, params: dict,
                       theta_standardizer: Standardizer,
                       x_standardizer: Standardizer) -> JointApproximator:
    summary_spec, posterior_spec, likelihood_spec = build_specs(theta_dim, data_shape, arch)
    return JointApproximator(
        model_name=model_name,
        theta_dim=theta_dim,
        data_shape=data_shape,
        arch=arch,
        summary_spec=summary_spec,
        posterior_spec=posterior_spec,
        likelihood_spec=likelihood_spec,
        params=params,
        theta_standardizer=theta_standardizer,
        x_standardizer=x_standardizer,
    )


# -- the training criterion ---------------------------------------------


def _loss_components(approx: JointApproximator, params: dict, theta: np.ndarray,
                     x: np.ndarray, lambda_mmd: float,
                     rng: np.random.Generator) -> dict[str, T.Tensor]:
    """Per-batch criterion terms; ``params`` values may be tensors (for
    gradients) or plain arrays (for evaluation)."""
    try:
        emb = approx._embed_tensor(params, x)
        post_lp = flow_log_prob(approx.posterior_spec,
                                _split_pack(params, "posterior/"),
                                approx.theta_standardizer.transform(theta), emb)
    except NonFiniteError as err:
        raise NonFiniteError(f"posterior_nll ({err.site})") from err
    posterior_nll = -T.tmean(post_lp) - approx.theta_standardizer.log_det
    if not np.isfinite(posterior_nll.data):
        raise NonFiniteError("posterior_nll")

    try:
        like_lp = approx._likelihood_tensor(params, x, theta)
    except NonFiniteError as err:
        raise NonFiniteError(f"likelihood_nll ({err.site})") from err
    likelihood_nll = -T.tmean(like_lp) \
        - approx._volume_multiplicity(x) * approx.x_standardizer.log_det
    if not np.isfinite(likelihood_nll.data):
        raise NonFiniteError("likelihood_nll")

    if lambda_mmd > 0:
        mmd_term = mmd_penalty(emb, rng)
        if not np.isfinite(mmd_term.data):
            raise NonFiniteError("mmd_term")
        total = posterior_nll + likelihood_nll + lambda_mmd * mmd_term
    else:
        mmd_term = T.Tensor(np.float64(0.0))
        total = posterior_nll + likelihood_nll
    return {"posterior_nll": posterior_nll, "likelihood_nll": likelihood_nll,
            "mmd_term": mmd_term, "total": total}


def joint_loss(approx: JointApproximator, batch: SimulationBatch,
               lambda_mmd: float, rng: np.random.Generator) -> tuple[float, dict]:
    """Evaluate the criterion on a batch; returns ``(total, components)``."""
    if len(batch) == 0:
        raise DimensionMismatchError("cannot evaluate the loss on an empty batch")
    comps = _loss_components(approx, approx.params, batch.theta, batch.x,
                             lambda_mmd, rng)
    values = {name: float(tensor.data) for name, tensor in comps.items()}
    return values["total"], values


# -- the loop -----------------------------------------------------------


@dataclass
class LossTrace:
    """Per-step loss components plus the per-epoch validation curve."""

    posterior_nll: np.ndarray
    likelihood_nll: np.ndarray
    mmd_term: np.ndarray
    total: np.ndarray
    learning_rate: np.ndarray
    validation: list[dict]
    lambda_mmd: float
    best_epoch: int | None = None
    best_params: dict | None = None

    def to_json(self) -> dict:
        return {
            "posterior_nll": self.posterior_nll.tolist(),
            "likelihood_nll": self.likelihood_nll.tolist(),
            "mmd_term": self.mmd_term.tolist(),
            "total": self.total.tolist(),
            "learning_rate": self.learning_rate.tolist(),
            "validation": self.validation,
            "lambda_mmd": self.lambda_mmd,
            "best_epoch": self.best_epoch,
        }


def _epoch_chunks(n_rows: int, batch_size: int) -> list[slice]:
    chunks = [slice(i, min(i + batch_size, n_rows))
              for i in range(0, n_rows, batch_size)]
    # a trailing single row cannot feed the pairwise penalty; fold it away
    if len(chunks) > 1 and chunks[-1].stop - chunks[-1].start == 1:
        chunks = chunks[:-1]
    return chunks


def _run_settings_for(model_name: str) -> dict | None:
    for key, settings in DEFAULT_RUN_SETTINGS.items():
        if model_name == key or model_name.startswith(key + "_"):
            return settings
    return None


def default_architecture(model: BayesianModel) -> ArchitectureConfig:
    """Depth defaults keyed on the model's registry entry."""
    settings = _run_settings_for(model.name)
    if settings is None:
        return ArchitectureConfig()
    return ArchitectureConfig(posterior_layers=settings["posterior_layers"],
                              likelihood_layers=settings["likelihood_layers"])


def default_training_config(model_name: str, **overrides) -> TrainingConfig:
    """Budget defaults for a registered benchmark, override-able field-wise."""
    settings = _run_settings_for(model_name)
    if settings is None:
        raise ConfigError(f"no default run settings for model {model_name!r}")
    base = {key: settings[key] for key in
            ("budget", "epochs", "batch_size", "initial_lr", "weight_decay")}
    base.update(overrides)
    return TrainingConfig(**base)


def train(model: BayesianModel, config: TrainingConfig,
          arch: ArchitectureConfig | None = None,
          data: SimulationBatch | None = None
          ) -> tuple[JointApproximator, LossTrace]:
    """Fit the three networks jointly; deterministic given ``config.seed``.

    Offline regime: the whole budget is presimulated once, reshuffled every
    epoch.  A presimulated ``data`` batch can stand in for that pass; the
    simulator is then never called at all.
    Online regime: every step consumes a freshly simulated batch until the
    budget is spent; the validation split is simulated up front either way.
    """
    arch = arch or default_architecture(model)
    seed = config.seed
    val_n = int(config.budget * config.validation_fraction)

    if data is not None:
        if config.regime != "offline":
            raise ConfigError("a presimulated dataset implies the offline regime")
        if data.model_name != model.name:
            raise ModelMismatchError(
                f"dataset holds {data.model_name!r} rows, model is {model.name!r}")
        if len(data) < config.budget:
            raise ConfigError(
                f"dataset has {len(data)} rows, budget needs {config.budget}")

    if config.regime == "offline":
        full = (data.subset(np.arange(config.budget)) if data is not None
                else presimulate(model, config.budget,
                                 derive_seed(seed, "simulations")))
        order = spawn_rng(seed, "split").permutation(config.budget)
        val_batch = full.subset(order[:val_n]) if val_n else None
        train_batch = full.subset(order[val_n:])
        stats_batch = train_batch
        chunks = _epoch_chunks(len(train_batch), config.batch_size)
        total_steps = config.epochs * len(chunks)
    else:
        val_batch = (presimulate(model, val_n, derive_seed(seed, "validation"))
                     if val_n else None)
        train_batch = None
        # standardizer statistics come from a dedicated pre-pass
        stats_batch = presimulate(model, max(256, config.batch_size),
                                  derive_seed(seed, "statistics"))
        total_steps = math.ceil(config.budget / config.batch_size)

    theta_std = Standardizer.fit(stats_batch.theta)
    x_rows = stats_batch.x.reshape(len(stats_batch), -1) \
        if model.data_shape.kind == "flat" \
        else stats_batch.x.reshape(-1, model.data_shape.dims[1])
    x_std = Standardizer.fit(x_rows)

    summary_spec, posterior_spec, likelihood_spec = build_specs(
        model.theta_dim, model.data_shape, arch)
    params = init_joint_params(summary_spec, posterior_spec, likelihood_spec,
                               derive_seed(seed, "parameters"))
    approx = JointApproximator(
        model_name=model.name, theta_dim=model.theta_dim,
        data_shape=model.data_shape, arch=arch,
        summary_spec=summary_spec, posterior_spec=posterior_spec,
        likelihood_spec=likelihood_spec, params=params,
        theta_standardizer=theta_std, x_standardizer=x_std,
    )

    schedule = DecaySchedule(initial_lr=config.initial_lr,
                             total_steps=total_steps, min_lr=config.min_lr)
    opt = init_optimizer(schedule, params)

    rows: dict[str, list[float]] = {name: [] for name in
                                    ("posterior_nll", "likelihood_nll",
                                     "mmd_term", "total", "learning_rate")}
    validation: list[dict] = []
    best: tuple[float, int, dict] | None = None
    step = 0
    budget_left = config.budget
    steps_per_epoch_online = math.ceil(total_steps / config.epochs)

    def record_failure(err: Exception):
        trace = _finalize_trace(rows, validation, best, config.lambda_mmd)
        raise TrainingDivergedError(step, approx.with_params(params), trace) from err

    for epoch in range(config.epochs):
        if config.regime == "offline":
            perm = spawn_rng(seed, "epoch", epoch).permutation(len(train_batch))
            step_batches = [(train_batch.theta[perm[c]], train_batch.x[perm[c]])
                            for c in chunks]
        else:
            step_batches = []
            for _ in range(steps_per_epoch_online):
                if budget_left <= 0:
                    break
                size = min(config.batch_size, budget_left)
                budget_left -= size
                fresh = presimulate(model, size, derive_seed(seed, "online", step + len(step_batches)))
                step_batches.append((fresh.theta, fresh.x))

        for theta_b, x_b in step_batches:
            mmd_rng = spawn_rng(seed, "penalty", step)
            captured: dict[str, T.Tensor] = {}

            def criterion(tensor_params):
                comps = _loss_components(approx, tensor_params, theta_b, x_b,
                                         config.lambda_mmd, mmd_rng)
                captured.update(comps)
                return comps["total"]

            lr_now = schedule.learning_rate(step)
            try:
                _, grads = value_and_grad(criterion, params)
            except NonFiniteError as err:
                record_failure(err)
            rows["posterior_nll"].append(float(captured["posterior_nll"].data))
            rows["likelihood_nll"].append(float(captured["likelihood_nll"].data))
            rows["mmd_term"].append(float(captured["mmd_term"].data))
            rows["total"].append(float(captured["total"].data))
            rows["learning_rate"].append(lr_now)
            params, opt = optimizer_step(opt, params, grads)
            if config.weight_decay > 0:
                # decoupled shrink on weight matrices only, never biases
                shrink = 1.0 - lr_now * config.weight_decay
                params = {name: value * shrink if value.ndim >= 2 else value
                          for name, value in params.items()}
            step += 1

        if val_batch is not None:
            try:
                comps = _loss_components(approx, params, val_batch.theta,
                                         val_batch.x, config.lambda_mmd,
                                         spawn_rng(seed, "val-penalty", epoch))
            except NonFiniteError as err:
                record_failure(err)
            entry = {"epoch": epoch,
                     "posterior_nll": float(comps["posterior_nll"].data),
                     "likelihood_nll": float(comps["likelihood_nll"].data),
                     "mmd_term": float(comps["mmd_term"].data),
                     "total": float(comps["total"].data)}
            validation.append(entry)
            if best is None or entry["total"] < best[0]:
                best = (entry["total"], epoch, dict(params))

    trace = _finalize_trace(rows, validation, best, config.lambda_mmd)
    return approx.with_params(params), trace


def _finalize_trace(rows: dict, validation: list, best, lambda_mmd: float) -> LossTrace:
    return LossTrace(
        posterior_nll=np.asarray(rows["posterior_nll"]),
        likelihood_nll=np.asarray(rows["likelihood_nll"]),
        mmd_term=np.asarray(rows["mmd_term"]),
        total=np.asarray(rows["total"]),
        learning_rate=np.asarray(rows["learning_rate"]),
        validation=validation,
        lambda_mmd=lambda_mmd,
        best_epoch=None if best is None else best[1],
        best_params=None if best is None else best[2],
    )


# -- checkpoints --------------------------------------------------------

_MAGIC = b"JSBCKPT\x00"


def checkpoint_save(approx: JointApproximator, path: str | Path) -> None:
    """Write a versioned binary checkpoint: JSON header, raw float64 parameter
    segments in sorted name order, trailing CRC32 of the segments."""
    names = sorted(approx.params)
    header = {
        "format_version": FORMAT_VERSION,
        "model_name": approx.model_name,
        "theta_dim": approx.theta_dim,
        "data_shape": approx.data_shape.to_json(),
        "arch": approx.arch.to_json(),
        "theta_standardizer": approx.theta_standardizer.to_json(),
        "x_standardizer": approx.x_standardizer.to_json(),
        "params": [{"name": n, "shape": list(approx.params[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = bytearray()
    for name in names:
        segment = np.ascontiguousarray(approx.params[name], dtype=np.float64).tobytes()
        payload += struct.pack("<Q", len(segment))
        payload += segment
    payload = bytes(payload)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def checkpoint_load(path: str | Path) -> JointApproximator:
    blob = Path(path).read_bytes()
    if len(blob) < len(_MAGIC) + 8 or blob[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic bytes)")
    offset = len(_MAGIC)
    version, header_len = struct.unpack_from("<II", blob, offset)
    offset += 8
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint version {version}, expected {FORMAT_VERSION}")
    if len(blob) < offset + header_len + 4:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path} header is unreadable: {err}") from err
    offset += header_len

    payload = blob[offset:-4]
    (crc_stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path} parameter payload fails its checksum")

    params: dict[str, np.ndarray] = {}
    cursor = 0
    for entry in header["params"]:
        if cursor + 8 > len(payload):
            raise CheckpointError(f"{path} is truncated inside the parameters")
        (seg_len,) = struct.unpack_from("<Q", payload, cursor)
        cursor += 8
        if cursor + seg_len > len(payload):
            raise CheckpointError(f"{path} is truncated inside the parameters")
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape)) * 8 if shape else 8
        if seg_len != expected:
            raise CheckpointError(
                f"{path}: segment {entry['name']} holds {seg_len} bytes, "
                f"shape {shape} needs {expected}")
        flat = np.frombuffer(payload, dtype="<f8", count=seg_len // 8, offset=cursor)
        params[entry["name"]] = flat.reshape(shape).copy()
        cursor += seg_len
    if cursor != len(payload):
        raise CheckpointError(f"{path} carries unexpected trailing bytes")

    arch = ArchitectureConfig.from_json(header["arch"])
    data_shape = DataShape.from_json(header["data_shape"])
    approx = build_approximator(
        model_name=header["model_name"],
        theta_dim=header["theta_dim"],
        data_shape=data_shape,
        arch=arch,
        params=params,
        theta_standardizer=Standardizer.from_json(header["theta_standardizer"]),
        x_standardizer=Standardizer.from_json(header["x_standardizer"]),
    )
    expected_names = set(init_joint_params(
        approx.summary_spec, approx.posterior_spec, approx.likelihood_spec, 0))
    if set(params) != expected_names:
        raise CheckpointError(
            f"{path} parameter names do not match the declared architecture")
    return approx
