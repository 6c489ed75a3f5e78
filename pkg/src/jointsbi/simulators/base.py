"""Simulator-backed Bayesian models and presimulated training data.

A :class:`BayesianModel` bundles a prior sampler, a prior density, and a
stochastic simulator behind one small interface; everything downstream
(training, diagnostics, estimators) only talks to that interface.
:func:`presimulate` draws a fixed budget of ``(theta, x)`` rows with one
derived seed per row, so any row can be regenerated bit-identically from its
recorded seed alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from .. import FORMAT_VERSION
from ..errors import DimensionMismatchError, FormatError, SimulationFailedError
from ..kernel.rng import derive_seed, make_rng

DATA_KINDS = ("flat", "set", "series")


@dataclass(frozen=True)
class DataShape:
    """Layout of one simulated data set.

    ``flat``   fixed-size vector, dims ``(d,)``
    ``set``    exchangeable observations, dims ``(n_points, d)``
    ``series`` ordered steps, dims ``(n_steps, d)``
    """

    kind: str
    dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.kind not in DATA_KINDS:
            raise ValueError(f"unknown data kind {self.kind!r}")
        expected = 1 if self.kind == "flat" else 2
        if len(self.dims) != expected or any(d < 1 for d in self.dims):
            raise ValueError(f"bad dims {self.dims} for kind {self.kind!r}")

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.dims))

    @property
    def array_shape(self) -> tuple[int, ...]:
        return self.dims

    def to_json(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims)}

    @classmethod
    def from_json(cls, obj: dict) -> "DataShape":
        return cls(kind=obj["kind"], dims=tuple(obj["dims"]))


@dataclass(frozen=True)
class AnalyticOracles:
    """Closed-form references available for conjugate models.

    All fields are optional; estimator and diagnostic code must check for
    ``None`` before relying on any of them.
    """

    posterior_sampler: Callable[[np.ndarray, int, np.random.Generator], np.ndarray] | None = None
    posterior_moments: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None
    log_marginal: Callable[[np.ndarray], float] | None = None
    posterior_predictive_log_density: Callable[[np.ndarray, np.ndarray], float] | None = None


@dataclass(frozen=True)
class BayesianModel:
    """A prior plus a stochastic simulator.

    ``prior_sampler(rng)`` returns one parameter vector, ``simulator(theta,
    rng)`` one data set of ``data_shape``; ``prior_log_density`` accepts a
    single vector or a batch.  ``constants`` holds the JSON-serializable
    numbers that define the model so they can travel with datasets.
    """

    name: str
    theta_dim: int
    data_shape: DataShape
    prior_sampler: Callable[[np.random.Generator], np.ndarray]
    prior_log_density: Callable[[np.ndarray], np.ndarray | float]
    simulator: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    constants: dict = field(default_factory=dict)
    dt: float | None = None
    analytic_oracles: AnalyticOracles | None = None


@dataclass
class SimulationBatch:
    """Presimulated rows plus the per-row seeds that regenerate them."""

    model_name: str
    theta: np.ndarray
    x: np.ndarray
    seeds: np.ndarray

    def __len__(self) -> int:
        return self.theta.shape[0]

    def subset(self, index) -> "SimulationBatch":
        return SimulationBatch(
            model_name=self.model_name,
            theta=self.theta[index],
            x=self.x[index],
            seeds=self.seeds[index],
        )


_MAX_ATTEMPTS = 10


def simulate_row(model: BayesianModel, row_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw one ``(theta, x)`` row from a single derived stream.

    Both the prior draw and the simulator noise come from the same stream, so
    the row is a pure function of ``row_seed``.
    """
    rng = make_rng(row_seed)
    theta = np.asarray(model.prior_sampler(rng), dtype=np.float64).reshape(-1)
    if theta.shape != (model.theta_dim,):
        raise DimensionMismatchError(
            f"{model.name} prior returned shape {theta.shape}, expected ({model.theta_dim},)"
        )
    x = np.asarray(model.simulator(theta, rng), dtype=np.float64)
    if x.shape != model.data_shape.array_shape:
        raise DimensionMismatchError(
            f"{model.name} simulator returned shape {x.shape}, expected {model.data_shape.array_shape}"
        )
    if not np.isfinite(x).all():
        raise SimulationFailedError(f"{model.name} produced non-finite data for theta={theta}")
    return theta, x


def presimulate(model: BayesianModel, n_sims: int, seed: int) -> SimulationBatch:
    """Simulate ``n_sims`` rows, retrying failed rows with fresh sub-seeds.

    A row that keeps failing after {max} attempts raises
    :class:`SimulationFailedError` naming the offending parameters.  Because a
    retry redraws the whole row from a new stream, every stored row remains
    regenerable from its single recorded seed.
    """.format(max=_MAX_ATTEMPTS)
    if n_sims < 1:
        raise ValueError(f"n_sims must be >= 1, got {n_sims}")
    theta = np.zeros((n_sims, model.theta_dim))
    x = np.zeros((n_sims,) + model.data_shape.array_shape)
    seeds = np.zeros(n_sims, dtype=np.uint64)
    for i in range(n_sims):
        last_error: Exception | None = None
        for attempt in range(_MAX_ATTEMPTS):
            row_seed = derive_seed(seed, i, attempt)
            try:
                theta_i, x_i = simulate_row(model, row_seed)
            except (SimulationFailedError, FloatingPointError, OverflowError, ValueError) as err:
                last_error = err
                continue
            theta[i] = theta_i
            x[i] = x_i
            seeds[i] = row_seed
            break
        else:
            raise SimulationFailedError(
                f"{model.name} row {i} failed {_MAX_ATTEMPTS} times; last error: {last_error}"
            )
    return SimulationBatch(model_name=model.name, theta=theta, x=x, seeds=seeds)


# -- serialization ------------------------------------------------------


def _metadata_record(model_name: str, theta_dim: int, data_shape: DataShape,
                     constants: dict, dt, n_rows: int, extra: dict | None) -> dict:
    record = {
        "record": "metadata",
        "format_version": FORMAT_VERSION,
        "model": model_name,
        "theta_dim": theta_dim,
        "data_shape": data_shape.to_json(),
        "constants": constants,
        "dt": dt,
        "n_rows": n_rows,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        record.update(extra)
    return record


def save_dataset(batch: SimulationBatch, model: BayesianModel, path: str | Path,
                 extra_metadata: dict | None = None) -> None:
    """Write rows as NDJSON with a leading metadata record."""
    path = Path(path)
    data_shape = model.data_shape
    with path.open("w", encoding="utf-8") as fh:
        meta = _metadata_record(
            batch.model_name, model.theta_dim, data_shape, model.constants, model.dt,
            len(batch), extra_metadata,
        )
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for i in range(len(batch)):
            row = {
                "theta": batch.theta[i].tolist(),
                "x": batch.x[i].tolist(),
                "seed": int(batch.seeds[i]),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> tuple[SimulationBatch, dict]:
    """Read an NDJSON dataset; returns the batch and its metadata record."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise FormatError(f"{path} is empty")
        meta = json.loads(first)
        if meta.get("record") != "metadata":
            raise FormatError(f"{path} does not start with a metadata record")
        if meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(
                f"{path} has format version {meta.get('format_version')}, expected {FORMAT_VERSION}"
            )
        shape = DataShape.from_json(meta["data_shape"])
        theta_rows, x_rows, seed_rows = [], [], []
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            theta_rows.append(row["theta"])
            x_rows.append(row["x"])
            seed_rows.append(row["seed"])
    if len(theta_rows) != meta["n_rows"]:
        raise FormatError(f"{path} holds {len(theta_rows)} rows, metadata says {meta['n_rows']}")
    theta = np.asarray(theta_rows, dtype=np.float64)
    x = np.asarray(x_rows, dtype=np.float64).reshape((len(x_rows),) + shape.array_shape)
    batch = SimulationBatch(
        model_name=meta["model"],
        theta=theta,
        x=x,
        seeds=np.asarray(seed_rows, dtype=np.uint64),
    )
    return batch, meta
