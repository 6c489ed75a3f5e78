"""Summary networks and the embedding-space regularizer.

Three summary kinds cover the data layouts the simulators produce: a
pass-through for fixed-size vectors, a permutation-invariant deep set for
exchangeable observations, and a recurrent encoder for ordered series.  The
module also provides the maximum mean discrepancy penalty that, when enabled,
pulls summary embeddings toward a standard normal so that embedding-space
distances stay comparable across data sets.

Set reductions are canonicalized (elements sorted lexicographically before
pooling), which makes permutation invariance exact bit for bit rather than up
to float summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError
from .flows import canonical_set_order
from .kernel import tensor as T
from .kernel.dense import DenseNetworkSpec, dense_forward, init_dense_params
from .kernel.recurrent import GruSpec, gru_step, init_gru_params

# Bandwidths of the Gaussian kernel mixture shared by the training penalty
# and the two-sample diagnostics, chosen to straddle unit-scale embeddings.
MMD_BANDWIDTHS = (0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class IdentitySummarySpec:
    """Pass-through for data that is already a fixed-size vector.

    Structured inputs are flattened row-major, so a short series can still be
    fed to a posterior network without a trainable encoder.
    """

    input_dim: int

    @property
    def summary_dim(self) -> int:
        return self.input_dim


@dataclass(frozen=True)
class DeepSetSpec:
    """Permutation-invariant encoder: per-element stack, pool, head.

    ``n_equivariant_modules`` element-wise networks are applied in sequence to
    every observation, the results are pooled across the set, and a final
    network maps the pooled vector to ``summary_dim``.  Mean pooling keeps
    embeddings comparable across set sizes.
    """

    point_dim: int
    summary_dim: int
    n_equivariant_modules: int = 2
    equivariant_dim: int = 64
    equivariant_hidden: tuple[int, ...] = (64,)
    post_hidden: tuple[int, ...] = (64,)
    pool: str = "mean"
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "equivariant_hidden", tuple(self.equivariant_hidden))
        object.__setattr__(self, "post_hidden", tuple(self.post_hidden))
        if self.pool not in ("mean", "sum"):
            raise ValueError(f"pool must be 'mean' or 'sum', got {self.pool!r}")
        if self.n_equivariant_modules < 1:
            raise ValueError("need at least one equivariant module")

    def equivariant_subnet(self, index: int) -> DenseNetworkSpec:
        in_dim = self.point_dim if index == 0 else self.equivariant_dim
        return DenseNetworkSpec(
            input_dim=in_dim,
            hidden_widths=self.equivariant_hidden,
            output_dim=self.equivariant_dim,
            activation=self.activation,
        )

    @property
    def post_subnet(self) -> DenseNetworkSpec:
        return DenseNetworkSpec(
            input_dim=self.equivariant_dim,
            hidden_widths=self.post_hidden,
            output_dim=self.summary_dim,
            activation=self.activation,
        )


@dataclass(frozen=True)
class RecurrentSummarySpec:
    """Ordered-series encoder: a gated recurrent pass plus a linear head."""

    channel_dim: int
    summary_dim: int
    hidden_dim: int = 64

    @property
    def gru(self) -> GruSpec:
        return GruSpec(input_dim=self.channel_dim, hidden_dim=self.hidden_dim)

    @property
    def head(self) -> DenseNetworkSpec:
        return DenseNetworkSpec(
            input_dim=self.hidden_dim, hidden_widths=(), output_dim=self.summary_dim
        )


SummarySpec = IdentitySummarySpec | DeepSetSpec | RecurrentSummarySpec


def summary_dim(spec: SummarySpec) -> int:
    return spec.summary_dim


def init_summary_params(spec: SummarySpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if isinstance(spec, IdentitySummarySpec):
        return {}
    if isinstance(spec, DeepSetSpec):
        params: dict[str, np.ndarray] = {}
        for m in range(spec.n_equivariant_modules):
            params.update(init_dense_params(spec.equivariant_subnet(m), rng, prefix=f"eq{m}/"))
        params.update(init_dense_params(spec.post_subnet, rng, prefix="post/"))
        return params
    params = init_gru_params(spec.gru, rng, prefix="gru/")
    params.update(init_dense_params(spec.head, rng, prefix="head/"))
    return params


def summarize(spec: SummarySpec, params: dict, x) -> T.Tensor:
    """Encode a batch of data sets into embeddings of shape
    ``(batch, summary_dim)``."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(spec, IdentitySummarySpec):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != spec.input_dim:
            raise DimensionMismatchError(
                f"identity summary expected {spec.input_dim} values per row, got {flat.shape[1]}"
            )
        return T.as_tensor(flat)

    if isinstance(spec, DeepSetSpec):
        if x.ndim != 3 or x.shape[2] != spec.point_dim:
            raise DimensionMismatchError(
                f"deep set expected (batch, n, {spec.point_dim}), got {x.shape}"
            )
        batch, n_points, dim = x.shape
        if n_points == 0:
            raise DimensionMismatchError("cannot summarize an empty set")
        ordered = np.empty_like(x)
        for b in range(batch):
            ordered[b] = x[b][canonical_set_order(x[b])]
        h: T.Tensor | np.ndarray = ordered.reshape(batch * n_points, dim)
        for m in range(spec.n_equivariant_modules):
            h = dense_forward(spec.equivariant_subnet(m), params, h, prefix=f"eq{m}/")
        stacked = T.reshape(h, (batch, n_points, spec.equivariant_dim))
        if spec.pool == "mean":
            pooled = T.tmean(stacked, axis=1)
        else:
            pooled = T.tsum(stacked, axis=1)
        return dense_forward(spec.post_subnet, params, pooled, prefix="post/")

    if x.ndim != 3 or x.shape[2] != spec.channel_dim:
        raise DimensionMismatchError(
            f"recurrent summary expected (batch, n, {spec.channel_dim}), got {x.shape}"
        )
    batch, n_steps, _ = x.shape
    if n_steps == 0:
        raise DimensionMismatchError("cannot summarize an empty series")
    state = T.Tensor(np.zeros((batch, spec.hidden_dim)))
    for n in range(n_steps):
        state = gru_step(spec.gru, params, x[:, n, :], state, prefix="gru/")
    return dense_forward(spec.head, params, state, prefix="head/")


# -- embedding regularizer ----------------------------------------------


def _kernel_sum(sq_dists: T.Tensor, bandwidths: tuple[float, ...]) -> T.Tensor:
    total = None
    for bw in bandwidths:
        term = T.exp(sq_dists * (-1.0 / (2.0 * bw * bw)))
        total = term if total is None else total + term
    return total


def _pairwise_sq_dists(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    a_sq = T.tsum(T.square(a), axis=1, keepdims=True)
    b_sq = T.reshape(T.tsum(T.square(b), axis=1), (1, -1))
    cross = T.matmul(a, T.transpose(b))
    return a_sq + b_sq - 2.0 * cross


def mmd_penalty(
    embeddings,
    rng: np.random.Generator,
    reference: np.ndarray | None = None,
    bandwidths: tuple[float, ...] = MMD_BANDWIDTHS,
) -> T.Tensor:
    """Unbiased squared maximum mean discrepancy between embeddings and a
    standard normal reference sample of the same size.

    Differentiable with respect to the embeddings, so it can be added to a
    training criterion.  ``reference`` overrides the fresh Gaussian draw and
    exists for degenerate checks (identical sets must score <= 0 under the
    unbiased estimator).
    """
    a = T.as_tensor(embeddings)
    if a.ndim != 2 or a.shape[0] < 2:
        raise DimensionMismatchError(f"mmd needs at least two embedding rows, got shape {a.shape}")
    n, dim = a.shape
    if reference is None:
        reference = rng.standard_normal((n, dim))
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape[0] < 2:
        raise DimensionMismatchError("mmd reference needs at least two rows")
    m = reference.shape[0]
    b = T.as_tensor(reference)

    eye_n = np.eye(n)
    eye_m = np.eye(m)
    k_aa = _kernel_sum(_pairwise_sq_dists(a, a), bandwidths)
    k_bb = _kernel_sum(_pairwise_sq_dists(b, b), bandwidths)
    k_ab = _kernel_sum(_pairwise_sq_dists(a, b), bandwidths)

    off_aa = T.tsum(k_aa * (1.0 - eye_n))
    off_bb = T.tsum(k_bb * (1.0 - eye_m))
    return (
        off_aa * (1.0 / (n * (n - 1)))
        + off_bb * (1.0 / (m * (m - 1)))
        - T.tsum(k_ab) * (2.0 / (n * m))
    )
