"""Conditional invertible networks built from affine coupling layers.

A flow maps targets to latent variables through a stack of conditional affine
couplings with fixed seeded permutations in between.  Densities follow from
the change of variables formula; sampling inverts the stack draw by draw.
Three conditioning variants share the same layer machinery:

``vanilla``
    one fixed-size target vector per condition,
``exchangeable``
    a set of observations, each transformed by the same per-point flow with
    the condition attached, so the joint density factorizes over the set,
``markovian``
    an ordered series where each step is conditioned on the condition vector
    plus a recurrent memory of all earlier steps, giving an autoregressive
    factorization with exact one-step densities.

Scales inside every coupling are soft-clamped with ``alpha * tanh(s / alpha)``
so that no single layer can explode or kill a dimension; subnet output layers
start at zero which makes every network the identity map at initialisation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from .errors import DimensionMismatchError, NonFiniteError
from .kernel import tensor as T
from .kernel.dense import DenseNetworkSpec, dense_forward, init_dense_params
from .kernel.recurrent import GruSpec, gru_step, init_gru_params
from .kernel.rng import spawn_rng

VARIANTS = ("vanilla", "exchangeable", "markovian")
LATENT_KINDS = ("standard_gaussian", "student_t")


# -- latent base distributions ------------------------------------------


@dataclass(frozen=True)
class LatentSpec:
    """Base distribution of the flow: standard normal or independent
    per-dimension Student-t with ``df`` degrees of freedom."""

    kind: str = "standard_gaussian"
    df: float | None = None

    def __post_init__(self):
        if self.kind not in LATENT_KINDS:
            raise ValueError(f"unknown latent kind {self.kind!r}")
        if self.kind == "student_t":
            if self.df is None or self.df <= 2.0:
                raise ValueError("student_t latent needs df > 2")


def latent_log_prob(spec: LatentSpec, z: T.Tensor) -> T.Tensor:
    """Row-wise log density of the latent distribution, shape ``(batch,)``."""
    dim = z.shape[1]
    if spec.kind == "standard_gaussian":
        quad = T.tsum(T.square(z), axis=1)
        return -0.5 * quad - 0.5 * dim * np.log(2.0 * np.pi)
    df = float(spec.df)
    const = gammaln((df + 1.0) / 2.0) - gammaln(df / 2.0) - 0.5 * np.log(df * np.pi)
    per_dim = T.log(1.0 + T.square(z) * (1.0 / df)) * (-(df + 1.0) / 2.0)
    return T.tsum(per_dim, axis=1) + dim * const


def latent_sample(spec: LatentSpec, n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "standard_gaussian":
        return rng.standard_normal((n, dim))
    df = float(spec.df)
    gauss = rng.standard_normal((n, dim))
    chi2 = rng.chisquare(df, size=(n, dim))
    return gauss / np.sqrt(chi2 / df)


# -- layer specs --------------------------------------------------------


@dataclass(frozen=True)
class CouplingLayerSpec:
    """One affine coupling over ``dim >= 2`` coordinates.

    The input is first shuffled by ``permutation``, then split into an active
    block of size ``split_a`` and a passive block.  Four subnets (scale and
    shift for each half-update) see the complementary block concatenated with
    the condition.
    """

    dim: int
    condition_dim: int
    permutation: tuple[int, ...]
    split_a: int
    subnet_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    scale_clamp: float = 1.9

    def __post_init__(self):
        if self.dim < 2:
            raise DimensionMismatchError(f"coupling layers need dim >= 2, got {self.dim}")
        if not (1 <= self.split_a <= self.dim - 1):
            raise DimensionMismatchError(
                f"split {self.split_a} leaves an empty block for dim {self.dim}"
            )
        if sorted(self.permutation) != list(range(self.dim)):
            raise ValueError(f"invalid permutation {self.permutation}")

    @property
    def split_b(self) -> int:
        return self.dim - self.split_a

    def subnet(self, which: str) -> DenseNetworkSpec:
        if which in ("s1", "t1"):
            in_dim, out_dim = self.split_b + self.condition_dim, self.split_a
        else:
            in_dim, out_dim = self.split_a + self.condition_dim, self.split_b
        return DenseNetworkSpec(
            input_dim=in_dim,
            hidden_widths=self.subnet_hidden,
            output_dim=out_dim,
            activation=self.activation,
        )


@dataclass(frozen=True)
class ElementwiseLayerSpec:
    """Condition-driven affine map used where a coupling split is impossible.

    For one-dimensional targets every coordinate is rescaled and shifted by
    amounts computed from the condition alone; without a condition the layer
    owns the scale and shift directly.  The map stays invertible because the
    transformed coordinates never feed their own scale.
    """

    dim: int
    condition_dim: int
    subnet_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    scale_clamp: float = 1.9

    def subnet(self) -> DenseNetworkSpec:
        return DenseNetworkSpec(
            input_dim=self.condition_dim,
            hidden_widths=self.subnet_hidden,
            output_dim=self.dim,
            activation=self.activation,
        )


@dataclass(frozen=True)
class FlowSpec:
    """Architecture of one conditional flow."""

    target_dim: int
    condition_dim: int
    n_layers: int
    subnet_hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    scale_clamp: float = 1.9
    latent: LatentSpec = LatentSpec()
    variant: str = "vanilla"
    memory_hidden: int = 32
    perm_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "subnet_hidden", tuple(int(w) for w in self.subnet_hidden))
        if self.target_dim < 1:
            raise DimensionMismatchError(f"target_dim must be >= 1, got {self.target_dim}")
        if self.condition_dim < 0:
            raise DimensionMismatchError(f"condition_dim must be >= 0, got {self.condition_dim}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def layer_condition_dim(self) -> int:
        if self.variant == "markovian":
            return self.condition_dim + self.memory_hidden
        return self.condition_dim

    @property
    def memory(self) -> GruSpec:
        if self.variant != "markovian":
            raise ValueError("only markovian flows carry a recurrent memory")
        return GruSpec(input_dim=self.condition_dim + self.target_dim, hidden_dim=self.memory_hidden)


@lru_cache(maxsize=None)
def flow_layers(spec: FlowSpec) -> tuple:
    """Derive the concrete layer stack for a flow spec.

    Layers alternate which half of the (permuted) coordinates is updated
    first, and each layer applies its own seeded permutation, so information
    mixes across all coordinates after a few layers.
    """
    cond = spec.layer_condition_dim
    if spec.target_dim == 1:
        layer = ElementwiseLayerSpec(
            dim=1,
            condition_dim=cond,
            subnet_hidden=spec.subnet_hidden,
            activation=spec.activation,
            scale_clamp=spec.scale_clamp,
        )
        return tuple(layer for _ in range(spec.n_layers))

    split_a = (spec.target_dim + 1) // 2
    layers = []
    for k in range(spec.n_layers):
        perm = spawn_rng(spec.perm_seed, k).permutation(spec.target_dim)
        if k % 2 == 1:
            perm = np.roll(perm, split_a)
        layers.append(
            CouplingLayerSpec(
                dim=spec.target_dim,
                condition_dim=cond,
                permutation=tuple(int(i) for i in perm),
                split_a=split_a,
                subnet_hidden=spec.subnet_hidden,
                activation=spec.activation,
                scale_clamp=spec.scale_clamp,
            )
        )
    return tuple(layers)


# -- parameter initialisation -------------------------------------------


def init_flow_params(spec: FlowSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameters for every layer (identity map at initialisation)."""
    params: dict[str, np.ndarray] = {}
    for k, layer in enumerate(flow_layers(spec)):
        prefix = f"L{k}/"
        if isinstance(layer, CouplingLayerSpec):
            for name in ("s1", "t1", "s2", "t2"):
                params.update(
                    init_dense_params(layer.subnet(name), rng, zero_final=True, prefix=f"{prefix}{name}/")
                )
        else:
            if layer.condition_dim > 0:
                for name in ("s", "t"):
                    params.update(
                        init_dense_params(layer.subnet(), rng, zero_final=True, prefix=f"{prefix}{name}/")
                    )
            else:
                params[f"{prefix}s"] = np.zeros(layer.dim)
                params[f"{prefix}t"] = np.zeros(layer.dim)
    if spec.variant == "markovian":
        params.update(init_gru_params(spec.memory, rng, prefix="mem/"))
    return params


# -- single-layer transforms --------------------------------------------


def _clamped(raw: T.Tensor, alpha: float) -> T.Tensor:
    return alpha * T.tanh(raw * (1.0 / alpha))


def _with_condition(block: T.Tensor, cond: T.Tensor | None) -> T.Tensor:
    return block if cond is None else T.concat([block, cond], axis=1)


def coupling_forward(layer: CouplingLayerSpec, params: dict, x, cond, prefix: str = ""):
    """Forward pass of one coupling; returns ``(z, log_det)``."""
    x = T.as_tensor(x)
    h = T.permute_cols(x, np.array(layer.permutation))
    xa = T.slice_cols(h, 0, layer.split_a)
    xb = T.slice_cols(h, layer.split_a, layer.dim)

    in1 = _with_condition(xb, cond)
    s1 = _clamped(dense_forward(layer.subnet("s1"), params, in1, prefix=f"{prefix}s1/"), layer.scale_clamp)
    t1 = dense_forward(layer.subnet("t1"), params, in1, prefix=f"{prefix}t1/")
    za = xa * T.exp(s1) + t1

    in2 = _with_condition(za, cond)
    s2 = _clamped(dense_forward(layer.subnet("s2"), params, in2, prefix=f"{prefix}s2/"), layer.scale_clamp)
    t2 = dense_forward(layer.subnet("t2"), params, in2, prefix=f"{prefix}t2/")
    zb = xb * T.exp(s2) + t2

    z = T.concat([za, zb], axis=1)
    log_det = T.tsum(s1, axis=1) + T.tsum(s2, axis=1)
    return z, log_det


def coupling_inverse(layer: CouplingLayerSpec, params: dict, z, cond, prefix: str = ""):
    """Inverse of :func:`coupling_forward`; the returned log-determinant is
    the one of the inverse map, i.e. the negated forward value."""
    z = T.as_tensor(z)
    za = T.slice_cols(z, 0, layer.split_a)
    zb = T.slice_cols(z, layer.split_a, layer.dim)

    in2 = _with_condition(za, cond)
    s2 = _clamped(dense_forward(layer.subnet("s2"), params, in2, prefix=f"{prefix}s2/"), layer.scale_clamp)
    t2 = dense_forward(layer.subnet("t2"), params, in2, prefix=f"{prefix}t2/")
    xb = (zb - t2) * T.exp(-s2)

    in1 = _with_condition(xb, cond)
    s1 = _clamped(dense_forward(layer.subnet("s1"), params, in1, prefix=f"{prefix}s1/"), layer.scale_clamp)
    t1 = dense_forward(layer.subnet("t1"), params, in1, prefix=f"{prefix}t1/")
    xa = (za - t1) * T.exp(-s1)

    h = T.concat([xa, xb], axis=1)
    x = T.permute_cols(h, np.argsort(np.array(layer.permutation)))
    log_det = -(T.tsum(s1, axis=1) + T.tsum(s2, axis=1))
    return x, log_det


def _elementwise_scale_shift(layer: ElementwiseLayerSpec, params: dict, cond, batch: int, prefix: str):
    if layer.condition_dim > 0:
        s = _clamped(dense_forward(layer.subnet(), params, cond, prefix=f"{prefix}s/"), layer.scale_clamp)
        t = dense_forward(layer.subnet(), params, cond, prefix=f"{prefix}t/")
    else:
        ones = T.Tensor(np.ones((batch, 1)))
        s = _clamped(T.matmul(ones, T.reshape(T.as_tensor(params[f"{prefix}s"]), (1, -1))), layer.scale_clamp)
        t = T.matmul(ones, T.reshape(T.as_tensor(params[f"{prefix}t"]), (1, -1)))
    return s, t


def elementwise_forward(layer: ElementwiseLayerSpec, params: dict, x, cond, prefix: str = ""):
    x = T.as_tensor(x)
    s, t = _elementwise_scale_shift(layer, params, cond, x.shape[0], prefix)
    z = x * T.exp(s) + t
    return z, T.tsum(s, axis=1)


def elementwise_inverse(layer: ElementwiseLayerSpec, params: dict, z, cond, prefix: str = ""):
    z = T.as_tensor(z)
    s, t = _elementwise_scale_shift(layer, params, cond, z.shape[0], prefix)
    x = (z - t) * T.exp(-s)
    return x, -T.tsum(s, axis=1)


# -- whole-flow passes --------------------------------------------------


def _check_condition(spec: FlowSpec, cond, batch: int) -> T.Tensor | None:
    needed = spec.layer_condition_dim
    if needed == 0:
        return None
    cond = T.as_tensor(cond)
    if cond.ndim != 2 or cond.shape != (batch, needed):
        raise DimensionMismatchError(
            f"expected condition of shape ({batch}, {needed}), got {getattr(cond, 'shape', None)}"
        )
    return cond


def flow_forward(spec: FlowSpec, params: dict, x, cond=None):
    """Map targets to latents; returns ``(z, log_det)`` with shapes
    ``(batch, dim)`` and ``(batch,)``."""
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != spec.target_dim:
        raise DimensionMismatchError(
            f"expected target of shape (batch, {spec.target_dim}), got {x.shape}"
        )
    cond = _check_condition(spec, cond, x.shape[0])
    log_det = T.Tensor(np.zeros(x.shape[0]))
    out = x
    for k, layer in enumerate(flow_layers(spec)):
        if isinstance(layer, CouplingLayerSpec):
            out, ld = coupling_forward(layer, params, out, cond, prefix=f"L{k}/")
        else:
            out, ld = elementwise_forward(layer, params, out, cond, prefix=f"L{k}/")
        if not np.isfinite(out.data).all():
            raise NonFiniteError(f"flow layer {k}")
        log_det = log_det + ld
    return out, log_det


def flow_inverse(spec: FlowSpec, params: dict, z, cond=None):
    """Map latents back to targets; log_det is the inverse map's own."""
    z = T.as_tensor(z)
    if z.ndim != 2 or z.shape[1] != spec.target_dim:
        raise DimensionMismatchError(
            f"expected latent of shape (batch, {spec.target_dim}), got {z.shape}"
        )
    cond = _check_condition(spec, cond, z.shape[0])
    log_det = T.Tensor(np.zeros(z.shape[0]))
    out = z
    layers = flow_layers(spec)
    for k in range(len(layers) - 1, -1, -1):
        layer = layers[k]
        if isinstance(layer, CouplingLayerSpec):
            out, ld = coupling_inverse(layer, params, out, cond, prefix=f"L{k}/")
        else:
            out, ld = elementwise_inverse(layer, params, out, cond, prefix=f"L{k}/")
        if not np.isfinite(out.data).all():
            raise NonFiniteError(f"flow layer {k} (inverse)")
        log_det = log_det + ld
    return out, log_det


def flow_log_prob(spec: FlowSpec, params: dict, x, cond=None) -> T.Tensor:
    """Log density of targets under the flow, shape ``(batch,)``."""
    z, log_det = flow_forward(spec, params, x, cond)
    return latent_log_prob(spec.latent, z) + log_det


def flow_sample(spec: FlowSpec, params: dict, condition, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n_draws`` targets for one condition vector (or None)."""
    if n_draws < 0:
        raise ValueError(f"n_draws must be >= 0, got {n_draws}")
    if n_draws == 0:
        return np.zeros((0, spec.target_dim))
    cond = None
    if spec.layer_condition_dim > 0:
        condition = np.asarray(condition, dtype=np.float64).reshape(-1)
        cond = np.tile(condition, (n_draws, 1))
    z = latent_sample(spec.latent, n_draws, spec.target_dim, rng)
    x, _ = flow_inverse(spec, params, z, cond)
    return x.data


def flow_sample_batch(spec: FlowSpec, params: dict, conditions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per condition row, vectorised over the whole batch."""
    conditions = np.asarray(conditions, dtype=np.float64)
    z = latent_sample(spec.latent, conditions.shape[0], spec.target_dim, rng)
    x, _ = flow_inverse(spec, params, z, conditions)
    return x.data


# -- exchangeable sets --------------------------------------------------


def canonical_set_order(x_set: np.ndarray) -> np.ndarray:
    """Indices that sort a set of rows lexicographically.

    Applying this before any reduction makes set operations invariant to the
    input ordering bit for bit, not merely up to float summation error.
    """
    x_set = np.asarray(x_set)
    return np.lexsort(x_set.T[::-1])


def exchangeable_log_prob(spec: FlowSpec, params: dict, x_set, theta) -> T.Tensor:
    """Joint log density of sets of observations given conditions.

    ``x_set`` has shape ``(batch, n_points, dim)`` and ``theta`` shape
    ``(batch, condition_dim)``.  The density factorizes over points; an empty
    set has log probability zero by convention.
    """
    x_set = np.asarray(x_set, dtype=np.float64)
    if x_set.ndim != 3 or x_set.shape[2] != spec.target_dim:
        raise DimensionMismatchError(
            f"expected sets of shape (batch, n, {spec.target_dim}), got {x_set.shape}"
        )
    batch, n_points, dim = x_set.shape
    if n_points == 0:
        return T.Tensor(np.zeros(batch))
    ordered = np.empty_like(x_set)
    for b in range(batch):
        ordered[b] = x_set[b][canonical_set_order(x_set[b])]
    flat = ordered.reshape(batch * n_points, dim)
    cond = None
    if spec.condition_dim > 0:
        theta = np.asarray(theta, dtype=np.float64)
        cond = np.repeat(theta, n_points, axis=0)
    per_point = flow_log_prob(spec, params, flat, cond)
    return T.tsum(T.reshape(per_point, (batch, n_points)), axis=1)


def exchangeable_sample(spec: FlowSpec, params: dict, theta, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one set of ``n_points`` observations for a single condition."""
    return flow_sample(spec, params, theta, n_points, rng)


# -- ordered series -----------------------------------------------------


def markovian_log_prob(spec: FlowSpec, params: dict, x_series, theta) -> T.Tensor:
    """Joint log density of ordered series given conditions.

    ``x_series`` has shape ``(batch, n_steps, dim)``.  Each step's coupling
    stack is conditioned on the condition vector concatenated with a
    recurrent memory of all earlier steps, so the result is the sum of exact
    one-step change-of-variables terms.
    """
    x_series = np.asarray(x_series, dtype=np.float64)
    if x_series.ndim != 3 or x_series.shape[2] != spec.target_dim:
        raise DimensionMismatchError(
            f"expected series of shape (batch, n, {spec.target_dim}), got {x_series.shape}"
        )
    batch, n_steps, dim = x_series.shape
    if n_steps == 0:
        return T.Tensor(np.zeros(batch))
    theta_t = None
    if spec.condition_dim > 0:
        theta = np.asarray(theta, dtype=np.float64)
        theta_t = T.as_tensor(theta)
    memory = spec.memory
    state = T.Tensor(np.zeros((batch, memory.hidden_dim)))
    total = T.Tensor(np.zeros(batch))
    layers = flow_layers(spec)
    for n in range(n_steps):
        step = x_series[:, n, :]
        cond = state if theta_t is None else T.concat([theta_t, state], axis=1)
        out = T.as_tensor(step)
        log_det = T.Tensor(np.zeros(batch))
        for k, layer in enumerate(layers):
            if isinstance(layer, CouplingLayerSpec):
                out, ld = coupling_forward(layer, params, out, cond, prefix=f"L{k}/")
            else:
                out, ld = elementwise_forward(layer, params, out, cond, prefix=f"L{k}/")
            log_det = log_det + ld
        total = total + latent_log_prob(spec.latent, out) + log_det
        mem_in = step if spec.condition_dim == 0 else np.concatenate([theta, step], axis=1)
        state = gru_step(memory, params, mem_in, state, prefix="mem/")
    return total


def markovian_sample_batch(spec: FlowSpec, params: dict, thetas, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """One surrogate series per condition row, generated step by step."""
    thetas = np.asarray(thetas, dtype=np.float64)
    batch = thetas.shape[0]
    memory = spec.memory
    state = T.Tensor(np.zeros((batch, memory.hidden_dim)))
    layers = flow_layers(spec)
    series = np.zeros((batch, n_steps, spec.target_dim))
    for n in range(n_steps):
        cond = state if spec.condition_dim == 0 else T.concat([T.as_tensor(thetas), state], axis=1)
        out = T.as_tensor(latent_sample(spec.latent, batch, spec.target_dim, rng))
        for k in range(len(layers) - 1, -1, -1):
            layer = layers[k]
            if isinstance(layer, CouplingLayerSpec):
                out, _ = coupling_inverse(layer, params, out, cond, prefix=f"L{k}/")
            else:
                out, _ = elementwise_inverse(layer, params, out, cond, prefix=f"L{k}/")
        if not np.isfinite(out.data).all():
            raise NonFiniteError(f"markovian sample step {n}")
        step = out.data
        series[:, n, :] = step
        mem_in = step if spec.condition_dim == 0 else np.concatenate([thetas, step], axis=1)
        state = gru_step(memory, params, mem_in, state, prefix="mem/")
    return series


def markovian_sample(spec: FlowSpec, params: dict, theta, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """One surrogate series for a single condition, shape ``(n_steps, dim)``."""
    theta = np.asarray(theta, dtype=np.float64).reshape(1, -1)
    return markovian_sample_batch(spec, params, theta, n_steps, rng)[0]
