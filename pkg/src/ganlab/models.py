"""Dense generator/discriminator networks with spectral normalization.

Weights are stored raw; spectral normalization keeps a persistent unit vector
``u`` and a cached top-singular-value estimate per weight. The estimate is
refreshed once per training step and treated as a constant w.r.t. gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Graph, Tensor

SIGMA_EPS = 1e-12

_ACTIVATIONS = ("identity", "relu", "leaky_relu", "tanh", "sigmoid")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of one dense network."""

    input_dim: int
    hidden_widths: Tuple[int, ...]
    output_dim: int
    activation: str = "leaky_relu"
    output_activation: str = "identity"
    spectral_norm: bool = False
    leaky_alpha: float = 0.1

    def __post_init__(self):
        widths = (self.input_dim, *self.hidden_widths, self.output_dim)
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        for kind in (self.activation, self.output_activation):
            if kind not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {kind!r}")

    def layer_dims(self) -> List[Tuple[int, int]]:
        widths = (self.input_dim, *self.hidden_widths, self.output_dim)
        return list(zip(widths[:-1], widths[1:]))


class ModelParams:
    """Weights/biases plus spectral-normalization state for one network."""

    __slots__ = ("spec", "weights", "biases", "sn_u", "sn_sigma")

    def __init__(self, spec: NetworkSpec, weights: List[Array],
                 biases: List[Array], sn_u: Optional[List[Array]] = None,
                 sn_sigma: Optional[List[float]] = None):
        self.spec = spec
        self.weights = weights
        self.biases = biases
        self.sn_u = sn_u
        self.sn_sigma = sn_sigma
        self._check_chain()

    def _check_chain(self):
        dims = self.spec.layer_dims()
        if len(self.weights) != len(dims) or len(self.biases) != len(dims):
            raise ValueError("layer count does not match spec")
        for (d_in, d_out), w, b in zip(dims, self.weights, self.biases):
            if w.shape != (d_in, d_out) or b.shape != (d_out,):
                raise ValueError(
                    f"layer shapes {w.shape}/{b.shape} do not chain "
                    f"with spec dims ({d_in}, {d_out})")

    def named_arrays(self) -> Dict[str, Array]:
        """Parameters in fixed order: w0, b0, w1, b1, ..."""
        out: Dict[str, Array] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def with_arrays(self, named: Dict[str, Array]) -> "ModelParams":
        """New params with replaced weight/bias arrays; SN state is carried."""
        n = len(self.weights)
        weights = [np.asarray(named[f"w{i}"], dtype=np.float64)
                   for i in range(n)]
        biases = [np.asarray(named[f"b{i}"], dtype=np.float64)
                  for i in range(n)]
        sn_u = [u.copy() for u in self.sn_u] if self.sn_u is not None else None
        sn_sigma = list(self.sn_sigma) if self.sn_sigma is not None else None
        return ModelParams(self.spec, weights, biases, sn_u, sn_sigma)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [u.copy() for u in self.sn_u] if self.sn_u is not None else None,
            list(self.sn_sigma) if self.sn_sigma is not None else None,
        )


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ModelParams:
    """He-style uniform weights (bound sqrt(6/fan_in)), zero biases.

    With spectral normalization enabled, each layer also draws a unit vector
    ``u`` and runs one power iteration so a sigma estimate exists from the
    start. Draw order per layer: weight entries, then u.
    """
    weights: List[Array] = []
    biases: List[Array] = []
    sn_u: List[Array] = []
    sn_sigma: List[float] = []
    for d_in, d_out in spec.layer_dims():
        bound = np.sqrt(6.0 / d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
        if spec.spectral_norm:
            u = rng.standard_normal(d_out)
            u /= np.linalg.norm(u)
            _, u, sigma = spectral_normalize(weights[-1], u, 1)
            sn_u.append(u)
            sn_sigma.append(sigma)
    if spec.spectral_norm:
        return ModelParams(spec, weights, biases, sn_u, sn_sigma)
    return ModelParams(spec, weights, biases)


def spectral_normalize(weight: Array, u: Array,
                       n_power_iters: int) -> Tuple[Array, Array, float]:
    """Divide ``weight`` by its power-iteration top-singular-value estimate.

    ``u`` lives in the output space (length = weight.shape[1]) and the
    returned copy replaces the caller's persistent state. A zero matrix
    yields sigma clamped to SIGMA_EPS, which callers can detect by comparing
    against the clamp.
    """
    if n_power_iters < 1:
        raise ValueError("n_power_iters must be >= 1")
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 2 or u.shape != (w.shape[1],):
        raise ValueError(
            f"spectral_normalize: weight {w.shape} and u {u.shape}")
    u = u.astype(np.float64, copy=True)
    v = np.zeros(w.shape[0])
    for _ in range(n_power_iters):
        v = w @ u
        norm_v = np.linalg.norm(v)
        if norm_v <= SIGMA_EPS:
            return w / SIGMA_EPS, u, SIGMA_EPS
        v /= norm_v
        u = w.T @ v
        norm_u = np.linalg.norm(u)
        if norm_u <= SIGMA_EPS:
            return w / SIGMA_EPS, u, SIGMA_EPS
        u /= norm_u
    sigma = float(v @ (w @ u))
    sigma = max(sigma, SIGMA_EPS)
    return w / sigma, u, sigma


def refresh_spectral_state(params: ModelParams,
                           n_power_iters: int = 1) -> List[float]:
    """Advance each layer's power iteration; updates u and sigma in place."""
    if not params.spec.spectral_norm:
        return []
    sigmas: List[float] = []
    for i, w in enumerate(params.weights):
        _, u, sigma = spectral_normalize(w, params.sn_u[i], n_power_iters)
        params.sn_u[i] = u
        params.sn_sigma[i] = sigma
        sigmas.append(sigma)
    return sigmas


def effective_weights(params: ModelParams) -> List[Array]:
    """Raw weights, divided by the cached sigma when SN is enabled."""
    if not params.spec.spectral_norm:
        return list(params.weights)
    return [w / s for w, s in zip(params.weights, params.sn_sigma)]


def _activate(kind: str, x: Tensor, alpha: float) -> Tensor:
    if kind == "identity":
        return x
    if kind == "relu":
        return ad.relu(x)
    if kind == "leaky_relu":
        return ad.leaky_relu(x, alpha)
    if kind == "tanh":
        return ad.tanh(x)
    if kind == "sigmoid":
        return ad.sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def network_forward(spec: NetworkSpec, weights: List[Tensor],
                    biases: List[Tensor], x: Tensor) -> Tensor:
    """Dense forward pass; tracked iff the supplied tensors are tracked."""
    if x.data.ndim != 2 or x.data.shape[1] != spec.input_dim:
        raise ad.ShapeError(
            f"forward: input shape {x.data.shape}, expected "
            f"(batch, {spec.input_dim})")
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = ad.add_bias(ad.matmul(h, w), b)
        kind = spec.output_activation if i == last else spec.activation
        h = _activate(kind, h, spec.leaky_alpha)
    return h


def _plain_forward(params: ModelParams, x: Array) -> Array:
    weights = [Tensor(w) for w in effective_weights(params)]
    biases = [Tensor(b) for b in params.biases]
    return network_forward(params.spec, weights, biases, Tensor(x)).data


def generator_forward(params: ModelParams, z: Array) -> Array:
    """Pure forward for a generator batch (batch, latent_dim)."""
    return _plain_forward(params, np.asarray(z, dtype=np.float64))


def discriminator_forward(params: ModelParams, x: Array) -> Array:
    """Pure forward to pre-activation logits of shape (batch, output_dim)."""
    return _plain_forward(params, np.asarray(x, dtype=np.float64))


class TrackedNet:
    """Per-step graph view of a network: parameter leaves plus forward().

    Each raw weight/bias becomes a tracked leaf; when SN is enabled the
    effective weight is the leaf scaled by 1/sigma (sigma constant), so
    gradients land on the raw weights.
    """

    def __init__(self, graph: Graph, params: ModelParams):
        self.spec = params.spec
        self.leaves: Dict[str, Tensor] = {}
        self._weights: List[Tensor] = []
        self._biases: List[Tensor] = []
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            wl = graph.leaf(w)
            bl = graph.leaf(b)
            self.leaves[f"w{i}"] = wl
            self.leaves[f"b{i}"] = bl
            if params.spec.spectral_norm:
                wl = ad.scale(wl, 1.0 / params.sn_sigma[i])
            self._weights.append(wl)
            self._biases.append(bl)

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return network_forward(self.spec, self._weights, self._biases, x)

    def leaf_ids(self) -> Dict[str, int]:
        return {name: t.node_id for name, t in self.leaves.items()}


def constant_net(params: ModelParams):
    """Forward closure with parameters held constant (no leaves recorded)."""
    weights = [Tensor(w) for w in effective_weights(params)]
    biases = [Tensor(b) for b in params.biases]
    spec = params.spec

    def forward(x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return network_forward(spec, weights, biases, x)

    return forward
