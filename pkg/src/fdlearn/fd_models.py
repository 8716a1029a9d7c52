"""Fundamental-diagram model families.

Four variants share one container type:

* ``greenshields-ls``    linear speed-density law, fitted by least squares
* ``greenshields-traj``  same law, trained by trajectory reconstruction
* ``nn1``                speed = u0 * MLP(rho / rho_j_ref)
* ``nn2``                speed = u0 * MLP(rho / rho_j_ref, x / x_ref)

The neural families keep their free-flow scale positive through a softplus
reparameterization (the trainable coordinate is ``u0_raw``).  The trainable
Greenshields encoding is softplus-reparameterized the same way: gradient
steps sized for a unit-scale optimizer would otherwise drive the jam density
(order 0.05 veh/ft) negative and silence the gradient for good.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ModelShapeError
from .neural_net import (
    MlpSpec,
    mlp_backward_batch,
    mlp_forward_batch,
    sigmoid,
    softplus,
    softplus_inv,
)

# Normalizing jam density for the neural families, veh/ft.
DEFAULT_RHO_J_REF = 0.05

VARIANTS = ("greenshields-ls", "greenshields-traj", "nn1", "nn2")


@dataclass(frozen=True)
class GreenshieldsParams:
    """Free-flow speed u0 (ft/s) and jam density rho_j (veh/ft)."""

    u0: float
    rho_j: float

    def __post_init__(self):
        if not (self.u0 > 0 and np.isfinite(self.u0)):
            raise ModelShapeError(f"u0 must be positive and finite, got {self.u0}")
        if not (self.rho_j > 0 and np.isfinite(self.rho_j)):
            raise ModelShapeError(
                f"rho_j must be positive and finite, got {self.rho_j}"
            )


@dataclass(frozen=True)
class NeuralFdParams:
    """MLP weights plus the scaling constants that frame its inputs/output.

    ``x_ref`` is the position normalization and is only consulted by the
    two-input variant; it stays None for the density-only network.
    """

    spec: MlpSpec
    weights: np.ndarray
    u0_raw: float
    rho_j_ref: float = DEFAULT_RHO_J_REF
    x_ref: float | None = None

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        if weights.ndim != 1 or weights.size != self.spec.n_weights:
            raise ModelShapeError(
                f"expected {self.spec.n_weights} weights, got shape {weights.shape}"
            )
        weights = weights.copy()
        weights.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        if not (self.rho_j_ref > 0):
            raise ModelShapeError(f"rho_j_ref must be positive, got {self.rho_j_ref}")
        if self.x_ref is not None and not (self.x_ref > 0):
            raise ModelShapeError(f"x_ref must be positive, got {self.x_ref}")

    @property
    def u0(self) -> float:
        return softplus(self.u0_raw)


@dataclass(frozen=True)
class FdModel:
    """Tagged union of a variant name and its parameter payload."""

    variant: str
    params: GreenshieldsParams | NeuralFdParams

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelShapeError(f"unknown variant {self.variant!r}")
        if self.variant.startswith("greenshields"):
            if not isinstance(self.params, GreenshieldsParams):
                raise ModelShapeError(f"{self.variant} needs GreenshieldsParams")
        else:
            if not isinstance(self.params, NeuralFdParams):
                raise ModelShapeError(f"{self.variant} needs NeuralFdParams")
            arity = 1 if self.variant == "nn1" else 2
            if self.params.spec.n_inputs != arity:
                raise ModelShapeError(
                    f"{self.variant} needs a {arity}-input network, got "
                    f"{self.params.spec.n_inputs}"
                )
            if self.variant == "nn2" and self.params.x_ref is None:
                raise ModelShapeError("nn2 requires x_ref")

    @property
    def u0(self) -> float:
        return self.params.u0

    @property
    def n_params(self) -> int:
        if isinstance(self.params, GreenshieldsParams):
            return 2
        return 1 + self.params.spec.n_weights


def _as_array(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    return np.atleast_1d(arr), arr.ndim == 0


def _maybe_scalar(values: np.ndarray, scalar: bool):
    return float(values[0]) if scalar else values


def eval_greenshields(p: GreenshieldsParams, rho):
    """u0 * (1 - rho/rho_j) below jam density, exactly 0 at and above it."""
    rho_arr, scalar = _as_array(rho)
    if np.any(rho_arr < 0):
        raise ModelShapeError("density must be non-negative")
    speed = np.where(rho_arr < p.rho_j, p.u0 * (1.0 - rho_arr / p.rho_j), 0.0)
    return _maybe_scalar(speed, scalar)


def eval_nn1(p: NeuralFdParams, rho):
    """Density-only neural speed, u0 * MLP(rho / rho_j_ref), in (0, u0)."""
    if p.spec.n_inputs != 1:
        raise ModelShapeError(f"eval_nn1 needs a 1-input network, got {p.spec.n_inputs}")
    rho_arr, scalar = _as_array(rho)
    out, _ = mlp_forward_batch(p.spec, p.weights, (rho_arr / p.rho_j_ref)[:, None])
    return _maybe_scalar(p.u0 * out, scalar)


def eval_nn2(p: NeuralFdParams, rho, x):
    """Density-and-position neural speed, u0 * MLP(rho/rho_j_ref, x/x_ref)."""
    if p.spec.n_inputs != 2:
        raise ModelShapeError(f"eval_nn2 needs a 2-input network, got {p.spec.n_inputs}")
    if p.x_ref is None:
        raise ModelShapeError("eval_nn2 requires x_ref on the parameters")
    rho_arr, scalar_r = _as_array(rho)
    x_arr, scalar_x = _as_array(x)
    rho_arr, x_arr = np.broadcast_arrays(rho_arr, x_arr)
    inputs = np.stack([rho_arr / p.rho_j_ref, x_arr / p.x_ref], axis=1)
    out, _ = mlp_forward_batch(p.spec, p.weights, inputs)
    return _maybe_scalar(p.u0 * out, scalar_r and scalar_x)


def eval_speed(m: FdModel, rho, x=None):
    """Variant dispatch for the speed law; x is consulted only by nn2."""
    if m.variant == "nn1":
        return eval_nn1(m.params, rho)
    if m.variant == "nn2":
        if x is None:
            raise ModelShapeError("nn2 requires a position input")
        return eval_nn2(m.params, rho, x)
    return eval_greenshields(m.params, rho)


def eval_flux(m: FdModel, rho, x=None):
    """Flux rho * u(rho[, x]) in veh/s."""
    speed = eval_speed(m, rho, x)
    if isinstance(speed, float):
        return float(rho) * speed
    rho_arr = np.asarray(rho, dtype=float)
    return np.broadcast_to(rho_arr, np.shape(speed)) * speed


def param_vector(m: FdModel) -> np.ndarray:
    """Flat trainable coordinates for the variant."""
    if isinstance(m.params, GreenshieldsParams):
        return np.array(
            [softplus_inv(m.params.u0), softplus_inv(m.params.rho_j)]
        )
    return np.concatenate([[m.params.u0_raw], m.params.weights])


def with_param_vector(m: FdModel, theta: np.ndarray) -> FdModel:
    """Rebuild the model from a flat trainable vector (inverse of param_vector)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (m.n_params,):
        raise ModelShapeError(
            f"expected parameter vector of shape ({m.n_params},), got {theta.shape}"
        )
    if isinstance(m.params, GreenshieldsParams):
        params = GreenshieldsParams(u0=softplus(theta[0]), rho_j=softplus(theta[1]))
    else:
        params = replace(m.params, u0_raw=float(theta[0]), weights=theta[1:])
    return FdModel(variant=m.variant, params=params)


def speed_batch(m: FdModel, x: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Vectorized speed for the ODE right-hand side; x ignored unless nn2."""
    if m.variant == "nn2":
        return np.asarray(eval_nn2(m.params, rho, x))
    if m.variant == "nn1":
        return np.asarray(eval_nn1(m.params, rho))
    return np.asarray(eval_greenshields(m.params, rho))


def speed_forward_batch(
    m: FdModel, x: np.ndarray, rho: np.ndarray
) -> tuple[np.ndarray, tuple]:
    """Speed plus a context for a later backward pass over the same points."""
    x = np.asarray(x, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if isinstance(m.params, GreenshieldsParams):
        u = np.asarray(eval_greenshields(m.params, rho))
        return u, ("greenshields", rho, x.shape)
    p = m.params
    if m.variant == "nn1":
        inputs = (rho / p.rho_j_ref)[:, None]
    else:
        inputs = np.stack([rho / p.rho_j_ref, x / p.x_ref], axis=1)
    out, tape = mlp_forward_batch(p.spec, p.weights, inputs)
    return p.u0 * out, ("neural", out, tape, x.shape)


def speed_backward_batch(
    m: FdModel, ctx: tuple, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """VJP using a context from speed_forward_batch on the same model."""
    upstream = np.asarray(upstream, dtype=float)
    if ctx[0] == "greenshields":
        _, rho, x_shape = ctx
        theta = param_vector(m)
        u0, rho_j = m.params.u0, m.params.rho_j
        live = rho < rho_j
        d_u0 = np.where(live, 1.0 - rho / rho_j, 0.0) * float(sigmoid(theta[0]))
        d_rj = np.where(live, u0 * rho / rho_j**2, 0.0) * float(sigmoid(theta[1]))
        grad_theta = np.array([np.dot(upstream, d_u0), np.dot(upstream, d_rj)])
        return grad_theta, np.zeros(x_shape)
    _, out, tape, x_shape = ctx
    p = m.params
    grad_w, grad_in = mlp_backward_batch(
        p.spec, p.weights, tape, upstream * p.u0
    )
    d_u0_raw = np.dot(upstream, out) * float(sigmoid(p.u0_raw))
    grad_theta = np.concatenate([[d_u0_raw], grad_w])
    if m.variant == "nn2":
        grad_x = grad_in[:, 1] / p.x_ref
    else:
        grad_x = np.zeros(x_shape)
    return grad_theta, grad_x


def speed_vjp_batch(
    m: FdModel, x: np.ndarray, rho: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of the speed law.

    Returns (grad_theta, grad_x): the trainable-parameter gradient summed over
    the batch with ``upstream`` applied, and the per-element gradient wrt the
    position input (zero unless the variant reads position).
    """
    _, ctx = speed_forward_batch(m, x, rho)
    return speed_backward_batch(m, ctx, upstream)


def make_greenshields(u0: float, rho_j: float, trainable: bool = True) -> FdModel:
    variant = "greenshields-traj" if trainable else "greenshields-ls"
    return FdModel(variant=variant, params=GreenshieldsParams(u0=u0, rho_j=rho_j))


def make_neural(
    variant: str,
    weights: np.ndarray,
    u0: float,
    hidden: tuple[int, ...] = (10, 10),
    rho_j_ref: float = DEFAULT_RHO_J_REF,
    x_ref: float | None = None,
) -> FdModel:
    """Build an nn1/nn2 model from an effective (post-softplus) u0."""
    if variant not in ("nn1", "nn2"):
        raise ModelShapeError(f"make_neural handles nn1/nn2, got {variant!r}")
    arity = 1 if variant == "nn1" else 2
    spec = MlpSpec((arity, *hidden, 1))
    params = NeuralFdParams(
        spec=spec,
        weights=weights,
        u0_raw=softplus_inv(u0),
        rho_j_ref=rho_j_ref,
        x_ref=x_ref,
    )
    return FdModel(variant=variant, params=params)
