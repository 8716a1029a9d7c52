"""Minimal dense MLP with hand-written reverse-mode differentiation.

Every layer, including the output layer, applies a sigmoid after its affine
map, so the network output always lies in the open interval (0, 1).  Weights
live in a single flat vector, laid out layer-major with each layer's weight
matrix (row-major) followed by its bias vector.  That layout is part of the
checkpoint format and must not change.

Forward passes record a tape of per-layer pre- and post-activations; the
backward pass replays the tape to produce exact gradients with respect to
both the weights and the network input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ModelShapeError


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function in the sign-split stable form.

    exp is only ever taken of -|x|, so neither branch can overflow; the two
    algebraic forms 1/(1+e^-x) and e^x/(1+e^x) are selected per element.
    """
    x = np.asarray(x, dtype=float)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(x: float) -> float:
    """log(1 + e^x), stable for large |x|."""
    return float(np.logaddexp(0.0, x))


def softplus_inv(y: float) -> float:
    """Inverse of softplus; y must be positive."""
    if y <= 0:
        raise ValueError(f"softplus_inv requires y > 0, got {y}")
    # x = y + log(1 - e^-y), stable for large y.
    return y + float(np.log(-np.expm1(-y)))


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes from input to output, e.g. (1, 10, 10, 1)."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ModelShapeError(
                f"need at least input, one hidden, and output layer, got {sizes}"
            )
        if any(n < 1 for n in sizes):
            raise ModelShapeError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] != 1:
            raise ModelShapeError(f"output layer must have size 1, got {sizes}")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_weights(self) -> int:
        return sum(
            m * n + m
            for n, m in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )


def layer_slices(spec: MlpSpec) -> list[tuple[slice, slice, int, int]]:
    """(w_slice, b_slice, fan_in, fan_out) per layer in the flat vector."""
    out = []
    offset = 0
    for n, m in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        w = slice(offset, offset + m * n)
        b = slice(offset + m * n, offset + m * n + m)
        out.append((w, b, n, m))
        offset = b.stop
    return out


def init_weights(spec: MlpSpec, seed: int) -> np.ndarray:
    """Xavier-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    weights = np.zeros(spec.n_weights)
    for w, _b, n, m in layer_slices(spec):
        bound = np.sqrt(6.0 / (n + m))
        weights[w] = rng.uniform(-bound, bound, size=m * n)
    return weights


@dataclass
class Tape:
    """Activations recorded by a forward pass, consumed by the backward pass."""

    spec: MlpSpec
    weights: np.ndarray
    inputs: np.ndarray                      # (batch, n_inputs)
    pre: list[np.ndarray] = field(default_factory=list)   # per layer (batch, m)
    post: list[np.ndarray] = field(default_factory=list)  # per layer (batch, m)


def _check_weights(spec: MlpSpec, weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or weights.size != spec.n_weights:
        raise ModelShapeError(
            f"expected flat weight vector of length {spec.n_weights}, "
            f"got shape {weights.shape}"
        )
    return weights


def mlp_forward_batch(
    spec: MlpSpec, weights: np.ndarray, inputs: np.ndarray
) -> tuple[np.ndarray, Tape]:
    """Evaluate the network on a (batch, n_inputs) matrix.

    Returns the (batch,) output vector and the tape for mlp_backward_batch.
    """
    weights = _check_weights(spec, weights)
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != spec.n_inputs:
        raise ModelShapeError(
            f"expected inputs of shape (batch, {spec.n_inputs}), got {inputs.shape}"
        )
    tape = Tape(spec=spec, weights=weights, inputs=inputs)
    act = inputs
    for w, b, n, m in layer_slices(spec):
        wmat = weights[w].reshape(m, n)
        pre = act @ wmat.T + weights[b]
        act = sigmoid(pre)
        tape.pre.append(pre)
        tape.post.append(act)
    return act[:, 0], tape


def mlp_backward_batch(
    spec: MlpSpec, weights: np.ndarray, tape: Tape, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode sweep over a recorded forward pass.

    ``upstream`` holds d(loss)/d(output) per batch element.  Returns the
    weight gradient summed over the batch (flat, same layout as ``weights``)
    and the per-element input gradient of shape (batch, n_inputs).
    """
    weights = _check_weights(spec, weights)
    if tape.spec != spec or not np.array_equal(tape.weights, weights):
        raise ContractError("tape does not match the given spec/weights")
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (tape.inputs.shape[0],):
        raise ModelShapeError(
            f"upstream must have shape ({tape.inputs.shape[0]},), got {upstream.shape}"
        )

    slices = layer_slices(spec)
    grad_w = np.zeros_like(weights)
    # d(loss)/d(pre-activation) of the output layer; sigma'(z) = a (1 - a).
    out = tape.post[-1]
    delta = upstream[:, None] * out * (1.0 - out)
    for i in range(len(slices) - 1, -1, -1):
        w, b, n, m = slices[i]
        prev_act = tape.post[i - 1] if i > 0 else tape.inputs
        grad_w[w] = (delta.T @ prev_act).ravel()
        grad_w[b] = delta.sum(axis=0)
        wmat = weights[w].reshape(m, n)
        back = delta @ wmat
        if i > 0:
            delta = back * tape.post[i - 1] * (1.0 - tape.post[i - 1])
        else:
            grad_inputs = back
    return grad_w, grad_inputs


def mlp_forward(
    spec: MlpSpec, weights: np.ndarray, inputs: np.ndarray
) -> tuple[float, Tape]:
    """Single-sample forward pass; returns a scalar in (0, 1) and the tape."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 1:
        raise ModelShapeError(f"expected a 1-d input vector, got shape {inputs.shape}")
    out, tape = mlp_forward_batch(spec, weights, inputs[None, :])
    return float(out[0]), tape


def mlp_backward(
    spec: MlpSpec, weights: np.ndarray, tape: Tape, upstream: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Single-sample gradients wrt weights and the input vector."""
    if tape.inputs.shape[0] != 1:
        raise ContractError("tape was recorded for a batch, not a single sample")
    grad_w, grad_in = mlp_backward_batch(
        spec, weights, tape, np.array([float(upstream)])
    )
    return grad_w, grad_in[0]
