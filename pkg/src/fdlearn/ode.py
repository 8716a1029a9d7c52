"""Fixed-step RK4 trajectory integration and its exact reverse-mode gradient.

A vehicle trajectory is reconstructed by integrating dx/dt = u(x, rho_c(t))
where rho_c is the density observed along the reference vehicle's path,
given on the same uniform time grid as the reference positions.  The solver
is classical RK4 with one step per data interval; the half-step density is
the average of the bracketing samples, which is exact linear interpolation
on the sample grid.

Gradients are discretize-then-optimize: the backward pass replays the
unrolled RK4 stages in reverse, including the state-feedback path when the
model's speed law reads the position (the two-input neural variant).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .errors import ContractError, ModelShapeError, NumericalFailure, RangeError
from .fd_models import FdModel, speed_backward_batch, speed_forward_batch

if TYPE_CHECKING:
    from .traffic_sim import Trajectory

# Slack, in fractions of one step, when clamping queries to the grid edge.
_EDGE_TOL = 1e-8


@dataclass(frozen=True)
class ControlSeries:
    """Uniformly sampled control signal (density along a reference path)."""

    t0: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).copy()
        if values.ndim != 1 or values.size < 2:
            raise ModelShapeError(
                f"control series needs at least 2 samples, got shape {values.shape}"
            )
        if not self.dt > 0:
            raise ModelShapeError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ModelShapeError("control values must be finite and non-negative")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    @property
    def t_end(self) -> float:
        return self.t0 + (self.values.size - 1) * self.dt


@dataclass(frozen=True)
class SimTrajectory:
    """Positions produced by integrate_trajectory, on the control grid."""

    t0: float
    dt: float
    positions: np.ndarray


def control_at(series: ControlSeries, t: float) -> float:
    """Linear interpolation; queries just past the ends clamp, others raise."""
    pos = (t - series.t0) / series.dt
    last = series.values.size - 1
    if pos < -_EDGE_TOL or pos > last + _EDGE_TOL:
        raise RangeError(
            f"t={t} outside control span [{series.t0}, {series.t_end}]"
        )
    pos = min(max(pos, 0.0), float(last))
    k = min(int(pos), last - 1)
    frac = pos - k
    return float((1.0 - frac) * series.values[k] + frac * series.values[k + 1])


def rk4_path(
    f: Callable[[float, float], float],
    x0: float,
    t0: float,
    dt: float,
    n_steps: int,
) -> np.ndarray:
    """Classical RK4 on dx/dt = f(x, t); returns the n_steps+1 states."""
    out = np.empty(n_steps + 1)
    out[0] = x = float(x0)
    for k in range(n_steps):
        t = t0 + k * dt
        k1 = f(x, t)
        k2 = f(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = f(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = f(x + dt * k3, t + dt)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = x
    return out


@dataclass(frozen=True)
class TrajectoryBatch:
    """Padded, mask-aware bundle of reference trajectories and controls.

    Rows whose trajectory is shorter than the padded width keep integrating
    on a repeated final density; the mask keeps those samples out of every
    loss and gradient, so the result is identical to per-trajectory work.
    """

    dt: float
    x0: np.ndarray        # (B,)
    controls: np.ndarray  # (B, T) density, padded with the last sample
    refs: np.ndarray      # (B, T) reference positions, padding unused
    lengths: np.ndarray   # (B,) valid sample counts

    @property
    def size(self) -> int:
        return self.x0.size

    @property
    def width(self) -> int:
        return self.controls.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.width)[None, :] < self.lengths[:, None]


def _check_grids(reference: "Trajectory", control: ControlSeries) -> None:
    if abs(reference.t0 - control.t0) > 1e-9 or abs(reference.dt - control.dt) > 1e-12:
        raise ContractError(
            f"reference grid (t0={reference.t0}, dt={reference.dt}) does not "
            f"match control grid (t0={control.t0}, dt={control.dt})"
        )
    if reference.positions.size != control.values.size:
        raise ContractError(
            f"reference has {reference.positions.size} samples, control has "
            f"{control.values.size}"
        )


def make_batch(pairs: Sequence[tuple["Trajectory", ControlSeries]]) -> TrajectoryBatch:
    """Bundle (reference, control) pairs; grids must agree pairwise."""
    if not pairs:
        raise ModelShapeError("cannot build an empty trajectory batch")
    dts = {control.dt for _, control in pairs}
    if len(dts) > 1:
        raise ContractError(f"mixed sampling intervals in one batch: {sorted(dts)}")
    for reference, control in pairs:
        _check_grids(reference, control)
    dt = pairs[0][1].dt
    lengths = np.array([len(c.values) for _, c in pairs])
    width = int(lengths.max())
    b = len(pairs)
    controls = np.empty((b, width))
    refs = np.zeros((b, width))
    x0 = np.empty(b)
    for i, (reference, control) in enumerate(pairs):
        n = control.values.size
        controls[i, :n] = control.values
        controls[i, n:] = control.values[-1]
        refs[i, :n] = reference.positions
        refs[i, n:] = reference.positions[-1]
        x0[i] = reference.positions[0]
    return TrajectoryBatch(dt=dt, x0=x0, controls=controls, refs=refs, lengths=lengths)


def _state_dependent(model: FdModel) -> bool:
    """Whether the speed law reads the position state (breaks stage fusion)."""
    return model.variant == "nn2"


def _fast_stage_speeds(
    model: FdModel, batch: TrajectoryBatch
) -> tuple[np.ndarray, np.ndarray, tuple, tuple]:
    """Speeds at all grid nodes and midpoints in two batched evaluations.

    Valid only for position-independent speed laws, where the RK4 stages
    k2 and k3 coincide and every stage value is a pure function of the
    control sample, so the whole unroll needs one pass over the nodes and
    one over the midpoints.  The returned contexts let the backward pass
    reuse both evaluations instead of repeating them.
    """
    b, width = batch.controls.shape
    nodes = batch.controls.reshape(-1)
    mids = (0.5 * (batch.controls[:, :-1] + batch.controls[:, 1:])).reshape(-1)
    u_nodes, ctx_nodes = speed_forward_batch(model, np.zeros(nodes.size), nodes)
    u_mids, ctx_mids = speed_forward_batch(model, np.zeros(mids.size), mids)
    return u_nodes.reshape(b, width), u_mids.reshape(b, width - 1), ctx_nodes, ctx_mids


def _accumulate_fast(
    batch: TrajectoryBatch, u_nodes: np.ndarray, u_mids: np.ndarray
) -> np.ndarray:
    h = batch.dt
    increments = (h / 6.0) * (u_nodes[:, :-1] + 4.0 * u_mids + u_nodes[:, 1:])
    if not np.all(np.isfinite(increments)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(increments), axis=0))[0])
        raise NumericalFailure(
            f"non-finite state at integration step {bad}", step_index=bad
        )
    states = np.empty_like(batch.controls)
    states[:, 0] = batch.x0
    np.cumsum(increments, axis=1, out=states[:, 1:])
    states[:, 1:] += batch.x0[:, None]
    return states


def _forward_fast(model: FdModel, batch: TrajectoryBatch) -> np.ndarray:
    u_nodes, u_mids, _, _ = _fast_stage_speeds(model, batch)
    return _accumulate_fast(batch, u_nodes, u_mids)


def _backprop_fast(
    model: FdModel, batch: TrajectoryBatch, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    h = batch.dt
    u_nodes, u_mids, ctx_nodes, ctx_mids = _fast_stage_speeds(model, batch)
    states = _accumulate_fast(batch, u_nodes, u_mids)

    resid = np.where(batch.mask, states - batch.refs, 0.0)
    loss = float(np.sum(weights[:, None] * resid**2))
    local = 2.0 * weights[:, None] * resid

    # Adjoint of increment k is the summed residual signal at samples > k.
    suffix = np.cumsum(local[:, ::-1], axis=1)[:, ::-1]
    lam = suffix[:, 1:]  # (B, T-1), one entry per step
    w_mids = (4.0 * h / 6.0) * lam
    w_nodes = np.zeros_like(batch.controls)
    w_nodes[:, :-1] += (h / 6.0) * lam
    w_nodes[:, 1:] += (h / 6.0) * lam

    g_nodes, _ = speed_backward_batch(model, ctx_nodes, w_nodes.reshape(-1))
    g_mids, _ = speed_backward_batch(model, ctx_mids, w_mids.reshape(-1))
    return loss, g_nodes + g_mids


def _forward_batch(
    model: FdModel, batch: TrajectoryBatch, keep_stages: bool
) -> tuple[np.ndarray, list[tuple[tuple, tuple, tuple, tuple]]]:
    h = batch.dt
    b, width = batch.controls.shape
    states = np.empty((b, width))
    states[:, 0] = batch.x0
    stages = []
    for k in range(width - 1):
        x = states[:, k]
        rho0 = batch.controls[:, k]
        rho1 = batch.controls[:, k + 1]
        rhoh = 0.5 * (rho0 + rho1)
        k1, c1 = speed_forward_batch(model, x, rho0)
        u2 = x + 0.5 * h * k1
        k2, c2 = speed_forward_batch(model, u2, rhoh)
        u3 = x + 0.5 * h * k2
        k3, c3 = speed_forward_batch(model, u3, rhoh)
        u4 = x + h * k3
        k4, c4 = speed_forward_batch(model, u4, rho1)
        nxt = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(nxt)):
            raise NumericalFailure(
                f"non-finite state at integration step {k}", step_index=k
            )
        states[:, k + 1] = nxt
        if keep_stages:
            stages.append((c1, c2, c3, c4))
    return states, stages


def integrate_batch(model: FdModel, batch: TrajectoryBatch) -> np.ndarray:
    """Positions for every row of the batch, shape (B, T)."""
    if not _state_dependent(model):
        return _forward_fast(model, batch)
    states, _ = _forward_batch(model, batch, keep_stages=False)
    return states


def backprop_batch(
    model: FdModel, batch: TrajectoryBatch, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Weighted squared-error loss and its exact parameter gradient.

    loss = sum_i weights[i] * sum_k (x_hat[i,k] - ref[i,k])^2 over valid
    samples.  The reverse sweep replays each RK4 stage, accumulating both the
    parameter gradient and the state adjoint (the latter carries the
    feedback path for position-dependent speed laws).
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (batch.size,):
        raise ModelShapeError(
            f"weights must have shape ({batch.size},), got {weights.shape}"
        )
    if not _state_dependent(model):
        return _backprop_fast(model, batch, weights)
    h = batch.dt
    states, stages = _forward_batch(model, batch, keep_stages=True)
    mask = batch.mask
    resid = np.where(mask, states - batch.refs, 0.0)
    loss = float(np.sum(weights[:, None] * resid**2))
    local = 2.0 * weights[:, None] * resid

    grad = np.zeros(model.n_params)
    lam = local[:, batch.width - 1].copy()
    for k in range(batch.width - 2, -1, -1):
        c1, c2, c3, c4 = stages[k]

        dk1 = lam * (h / 6.0)
        dk2 = lam * (h / 3.0)
        dk3 = lam * (h / 3.0)
        dk4 = lam * (h / 6.0)
        da = lam.copy()

        gt4, gx4 = speed_backward_batch(model, c4, dk4)
        da += gx4
        dk3 = dk3 + h * gx4
        gt3, gx3 = speed_backward_batch(model, c3, dk3)
        da += gx3
        dk2 = dk2 + 0.5 * h * gx3
        gt2, gx2 = speed_backward_batch(model, c2, dk2)
        da += gx2
        dk1 = dk1 + 0.5 * h * gx2
        gt1, gx1 = speed_backward_batch(model, c1, dk1)
        da += gx1

        grad += gt1 + gt2 + gt3 + gt4
        lam = da + local[:, k]
    return loss, grad


def integrate_trajectory(
    model: FdModel, x0: float, control: ControlSeries
) -> SimTrajectory:
    """Reconstruct one trajectory from its initial position and density input."""
    batch = TrajectoryBatch(
        dt=control.dt,
        x0=np.array([float(x0)]),
        controls=control.values[None, :],
        refs=np.zeros((1, control.values.size)),
        lengths=np.array([control.values.size]),
    )
    positions = integrate_batch(model, batch)[0]
    return SimTrajectory(t0=control.t0, dt=control.dt, positions=positions)


def backprop_trajectory(
    model: FdModel, control: ControlSeries, reference: "Trajectory"
) -> tuple[float, np.ndarray]:
    """Squared position error against one reference and its exact gradient."""
    _check_grids(reference, control)
    batch = TrajectoryBatch(
        dt=control.dt,
        x0=np.array([float(reference.positions[0])]),
        controls=control.values[None, :],
        refs=np.asarray(reference.positions, dtype=float)[None, :],
        lengths=np.array([control.values.size]),
    )
    return backprop_batch(model, batch, np.array([1.0]))
