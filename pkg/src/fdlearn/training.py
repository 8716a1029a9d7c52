"""Trajectory-reconstruction training loop and the least-squares baseline.

The objective averages per-trajectory squared position error, each
trajectory weighted by dt over its duration so short and long vehicles
count alike:

    L = (1/N) * sum_i (dt / t_i) * sum_k (x_ik - x_hat_ik)^2

with t_i = (n_i - 1) * dt.  Optimization is full-batch Adam; every epoch
evaluates the held-out split and the reported weights are the ones with the
lowest test loss.  Training stops once the relative change in training loss
stays below convergence_eps for `patience` consecutive epochs, or at
max_epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ContractError,
    DataError,
    DegenerateFitError,
    ModelShapeError,
    NumericalFailure,
)
from .fd_models import FdModel, param_vector, with_param_vector
from .ode import (
    ControlSeries,
    SimTrajectory,
    TrajectoryBatch,
    backprop_batch,
    integrate_batch,
    make_batch,
)
from .fd_models import GreenshieldsParams
from .traffic_sim import Trajectory

Pair = tuple[Trajectory, ControlSeries]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    max_epochs: int = 4000
    convergence_eps: float = 1e-5
    patience: int = 10
    weighting: str = "per-trajectory"   # or "per-point"
    residual: str = "sum"               # or "mean"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.weighting not in ("per-trajectory", "per-point"):
            raise ModelShapeError(f"unknown weighting {self.weighting!r}")
        if self.residual not in ("sum", "mean"):
            raise ModelShapeError(f"unknown residual reduction {self.residual!r}")
        if self.learning_rate <= 0 or self.max_epochs < 1 or self.patience < 1:
            raise ModelShapeError("learning_rate, max_epochs, patience must be positive")


@dataclass(frozen=True)
class Dataset:
    """Train/test splits of (reference trajectory, co-located density) pairs."""

    train: tuple[Pair, ...]
    test: tuple[Pair, ...]
    delta_t: float

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        if not self.train:
            raise DataError("dataset needs at least one training trajectory")
        for traj, control in (*self.train, *self.test):
            if abs(traj.dt - self.delta_t) > 1e-12:
                raise ContractError(
                    f"trajectory dt {traj.dt} does not match dataset delta_t "
                    f"{self.delta_t}"
                )
            if traj.positions.size != control.values.size or abs(
                traj.t0 - control.t0
            ) > 1e-9:
                raise ContractError(
                    f"vehicle {traj.vehicle_id}: control grid does not match "
                    f"its trajectory"
                )
        train_ids = {t.vehicle_id for t, _ in self.train}
        test_ids = {t.vehicle_id for t, _ in self.test}
        overlap = train_ids & test_ids
        if overlap:
            raise DataError(f"train/test share vehicle ids: {sorted(overlap)[:5]}")


def decompose_steps(data: Dataset, include_original: bool = False) -> Dataset:
    """Split every pair into 1-step sub-trajectories (debiasing transform)."""

    def split(pairs: tuple[Pair, ...]) -> list[Pair]:
        out = []
        for traj, control in pairs:
            if include_original:
                out.append((traj, control))
            for k in range(len(traj) - 1):
                sub = Trajectory(
                    vehicle_id=f"{traj.vehicle_id}.{k}",
                    t0=traj.t0 + k * traj.dt,
                    dt=traj.dt,
                    positions=traj.positions[k : k + 2],
                    speeds=traj.speeds[k : k + 2],
                )
                ctrl = ControlSeries(
                    t0=sub.t0, dt=control.dt, values=control.values[k : k + 2]
                )
                out.append((sub, ctrl))
        return out

    return Dataset(
        train=tuple(split(data.train)),
        test=tuple(split(data.test)),
        delta_t=data.delta_t,
    )


def pair_weights(
    references: list[Trajectory],
    delta_t: float,
    weighting: str = "per-trajectory",
    residual: str = "sum",
) -> np.ndarray:
    """Scalar multiplier for each trajectory's squared-error sum."""
    lengths = np.array([len(r) for r in references], dtype=float)
    if weighting == "per-point":
        return np.full(lengths.size, 1.0 / lengths.sum())
    n = lengths.size
    w = 1.0 / (n * (lengths - 1.0))
    if residual == "mean":
        w = w / lengths
    return w


def loss(
    pairs: list[tuple[Trajectory, SimTrajectory]],
    delta_t: float,
    weighting: str = "per-trajectory",
    residual: str = "sum",
) -> float:
    """Duration-weighted squared position error between references and fits."""
    if not pairs:
        raise DataError("loss needs at least one trajectory pair")
    refs = []
    for reference, predicted in pairs:
        if (
            abs(reference.t0 - predicted.t0) > 1e-9
            or abs(reference.dt - predicted.dt) > 1e-12
            or reference.positions.size != predicted.positions.size
        ):
            raise ContractError(
                f"vehicle {reference.vehicle_id}: predicted grid does not match "
                f"reference"
            )
        if abs(reference.dt - delta_t) > 1e-12:
            raise ContractError(
                f"vehicle {reference.vehicle_id}: dt {reference.dt} != {delta_t}"
            )
        refs.append(reference)
    w = pair_weights(refs, delta_t, weighting, residual)
    total = 0.0
    for (reference, predicted), wi in zip(pairs, w):
        err = reference.positions - predicted.positions
        total += wi * float(np.dot(err, err))
    return total


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(step=0, m=np.zeros(n), v=np.zeros(n))


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState, cfg: TrainConfig
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update."""
    grads = np.asarray(grads, dtype=float)
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise NumericalFailure(
            f"non-finite gradient (first at parameter index {bad})"
        )
    t = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads**2
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new_params = params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new_params, AdamState(step=t, m=m, v=v)


@dataclass
class FitReport:
    variant: str
    status: str
    n_train: int
    n_test: int
    epochs: list[dict]
    best_epoch: int
    best_test_loss: float | None
    final_train_loss: float
    model: FdModel

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "status": self.status,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "best_epoch": self.best_epoch,
            "best_test_loss": self.best_test_loss,
            "final_train_loss": self.final_train_loss,
            "epochs": self.epochs,
        }


def eval_batch_loss(
    model: FdModel, batch: TrajectoryBatch, weights: np.ndarray
) -> float:
    """Forward-only weighted loss on a prepared batch."""
    states = integrate_batch(model, batch)
    resid = np.where(batch.mask, states - batch.refs, 0.0)
    return float(np.sum(weights[:, None] * resid**2))


def train(model: FdModel, data: Dataset, cfg: TrainConfig) -> FitReport:
    """Full-batch Adam on the trajectory loss with best-test selection.

    Each epoch evaluates the current weights on both splits before stepping,
    so epoch 0 records the initialization.  With no test split, selection
    falls back to the lowest training loss.
    """
    train_batch = make_batch(data.train)
    w_train = pair_weights(
        [t for t, _ in data.train], data.delta_t, cfg.weighting, cfg.residual
    )
    test_batch = None
    w_test = None
    if data.test:
        test_batch = make_batch(data.test)
        w_test = pair_weights(
            [t for t, _ in data.test], data.delta_t, cfg.weighting, cfg.residual
        )

    theta = param_vector(model)
    adam = AdamState.zeros(theta.size)
    history: list[dict] = []
    best_theta = theta.copy()
    best_epoch = 0
    best_score = np.inf
    status = "max_epochs"
    prev_loss = None
    calm_epochs = 0
    train_loss = np.nan

    for epoch in range(cfg.max_epochs + 1):
        current = with_param_vector(model, theta)
        try:
            train_loss, grad = backprop_batch(current, train_batch, w_train)
            test_loss = (
                eval_batch_loss(current, test_batch, w_test)
                if test_batch is not None
                else None
            )
        except NumericalFailure as exc:
            status = f"aborted: {exc}"
            break
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "test_loss": test_loss}
        )
        score = test_loss if test_loss is not None else train_loss
        if score < best_score:
            best_score = score
            best_theta = theta.copy()
            best_epoch = epoch
        if prev_loss is not None:
            rel = abs(train_loss - prev_loss) / max(abs(prev_loss), 1e-300)
            calm_epochs = calm_epochs + 1 if rel < cfg.convergence_eps else 0
            if calm_epochs >= cfg.patience:
                status = "converged"
                break
        prev_loss = train_loss
        if epoch == cfg.max_epochs:
            break
        try:
            theta, adam = adam_step(theta, grad, adam, cfg)
        except NumericalFailure as exc:
            status = f"aborted: {exc}"
            break

    best_test = float(best_score) if data.test and np.isfinite(best_score) else None
    return FitReport(
        variant=model.variant,
        status=status,
        n_train=len(data.train),
        n_test=len(data.test),
        epochs=history,
        best_epoch=best_epoch,
        best_test_loss=best_test,
        final_train_loss=float(train_loss),
        model=with_param_vector(model, best_theta),
    )


def initial_model(
    variant: str,
    data: Dataset,
    hidden: tuple[int, ...] = (10, 10),
    rho_j_ref: float = 0.05,
    x_ref: float | None = None,
    seed: int = 0,
) -> FdModel:
    """Data-driven starting point for trajectory training.

    The free-flow scale starts just above the fastest observed speed; the
    trainable jam density starts just above the densest co-located sample.
    """
    from .fd_models import make_greenshields, make_neural
    from .neural_net import MlpSpec, init_weights

    max_speed = max(float(t.speeds.max()) for t, _ in data.train)
    u0_init = max(1.05 * max_speed, 1.0)
    if variant == "greenshields-traj":
        rho_max = max(float(c.values.max()) for _, c in data.train)
        rho_j_init = 1.25 * rho_max if rho_max > 0 else rho_j_ref
        return make_greenshields(u0=u0_init, rho_j=rho_j_init, trainable=True)
    if variant in ("nn1", "nn2"):
        arity = 1 if variant == "nn1" else 2
        spec = MlpSpec((arity, *hidden, 1))
        return make_neural(
            variant,
            weights=init_weights(spec, seed),
            u0=u0_init,
            hidden=hidden,
            rho_j_ref=rho_j_ref,
            x_ref=x_ref,
        )
    raise ModelShapeError(
        f"no trajectory-training initialization for variant {variant!r}"
    )


def fit_greenshields_ls(rho: np.ndarray, speed: np.ndarray) -> GreenshieldsParams:
    """Ordinary least squares on u = a + b*rho; u0 = a, rho_j = -a/b.

    The point cloud must span more than one density value, and the fitted
    line must slope downward from a positive intercept to define a diagram.
    """
    rho = np.asarray(rho, dtype=float)
    speed = np.asarray(speed, dtype=float)
    if rho.ndim != 1 or rho.shape != speed.shape or rho.size < 2:
        raise DataError("need matching 1-d rho/speed arrays with >= 2 points")
    if np.ptp(rho) == 0.0:
        raise DataError("all densities identical: design matrix is singular")
    design = np.column_stack([np.ones_like(rho), rho])
    (a, b), *_ = np.linalg.lstsq(design, speed, rcond=None)
    if a <= 0 or b >= 0:
        raise DegenerateFitError(
            f"least-squares line u = {a:.4g} + {b:.4g}*rho has no jam density"
        )
    return GreenshieldsParams(u0=float(a), rho_j=float(-a / b))


def pooled_points(pairs: tuple[Pair, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate co-located (density, speed) samples across trajectories."""
    rho = np.concatenate([control.values for _, control in pairs])
    speed = np.concatenate([traj.speeds for traj, _ in pairs])
    return rho, speed


def evaluate(
    named_models: list[tuple[str, FdModel]], data: Dataset
) -> list[tuple[str, str, float | None]]:
    """Loss per model per split; None marks an absent split."""
    rows: list[tuple[str, str, float | None]] = []
    splits = [("train", data.train), ("test", data.test)]
    for name, model in named_models:
        for split_name, pairs in splits:
            if not pairs:
                rows.append((name, split_name, None))
                continue
            batch = make_batch(list(pairs))
            w = pair_weights([t for t, _ in pairs], data.delta_t)
            rows.append((name, split_name, eval_batch_loss(model, batch, w)))
    return rows
