import numpy as np
import pytest

from fdlearn.fd_models import FdModel, make_greenshields, make_neural
from fdlearn.neural_net import MlpSpec, init_weights
from fdlearn.ode import ControlSeries


def central_diff_grad(fn, theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Two-sided finite-difference gradient of a scalar function."""
    grad = np.empty_like(theta)
    for i in range(theta.size):
        bump = np.zeros_like(theta)
        bump[i] = step
        grad[i] = (fn(theta + bump) - fn(theta - bump)) / (2.0 * step)
    return grad


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(
        float(np.linalg.norm(analytic, np.inf)),
        float(np.linalg.norm(numeric, np.inf)),
        1e-12,
    )
    return float(np.linalg.norm(analytic - numeric, np.inf)) / scale


def random_control(rng: np.random.Generator, n_steps: int, dt: float = 1.0,
                   rho_max: float = 0.04) -> ControlSeries:
    values = rng.uniform(0.0, rho_max, size=n_steps + 1)
    return ControlSeries(t0=0.0, dt=dt, values=values)


def random_model(rng: np.random.Generator, variant: str) -> FdModel:
    if variant == "greenshields-traj":
        return make_greenshields(
            u0=rng.uniform(20.0, 60.0), rho_j=rng.uniform(0.03, 0.08),
            trainable=True,
        )
    arity = 1 if variant == "nn1" else 2
    spec = MlpSpec((arity, 8, 8, 1))
    weights = init_weights(spec, seed=int(rng.integers(0, 2**31)))
    # Nudge off the symmetric zero-bias start so draws cover varied regions.
    weights = weights + rng.normal(0.0, 0.3, size=weights.size)
    return make_neural(
        variant, weights=weights, u0=rng.uniform(20.0, 60.0), hidden=(8, 8),
        rho_j_ref=0.05, x_ref=1000.0 if variant == "nn2" else None,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
