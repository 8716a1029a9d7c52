"""Fundamental-diagram calibration from probe-vehicle trajectories.

The package couples a hand-rolled neural speed model to a fixed-step RK4
trajectory integrator with exact reverse-mode gradients, plus a Godunov
roadway simulator for generating ground-truth datasets.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    CoverageError,
    DataError,
    DegenerateFitError,
    FdError,
    ModelShapeError,
    NumericalFailure,
    RangeError,
)
from .fd_models import (
    DEFAULT_RHO_J_REF,
    FdModel,
    GreenshieldsParams,
    NeuralFdParams,
    eval_flux,
    eval_speed,
    make_greenshields,
    make_neural,
    param_vector,
    with_param_vector,
)
from .neural_net import MlpSpec, init_weights, mlp_forward, sigmoid, softplus
from .ode import (
    ControlSeries,
    SimTrajectory,
    backprop_trajectory,
    integrate_trajectory,
)
from .sensing import colocate, cumulative_count, estimate_density_along, estimate_flux
from .traffic_sim import (
    Blockage,
    DetectorLog,
    InflowProfile,
    ScenarioConfig,
    SignalSchedule,
    Trajectory,
    run_scenario,
)
from .training import (
    Dataset,
    FitReport,
    TrainConfig,
    evaluate,
    fit_greenshields_ls,
    train,
)

__all__ = [
    "__version__",
    "Blockage",
    "ConfigError",
    "ContractError",
    "ControlSeries",
    "CoverageError",
    "DataError",
    "Dataset",
    "DEFAULT_RHO_J_REF",
    "DegenerateFitError",
    "DetectorLog",
    "FdError",
    "FdModel",
    "FitReport",
    "GreenshieldsParams",
    "InflowProfile",
    "MlpSpec",
    "ModelShapeError",
    "NeuralFdParams",
    "NumericalFailure",
    "RangeError",
    "ScenarioConfig",
    "SignalSchedule",
    "SimTrajectory",
    "TrainConfig",
    "Trajectory",
    "backprop_trajectory",
    "colocate",
    "cumulative_count",
    "estimate_density_along",
    "estimate_flux",
    "eval_flux",
    "eval_speed",
    "evaluate",
    "fit_greenshields_ls",
    "init_weights",
    "integrate_trajectory",
    "make_greenshields",
    "make_neural",
    "mlp_forward",
    "param_vector",
    "run_scenario",
    "sigmoid",
    "softplus",
    "train",
    "with_param_vector",
]
