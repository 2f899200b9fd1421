__version__ = "0.1.0"


from .errors import (
    ConfigError,
    EllipticityViolationError,
    HashMismatchError,
    InstabilityError,
    LasaltError,
    NumericalError,
    SeamContaminationWarning,
)
from .grid import TorusGrid, relative_l2
from .fields import (
    ConstantVector,
    OneFormField,
    ScalarField,
    Tensor2Field,
    VectorField,
    double_lie,
    lie,
)
from .noise import NoiseBasis, build_noise_basis, canonical, sample_path
from .runconfig import RunConfig, desk_config
from .expectation import ExpectationState, ExpectationTrajectory, run_expectation
from .spde import SpdeState, run_member
from .moments import MomentState, MomentTrajectory, run_moments
from .montecarlo import ClosureReport, EnsembleStats, closure_compare, run_ensemble
from .characteristics import FlowMap, integrate_flow, theta_by_pullback
from .verify import VerifySummary, run_verify


__all__ = [
    "ClosureReport",
    "ConfigError",
    "ConstantVector",
    "EllipticityViolationError",
    "EnsembleStats",
    "ExpectationState",
    "ExpectationTrajectory",
    "FlowMap",
    "HashMismatchError",
    "InstabilityError",
    "LasaltError",
    "MomentState",
    "MomentTrajectory",
    "NoiseBasis",
    "NumericalError",
    "OneFormField",
    "RunConfig",
    "ScalarField",
    "SeamContaminationWarning",
    "SpdeState",
    "Tensor2Field",
    "TorusGrid",
    "VectorField",
    "build_noise_basis",
    "canonical",
    "closure_compare",
    "desk_config",
    "double_lie",
    "integrate_flow",
    "lie",
    "relative_l2",
    "run_ensemble",
    "run_expectation",
    "run_member",
    "run_moments",
    "run_verify",
    "sample_path",
    "theta_by_pullback",
]
