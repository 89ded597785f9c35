"""Learning discrete-state POMDPs from batch data by trading off generative
likelihood against off-policy estimated policy value."""
from . import _jax  # noqa: F401  (enables float64 before anything else)
from .exceptions import NumericalError, NumericalUnderflowWarning, UnvisitedWarning
from .model import (
    MISSING,
    PomdpParams,
    Trajectory,
    UnconstrainedParams,
    belief_update,
    constrain,
    em_step,
    filter_beliefs,
    forecast,
    forward_backward,
    learn_rewards,
    log_marginal_likelihood,
    unconstrain,
)

from .envs import TigerSpec, generate_tiger_dataset, manual_tiger_solution, rollout_evaluate
from .estimators import GaussianIOHMM, KNNBehaviorPolicy, PredictionConstrainedPOMDP
from .objective import ObjectiveConfig, ObjectiveValue, TrainResult, evaluate_objective, gradient, train, two_stage_train
from .ope import OpeReport, cwpdis_value, restrict_policy_support
from .solver import ValueFunction, solve_hard

__version__ = "0.1.0"
