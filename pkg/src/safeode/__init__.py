"""Safety-filtered continuous-time neural controllers.

A differentiable QP layer projects a neural controller's output onto the
set of barrier-safe controls at every integration step; training minimizes
a Lyapunov-violation loss through the whole closed loop, learning both the
controller weights and the barrier class-K coefficients.
"""

from .certificates import (
    Barrier,
    Lyapunov,
    RelativeDegreeMismatchError,
    SafetyFilterSpec,
    build_cbf_rows,
    build_hocbf_rows,
    build_rows,
    clf_pointwise_loss,
    clf_trajectory_loss,
    safety_filter,
)
from .engine import (
    AdjointState,
    LossWeights,
    NonFiniteStateError,
    SolveConfig,
    grad_adjoint,
    grad_discrete,
    rollout,
)
from .envs import (
    CarChain,
    CarChainEnv,
    Trajectory,
    Unicycle,
    Unicycle4,
    Unicycle4Env,
    UnicycleEnv,
    car_chain_dynamics,
    collision_check,
    mean_error,
    reward_cars,
    unicycle_dynamics,
    unicycle_lookahead,
)
from .numerics import SingularMatrixError, finite_diff_grad, kron, solve_linear
from .policy import ClassKParams, MlpPolicy, class_k_apply
from .qp import (
    DegenerateActiveSetError,
    MaxIterationsError,
    QpGradients,
    QpInfeasibleError,
    QpProblem,
    QpSolution,
    ZeroConstraintRowError,
    qp_backward,
    qp_jacobian_full,
    qp_project_halfspace,
    qp_solve,
)
from .trainer import DivergedLossError, TrainConfig, TrainReport, ablate, train

__version__ = "0.1.0"
