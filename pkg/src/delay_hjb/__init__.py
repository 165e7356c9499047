"""Dynamic programming for optimal control of stochastic delay equations.

The pipeline: lift the delayed state into a product Hilbert space
(:mod:`~delay_hjb.hilbert`), simulate the controlled dynamics
(:mod:`~delay_hjb.sdde`), approximate the value function by lag-chain value
iteration (:mod:`~delay_hjb.value`), regularize it in the weak metric
(:mod:`~delay_hjb.envelopes`), synthesize and verify a feedback policy
(:mod:`~delay_hjb.feedback`).  :mod:`~delay_hjb.advertising` ships the
flagship application and :mod:`~delay_hjb.cli` the command line.
"""

from .advertising import (
    AdvertisingConfig,
    build_problem_spec,
    default_h,
    default_h_prime,
    default_h_prime_inverse,
    initial_state,
)
from .envelopes import (
    EnvelopeResult,
    LagSpectrum,
    MollifiedField,
    SearchConfig,
    envelope_convergence_audit,
    inf_convolution,
    lag_gram_matrices,
    lag_subspace_spectrum,
    partial_mollify,
    semiconvexity_probe,
    sup_convolution,
)
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DelayHJBError,
    InvalidArgumentError,
    NumericalError,
    PreconditionError,
)
from .feedback import (
    ChallengerConfig,
    FeedbackPolicy,
    VerificationReport,
    closed_loop_simulate,
    psi_select,
    verify_optimality,
)
from .hilbert import (
    BSpectrum,
    LiftedState,
    OperatorMatrix,
    SegmentGrid,
    apply_A_inverse,
    build_A_star,
    build_B,
    check_weak_B,
    inner_minus1,
    norm_minus1,
    norm_X,
    spectrum_B,
)
from .sdde import (
    ControlBox,
    KernelSpec,
    OpenLoopControl,
    Path,
    PiecewiseSchedule,
    ProblemSpec,
    compare_paths,
    dynkin_residual,
    integrate,
    lift_trajectory,
    rho_zero,
)
from .value import (
    CostEstimate,
    LagChainMDP,
    ValueField,
    build_lag_mdp,
    convexity_probe,
    gradient_x0,
    hamiltonian,
    lipschitz_minus1_probe,
    mc_cost,
    open_loop_oracle,
    value_iteration,
)

__version__ = "0.1.0"
