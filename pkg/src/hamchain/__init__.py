"""Chain policies for lossless Hamiltonian systems, built from a few expert demonstrations."""
from .bc_baseline import MlpParams, TrainConfig, bc_rollout, forward, train
from .bounds import BoundInputs, finite_time_bound, lemma1_bounds, sample_complexity, theorem2_radius
from .chain_policy import (
    AssignmentSet,
    AssignmentTriple,
    ControlSnippet,
    build_assignment_set,
    check_condition1,
    check_condition2,
    rho,
    rollout,
    rollout_batch,
    select_index,
)
from .dynamics import (
    SystemModel,
    TargetSpec,
    Trajectory,
    builtin,
    builtin_pendulum,
    builtin_spring_mass,
    delta_h,
    rhs,
    simulate,
)
from .errors import ConfigurationError, ExpertFailure, IntegrationBlowup, NoHitError
from .expert import Demonstration, ExpertConfig, demo_rng, generate_demonstration

__version__ = "0.1.0"
