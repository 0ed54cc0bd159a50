"""Aggregated frequency-reserve bidding for flexible buildings via ADMM."""

__version__ = "0.1.0"

from .admm import (
    AdmmConfig,
    AdmmIterate,
    AdmmResult,
    BuildingLocalState,
    aggregation_kkt_oracle,
    aggregation_step,
    building_step,
    lagrangian_update,
    objective_value,
    run_centralized,
    solve_individual,
    solve_monolithic,
)
from .decentral import RingMessage, codec_decode, codec_encode, ring_round, run_decentralized
from .model import (
    BuildingModel,
    ConfigurationError,
    FleetSpec,
    StackedSystem,
    capacity_only_building,
    generate_fleet,
    simulate,
    stack_dynamics,
    validate_model,
)
from .outcomes import (
    BidOutcome,
    feasible_extract,
    feasible_lagrangian_price,
    lagrangian_reward,
    mixed_reward,
    proportional_reward,
)
from .qp import QpProblem, QpSolution, kkt_residuals, solve
from .robust_policy import (
    AffinePolicy,
    ConstraintSetC,
    PolicyStructure,
    build_constraint_set,
    check_robust_feasibility,
    evaluate_policy,
)


__all__ = [
    "__version__",
    "AdmmConfig",
    "AdmmIterate",
    "AdmmResult",
    "BuildingLocalState",
    "aggregation_kkt_oracle",
    "aggregation_step",
    "building_step",
    "lagrangian_update",
    "objective_value",
    "run_centralized",
    "solve_individual",
    "solve_monolithic",
    "RingMessage",
    "codec_decode",
    "codec_encode",
    "ring_round",
    "run_decentralized",
    "BuildingModel",
    "ConfigurationError",
    "FleetSpec",
    "StackedSystem",
    "capacity_only_building",
    "generate_fleet",
    "simulate",
    "stack_dynamics",
    "validate_model",
    "BidOutcome",
    "feasible_extract",
    "feasible_lagrangian_price",
    "lagrangian_reward",
    "mixed_reward",
    "proportional_reward",
    "QpProblem",
    "QpSolution",
    "kkt_residuals",
    "solve",
    "AffinePolicy",
    "ConstraintSetC",
    "PolicyStructure",
    "build_constraint_set",
    "check_robust_feasibility",
    "evaluate_policy",
]
