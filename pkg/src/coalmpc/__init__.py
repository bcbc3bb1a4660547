"""Coalitional model predictive control with transferable-utility bargaining."""

from .bargaining import (BargainingConfig, BargainingOutcome, DeviationRecord, attempt_merger,
                         prediction_deviation, run_bargaining_round, switch_cost_bound_check,
                         transfer_or_split, update_allocations)
from .config import SimulationConfig, load_config
from .game import (CooperationCostFn, CostGame, alpha_condition_check, coalition_value,
                   cooperation_cost, core_distance, core_membership, egalitarian_split, excess,
                   least_core_epsilon, merger_test, player_cost_share, satisfy_demand,
                   shapley_value, supermodularity_check)
from .lti import (CoalitionModel, CoalitionStructure, CommGraph, ContinuousAreaModel, ModelSet,
                  SubsystemModel, aggregate_coalition, connected_components, discretize_area,
                  external_coupling, neighbors, step_global)
from .mpc import (MpcSolution, MpcWeights, ReferenceTrajectory, best_response_iteration,
                  build_tracking_qp, mpc_control, unilateral_best_response)
from .qp import QPResult, QuadraticProgram, solve_qp
from .sim import SimulationReport, monte_carlo, run_simulation, write_outputs

__version__ = "0.1.0"
