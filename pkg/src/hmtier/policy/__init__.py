"""Migration policies: the interval planner and the active-list baseline."""
from .ial import IALConfig, IALState, ial_period
from .sentinel import (BoundStatus, Case, DecisionLog, IntervalEndState, LowerBound, MigrationIntervalConfig,
                       PruneResult, Strategy, candidate_subset, check_lower_bound, classify_case,
                       constraint_inputs, interval_bounds, plan_interval, prune_mi_candidates,
                       rebucket_on_new_dataflow, resolve_trials, select_optimal_mi)

__all__ = [
    "BoundStatus", "Case", "DecisionLog", "IALConfig", "IALState", "IntervalEndState", "LowerBound",
    "MigrationIntervalConfig", "PruneResult", "Strategy", "candidate_subset", "check_lower_bound",
    "classify_case", "constraint_inputs", "ial_period", "interval_bounds", "plan_interval",
    "prune_mi_candidates", "rebucket_on_new_dataflow", "resolve_trials", "select_optimal_mi",
]
