from .baselines import (DEFAULT_REGIONS, baseline_ep, baseline_hybrid_cb, baseline_tp,
                        lpt_assign, region_mapping, region_shape)
from .link_balance import MappingResult, optimize_mapping
from .node_balance import (NodeBalanceProblem, SolveReport, brute_force_node_balance,
                           objective_units, solve_node_balance, within_cap)

__all__ = [
    "DEFAULT_REGIONS", "baseline_ep", "baseline_hybrid_cb", "baseline_tp", "lpt_assign",
    "region_mapping", "region_shape", "MappingResult", "optimize_mapping",
    "NodeBalanceProblem", "SolveReport", "brute_force_node_balance", "objective_units",
    "solve_node_balance", "within_cap",
]
