"""Adapted Wasserstein distances and multiperiod Wasserstein DRO on scenario trees."""

__version__ = "0.1.0"

from .adapted_metrics import (DistanceResult, adapted_wasserstein, adapted_wasserstein_inf, all_distances,
                              wasserstein)
from .costs import CostError, CostModel, builtin, from_expression, quadratic_tracking
from .dro import (ControlGrid, DroError, DroSolution, NotMartingale, best_response, causal_equals_bicausal_probe,
                  minimax_gap, solve_controlled, solve_martingale, solve_uncontrolled)
from .measures import (AdaptedMeasure, Kernel, TreeError, binomial_tree, dump_tree, is_martingale, kernel_at,
                       load_tree, random_martingale_tree, random_tree, tree_from_dict, tree_to_dict)
from .oracle import BudgetExceeded, OracleBudget, brute_aw_inf, brute_dro, brute_transport, property_suite
from .sensitivity import (SensitivityError, SensitivityReport, empirical_slope, upsilon, upsilon_martingale,
                          upsilon_tilde, worst_direction)
from .transport import (TransportPlan, bottleneck_transport, dro_one_step_dual, dro_one_step_martingale,
                        dro_one_step_primal, minimize_dual, monotone_coupling, solve_transport)
