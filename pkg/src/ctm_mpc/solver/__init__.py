from .qp import (
    InfeasibleError,
    InflowQP,
    IntegerSolution,
    Relaxation,
    solve_integer_qp,
    solve_qp_relaxation,
)
from .search import (
    PlanEvaluation,
    PlanSearchProblem,
    SearchResult,
    evaluate_plan,
    exhaustive_node_count,
    minimal_margin,
    search_signal_plan,
)

__all__ = [
    "InfeasibleError",
    "InflowQP",
    "IntegerSolution",
    "PlanEvaluation",
    "PlanSearchProblem",
    "Relaxation",
    "SearchResult",
    "evaluate_plan",
    "exhaustive_node_count",
    "minimal_margin",
    "search_signal_plan",
    "solve_integer_qp",
    "solve_qp_relaxation",
]
