"""Confidence-gated model cascades: route queries up a chain of models.

Small models answer what they can; P(T) (answer-token confidence) and
P(IK) (a hidden-state probe's "I know" score) decide per query whether
to keep the answer or escalate to the next larger model. The package
covers the trace format, gate logic, probe training, cost accounting,
evaluation metrics, and a live HTTP gateway.
"""

from .cascade import (CascadeConfig, DecisionRecord, RouteQuery, RoutingError,
                      StagePolicy, StageVisit, decide_stage, route_live, route_replay)
from .confidence import PtResult, canonicalize_token, p_t_first_token, p_t_multiple_choice
from .costs import (CostError, CostReport, StageCount, chain_cc, forward_flops_approx,
                    forward_flops_full, gflops, load_pricing, reduced_fraction,
                    replay_cost_report, stage_counts, usd_cost)
from .metrics import (EvalError, EvalReport, McNemarResult, SweepRow,
                      baseline_accuracy_from_trace, classification_metrics,
                      decision_correct, discordant_counts, hallucination_rate, mcnemar,
                      performance_drop, threshold_sweep)
from .probe import (PikClassifier, PikEvalReport, PikModel, PikTrainConfig, auroc,
                    pik_infer, pik_metrics, pik_train)
from .stats import binom_two_sided_exact, chi2_sf, gamma_q
from .trace import (ChoiceDistribution, ModelObservation, ModelSpec, QueryTrace,
                    TraceFile, TraceFormatError, TraceHeader, TraceWriter, read_trace,
                    write_trace)

__version__ = "0.1.0"

__all__ = [
    "CascadeConfig", "DecisionRecord", "RouteQuery", "RoutingError", "StagePolicy",
    "StageVisit", "decide_stage", "route_live", "route_replay",
    "PtResult", "canonicalize_token", "p_t_first_token", "p_t_multiple_choice",
    "CostError", "CostReport", "StageCount", "chain_cc", "forward_flops_approx",
    "forward_flops_full", "gflops", "load_pricing", "reduced_fraction",
    "replay_cost_report", "stage_counts", "usd_cost",
    "EvalError", "EvalReport", "McNemarResult", "SweepRow",
    "baseline_accuracy_from_trace", "classification_metrics", "decision_correct",
    "discordant_counts", "hallucination_rate", "mcnemar", "performance_drop",
    "threshold_sweep",
    "PikClassifier", "PikEvalReport", "PikModel", "PikTrainConfig", "auroc",
    "pik_infer", "pik_metrics", "pik_train",
    "binom_two_sided_exact", "chi2_sf", "gamma_q",
    "ChoiceDistribution", "ModelObservation", "ModelSpec", "QueryTrace", "TraceFile",
    "TraceFormatError", "TraceHeader", "TraceWriter", "read_trace", "write_trace",
    "__version__",
]
