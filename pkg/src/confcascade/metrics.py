"""Run-level evaluation: accuracy, macro scores, PD, McNemar, sweeps.

Macro precision/recall/F1 average over the supplied label set with the
zero-division convention that an undefined per-class score counts as 0.
PD (performance drop) is the cascade's accuracy minus the standalone
accuracy of a named baseline model, in signed percentage points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .cascade import CascadeConfig, DecisionRecord, route_replay
from .costs import CostReport, replay_cost_report
from .probe import PikModel
from .stats import binom_two_sided_exact, chi2_sf
from .trace import FACTUALITY_LABELS, TraceFile

MCNEMAR_SMALL_THRESHOLD = 25


class EvalError(ValueError):
    """Evaluation could not proceed (unlabeled data or mismatched inputs)."""


# ---------------------------------------------------------------------------
# report types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    """Headline metrics for one run."""

    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    n: int
    pd: float | None = None
    hallucination_rate: float | None = None
    cost: CostReport | None = None

    def validate(self) -> None:
        for name in ("accuracy", "macro_precision", "macro_recall", "macro_f1"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise EvalError(f"{name} outside [0, 1]")
        if self.hallucination_rate is not None and not (0.0 <= self.hallucination_rate <= 1.0):
            raise EvalError("hallucination_rate outside [0, 1]")
        if self.n < 0:
            raise EvalError("negative n")

    def to_json(self) -> dict:
        out: dict = {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "n": self.n,
            "pd": self.pd,
            "hallucination_rate": self.hallucination_rate,
        }
        if self.cost is not None:
            out["cost"] = self.cost.to_json()
        return out


@dataclass(frozen=True)
class McNemarResult:
    """Paired-comparison test result over discordant counts."""

    b: int
    c: int
    statistic: float | None
    p_value: float
    method: str

    def to_json(self) -> dict:
        return {"b": self.b, "c": self.c, "statistic": self.statistic,
                "p_value": self.p_value, "method": self.method}


# ---------------------------------------------------------------------------
# classification metrics
# ---------------------------------------------------------------------------

def decision_correct(decision: DecisionRecord) -> bool:
    """Resolved correctness; unlabeled decisions are an error."""
    if decision.correct is not None:
        return decision.correct
    if decision.gold_answer is not None:
        return decision.answer == decision.gold_answer
    raise EvalError(f"decision {decision.query_id!r} has no correctness label")


def classification_metrics(decisions: Sequence[DecisionRecord],
                           label_set: Sequence[str],
                           *, baseline_accuracy: float | None = None,
                           cost: CostReport | None = None) -> EvalReport:
    """Accuracy plus label-macro precision/recall/F1 over the decisions.

    Macro scores need (answer, gold) pairs; every gold label must come
    from label_set. PD is filled in percentage points when a baseline
    accuracy is supplied.
    """
    if not decisions:
        raise EvalError("no decisions to score")
    if not label_set:
        raise EvalError("empty label_set")
    labels = list(dict.fromkeys(label_set))
    n_correct = 0
    tp = {label: 0 for label in labels}
    fp = {label: 0 for label in labels}
    fn = {label: 0 for label in labels}
    for decision in decisions:
        n_correct += decision_correct(decision)
        gold = decision.gold_answer
        if gold is None:
            raise EvalError(f"decision {decision.query_id!r} has no gold_answer "
                            f"for macro metrics")
        if gold not in tp:
            raise EvalError(f"gold label {gold!r} outside label_set")
        pred = decision.answer
        if pred == gold:
            tp[gold] += 1
        else:
            fn[gold] += 1
            if pred in fp:
                fp[pred] += 1
    precisions, recalls, f1s = [], [], []
    for label in labels:
        p = _safe_div(tp[label], tp[label] + fp[label])
        r = _safe_div(tp[label], tp[label] + fn[label])
        precisions.append(p)
        recalls.append(r)
        f1s.append(_safe_div(2.0 * p * r, p + r))
    n = len(decisions)
    accuracy = n_correct / n
    report = EvalReport(
        accuracy=accuracy,
        macro_precision=sum(precisions) / len(labels),
        macro_recall=sum(recalls) / len(labels),
        macro_f1=sum(f1s) / len(labels),
        n=n,
        pd=None if baseline_accuracy is None else (accuracy - baseline_accuracy) * 100.0,
        cost=cost,
    )
    report.validate()
    return report


def performance_drop(accuracy: float, baseline_accuracy: float) -> float:
    """Signed percentage-point gap: (accuracy - baseline) * 100."""
    return (accuracy - baseline_accuracy) * 100.0


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


# ---------------------------------------------------------------------------
# McNemar
# ---------------------------------------------------------------------------

def mcnemar(b: int, c: int, small_threshold: int = MCNEMAR_SMALL_THRESHOLD) -> McNemarResult:
    """Two-sided McNemar test over discordant counts.

    Small samples (b + c below the threshold, or zero) get the exact
    binomial p-value and no statistic; larger samples get the
    continuity-corrected chi-squared statistic with 1 df.
    """
    if b < 0 or c < 0:
        raise EvalError("discordant counts must be non-negative")
    n_discordant = b + c
    if n_discordant < small_threshold or n_discordant == 0:
        return McNemarResult(b=b, c=c, statistic=None,
                             p_value=binom_two_sided_exact(b, c),
                             method="exact_binomial")
    if abs(b - c) <= 1:
        statistic = 0.0
    else:
        statistic = (abs(b - c) - 1.0) ** 2 / n_discordant
    return McNemarResult(b=b, c=c, statistic=statistic,
                         p_value=chi2_sf(statistic, df=1),
                         method="chi_squared_cc")


def discordant_counts(decisions_a: Sequence[DecisionRecord],
                      decisions_b: Sequence[DecisionRecord]) -> tuple[int, int]:
    """(b, c) where b counts a-correct/b-incorrect and c the reverse.

    Pairs by query_id; both runs must cover the same query multiset.
    """
    if len(decisions_a) != len(decisions_b):
        raise EvalError("decision lists differ in length")
    sorted_a = sorted(decisions_a, key=lambda d: d.query_id)
    sorted_b = sorted(decisions_b, key=lambda d: d.query_id)
    b = c = 0
    for da, db in zip(sorted_a, sorted_b):
        if da.query_id != db.query_id:
            raise EvalError(f"query sets differ: {da.query_id!r} vs {db.query_id!r}")
        ca, cb = decision_correct(da), decision_correct(db)
        if ca and not cb:
            b += 1
        elif cb and not ca:
            c += 1
    return b, c


# ---------------------------------------------------------------------------
# hallucination
# ---------------------------------------------------------------------------

def hallucination_rate(decisions: Sequence[DecisionRecord]) -> float:
    """Fraction of responses labeled factually incorrect.

    Abstentions stay in the denominator but never count as incorrect.
    """
    if not decisions:
        raise EvalError("no decisions to score")
    incorrect = 0
    for decision in decisions:
        label = decision.factuality
        if label not in FACTUALITY_LABELS:
            raise EvalError(f"decision {decision.query_id!r} lacks a factuality label")
        incorrect += label == "incorrect"
    return incorrect / len(decisions)


# ---------------------------------------------------------------------------
# baseline + sweep
# ---------------------------------------------------------------------------

def baseline_accuracy_from_trace(trace: TraceFile, model_id: str) -> float:
    """Standalone accuracy of one model over every query in the trace."""
    if not trace.records:
        raise EvalError("empty trace")
    n_correct = 0
    for record in trace.records:
        obs = record.observations.get(model_id)
        if obs is None:
            raise EvalError(f"query {record.query_id!r} has no observation for {model_id!r}")
        if obs.correct is not None:
            n_correct += obs.correct
            continue
        if record.task_kind == "multiple_choice" and record.gold_answer is not None:
            from .confidence import p_t_multiple_choice
            chosen = p_t_multiple_choice(obs.choice_dist, list(record.choice_labels)).chosen_label
            n_correct += chosen == record.gold_answer
            continue
        raise EvalError(f"query {record.query_id!r} has no correctness label for {model_id!r}")
    return n_correct / len(trace.records)


@dataclass(frozen=True)
class SweepRow:
    """One (threshold, ablation) cell of a sensitivity sweep."""

    tau: float
    ablation: str
    accuracy: float
    pd: float
    reduced_cc: float | None
    n_escalations: int

    def to_json(self) -> dict:
        return {"tau": self.tau, "ablation": self.ablation, "accuracy": self.accuracy,
                "pd": self.pd, "reduced_cc": self.reduced_cc,
                "n_escalations": self.n_escalations}


def threshold_sweep(trace: TraceFile, config_template: CascadeConfig,
                    tau_values: Sequence[float],
                    *, with_and_without_pik: bool = False,
                    pik_registry: Mapping[str, PikModel] | None = None) -> list[SweepRow]:
    """Replay the trace once per (tau_t, ablation) cell.

    Rows come out sorted by descending tau, probe-enabled ablation
    first. PD and reduced CC are against the final stage answering
    everything.
    """
    if not tau_values:
        raise EvalError("tau_values must be non-empty")
    template_uses_pik = any(policy.use_pik for policy in config_template.stages)
    if with_and_without_pik:
        if not template_uses_pik:
            raise EvalError("config template has no probe-enabled stage to ablate")
        ablations = ["with_pik", "without_pik"]
    else:
        ablations = ["with_pik" if template_uses_pik else "without_pik"]
    baseline_model = config_template.stages[-1].model_id
    baseline_acc = baseline_accuracy_from_trace(trace, baseline_model)

    rows: list[SweepRow] = []
    for tau in sorted(set(tau_values), reverse=True):
        for ablation in ablations:
            config = config_template.with_tau_t(tau)
            if ablation == "without_pik":
                config = config.without_pik()
            decisions = route_replay(trace, config,
                                     pik_registry if ablation == "with_pik" else None)
            accuracy = sum(decision_correct(d) for d in decisions) / len(decisions)
            cost = replay_cost_report(decisions, trace, baseline_model)
            rows.append(SweepRow(
                tau=tau, ablation=ablation, accuracy=accuracy,
                pd=performance_drop(accuracy, baseline_acc),
                reduced_cc=cost.reduced_cc,
                n_escalations=sum(len(d.visited) - 1 for d in decisions),
            ))
    return rows
