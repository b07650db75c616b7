"""Compute-cost and dollar-cost accounting for cascade runs.

FLOPs here are add-multiply counts for transformer forward passes. The
full form charges 2*(12*n_layer*d_model^2) per token plus the attention
context term; dropping the context term leaves the familiar 2N per
token. Chain cost bills each stage for the queries it answered
(retained), which is the convention the reference arithmetic uses, and
token/USD accounting follows the same convention so the three report
columns stay comparable.

All chain arithmetic is exact integer math; nothing here rounds until
formatting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .trace import ModelSpec, TraceFile

REL_TOL = 1e-9


class CostError(ValueError):
    """Cost accounting could not proceed (bad inputs or unknown sizes)."""


# ---------------------------------------------------------------------------
# forward-pass FLOPs
# ---------------------------------------------------------------------------

def forward_flops_full(n_layer: int, n_ctx: int, d_model: int) -> int:
    """Add-multiply count for one forward pass, context term included.

    2*(12*n_layer*d_model^2) + 2*n_layer*n_ctx*d_model. n_ctx may be 0
    to price the parameter term alone.
    """
    if n_layer <= 0 or d_model <= 0:
        raise CostError("n_layer and d_model must be positive")
    if n_ctx < 0:
        raise CostError("n_ctx must be non-negative")
    return 2 * (12 * n_layer * d_model * d_model) + 2 * n_layer * n_ctx * d_model


def forward_flops_approx(param_count: int) -> int:
    """Context-free approximation: 2N add-multiply operations."""
    if param_count <= 0:
        raise CostError("param_count must be positive")
    return 2 * param_count


def params_from_dims(n_layer: int, d_model: int) -> int:
    """Parameter-count estimate 12*n_layer*d_model^2 used by the full form."""
    if n_layer <= 0 or d_model <= 0:
        raise CostError("n_layer and d_model must be positive")
    return 12 * n_layer * d_model * d_model


# ---------------------------------------------------------------------------
# chain accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageCount:
    """Queries answered by one stage of a chain."""

    model_id: str
    k: int

    def validate(self) -> None:
        if not self.model_id:
            raise CostError("StageCount with empty model_id")
        if self.k < 0:
            raise CostError(f"StageCount for {self.model_id!r} has negative k")


def stage_counts(decisions: Iterable) -> list[StageCount]:
    """Retained-query counts per answering model, in first-seen order."""
    order: list[str] = []
    tally: dict[str, int] = {}
    for decision in decisions:
        mid = decision.answering_model
        if mid not in tally:
            order.append(mid)
            tally[mid] = 0
        tally[mid] += 1
    return [StageCount(mid, tally[mid]) for mid in order]


def chain_cc(counts: Sequence[StageCount], specs: Mapping[str, ModelSpec]) -> int:
    """Chain compute cost: sum of 2 * N_i * k_i over stages, exact."""
    total = 0
    for count in counts:
        count.validate()
        spec = specs.get(count.model_id)
        if spec is None:
            raise CostError(f"no model spec for {count.model_id!r}")
        if spec.param_count is None:
            raise CostError(
                f"{count.model_id!r} has no parameter count; compute cost is undefined "
                f"for it (use token accounting instead)")
        total += 2 * spec.param_count * count.k
    return total


def usd_cost(tokens_in: int, tokens_out: int, spec: ModelSpec) -> float:
    """Dollar cost of a token batch at the spec's per-million prices."""
    if tokens_in < 0 or tokens_out < 0:
        raise CostError("token counts must be non-negative")
    return tokens_in / 1e6 * spec.price_in + tokens_out / 1e6 * spec.price_out


def reduced_fraction(value: float, baseline: float) -> float:
    """Fractional saving vs a baseline: 1 - value/baseline."""
    if baseline <= 0:
        raise CostError("baseline must be positive")
    return 1.0 - value / baseline


def gflops(flops: float) -> float:
    return flops / 1e9


# ---------------------------------------------------------------------------
# run-level report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostReport:
    """Cost columns for one run vs the all-final-model baseline.

    Fields are None when the underlying quantity is unavailable (an
    api_only stage leaves cc undefined; a trace without the baseline
    model's observations leaves token baselines undefined).
    """

    cc_flops: int | None = None
    cc_baseline_flops: int | None = None
    reduced_cc: float | None = None
    tokens_in: int | None = None
    tokens_out: int | None = None
    usd: float | None = None
    usd_baseline: float | None = None
    reduced_usd: float | None = None
    reduced_tokens: float | None = None

    def validate(self) -> None:
        pairs = (
            (self.cc_flops, self.cc_baseline_flops, self.reduced_cc),
            (self.usd, self.usd_baseline, self.reduced_usd),
        )
        for value, baseline, reduced in pairs:
            if reduced is None:
                continue
            if value is None or baseline is None or baseline <= 0:
                raise CostError("reduced fraction present without value and positive baseline")
            expect = 1.0 - value / baseline
            if abs(reduced - expect) > 1e-9 * max(1.0, abs(expect)):
                raise CostError("reduced fraction does not match 1 - value/baseline")
        for reduced in (self.reduced_cc, self.reduced_usd, self.reduced_tokens):
            if reduced is not None and reduced > 1.0 + 1e-12:
                raise CostError("reduced fraction above 1")

    def to_json(self) -> dict:
        return {
            "cc_flops": self.cc_flops,
            "cc_gflops": None if self.cc_flops is None else gflops(self.cc_flops),
            "cc_baseline_flops": self.cc_baseline_flops,
            "reduced_cc": self.reduced_cc,
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
            "usd": self.usd,
            "usd_baseline": self.usd_baseline,
            "reduced_usd": self.reduced_usd,
            "reduced_tokens": self.reduced_tokens,
        }


def replay_cost_report(decisions: Sequence, trace: TraceFile, baseline_model_id: str,
                       *, include_probe_cost: bool = False,
                       probe_params: Mapping[str, int] | None = None) -> CostReport:
    """Cost columns for a replay run.

    Each stage bills the queries it answered. The baseline is the named
    (largest) model answering every query; its token baseline needs that
    model's observation on each query and is omitted when absent.
    Probe inference cost is excluded unless include_probe_cost, which
    adds 2*probe_params[model] per probe evaluation recorded in the
    decisions.
    """
    registry = trace.header.registry()
    if baseline_model_id not in registry:
        raise CostError(f"baseline model {baseline_model_id!r} is not in the trace registry")
    counts = stage_counts(decisions)
    n = sum(c.k for c in counts)

    # missing probe params is a usage error and must not be masked by the
    # api_only fallback below
    probe_extra = _probe_flops(decisions, probe_params or {}) if include_probe_cost else 0
    cc: int | None
    try:
        cc = chain_cc(counts, registry) + probe_extra
        cc_baseline = chain_cc([StageCount(baseline_model_id, n)], registry) if n else 0
    except CostError:
        cc = cc_baseline = None
    red_cc = (reduced_fraction(cc, cc_baseline)
              if cc is not None and cc_baseline else None)

    obs_by_query = {record.query_id: record.observations for record in trace.records}
    tokens_in = tokens_out = 0
    usd = 0.0
    base_in = base_out = 0
    base_usd = 0.0
    baseline_complete = True
    for decision in decisions:
        observations = obs_by_query.get(decision.query_id)
        if observations is None:
            raise CostError(f"decision {decision.query_id!r} is not in the trace")
        answered = observations[decision.answering_model]
        tokens_in += answered.tokens_in
        tokens_out += answered.tokens_out
        usd += usd_cost(answered.tokens_in, answered.tokens_out,
                        registry[decision.answering_model])
        base_obs = observations.get(baseline_model_id)
        if base_obs is None:
            baseline_complete = False
        else:
            base_in += base_obs.tokens_in
            base_out += base_obs.tokens_out
            base_usd += usd_cost(base_obs.tokens_in, base_obs.tokens_out,
                                 registry[baseline_model_id])

    report = CostReport(
        cc_flops=cc, cc_baseline_flops=cc_baseline, reduced_cc=red_cc,
        tokens_in=tokens_in, tokens_out=tokens_out, usd=usd,
        usd_baseline=base_usd if baseline_complete else None,
        reduced_usd=(reduced_fraction(usd, base_usd)
                     if baseline_complete and base_usd > 0 else None),
        reduced_tokens=(reduced_fraction(tokens_in + tokens_out, base_in + base_out)
                        if baseline_complete and (base_in + base_out) > 0 else None),
    )
    report.validate()
    return report


def _probe_flops(decisions: Sequence, probe_params: Mapping[str, int]) -> int:
    extra = 0
    for decision in decisions:
        for visit in decision.visited:
            if visit.p_ik is None:
                continue
            params = probe_params.get(visit.model_id)
            if params is None:
                raise CostError(
                    f"probe cost requested but no parameter count for {visit.model_id!r}")
            extra += 2 * params
    return extra


# ---------------------------------------------------------------------------
# pricing registry
# ---------------------------------------------------------------------------

def load_pricing(path: str | Path | None = None) -> dict[str, ModelSpec]:
    """Model specs keyed by id from a pricing JSON file.

    The file is either a bare list of model objects or an object with a
    "models" list and a "prices_recorded" provenance note. With no path,
    loads the bundled defaults.
    """
    if path is None:
        text = resources.files("confcascade").joinpath("data/pricing.json").read_text("utf-8")
        source = "bundled pricing"
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise CostError(f"cannot read pricing file {path}: {exc}") from None
        source = str(path)
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CostError(f"{source}: invalid JSON ({exc.msg})") from None
    rows = obj.get("models") if isinstance(obj, dict) else obj
    if not isinstance(rows, list):
        raise CostError(f"{source}: expected a list of models or a 'models' key")
    out: dict[str, ModelSpec] = {}
    for row in rows:
        spec = ModelSpec.from_json(row)
        if spec.model_id in out:
            raise CostError(f"{source}: duplicate model {spec.model_id!r}")
        out[spec.model_id] = spec
    return out
