"""Escalation through an ordered model chain gated by P(IK) and P(T).

A query enters at the smallest model. Each stage first checks the
probe's P(IK) against tau_ik (when enabled), then the answer-token
confidence P(T) against tau_t; failing either gate passes the query to
the next larger model, and the last stage answers unconditionally. The
gate order is observable: when both would fail, the recorded gate is
fail_pik.

route_replay applies the gate logic to pre-recorded traces; route_live
drives HTTP backends, short-circuiting as soon as a stage retains so
larger models are never invoked for retained queries.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .confidence import PtResult, p_t_first_token, p_t_multiple_choice
from .probe import PikModel, pik_infer
from .trace import ModelObservation, ModelSpec, QueryTrace, TraceFile

GATES = ("pass", "fail_pik", "fail_pt", "final")

DEFAULT_TAU_T = 0.9
DEFAULT_TAU_IK = 0.5


class RoutingError(ValueError):
    """Routing could not proceed: bad config, missing data, or a failed stage."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StagePolicy:
    """Per-stage thresholds and probe switch."""

    model_id: str
    tau_t: float = DEFAULT_TAU_T
    tau_ik: float = DEFAULT_TAU_IK
    use_pik: bool = False
    pik_model_ref: str | None = None

    def validate(self) -> None:
        if not self.model_id:
            raise RoutingError("stage with empty model_id")
        if not (0.0 <= self.tau_t <= 1.0) or not (0.0 <= self.tau_ik <= 1.0):
            raise RoutingError(f"stage {self.model_id!r}: thresholds must lie in [0, 1]")
        if self.use_pik and not self.pik_model_ref:
            raise RoutingError(f"stage {self.model_id!r} enables the probe but names no pik_model_ref")

    def to_json(self) -> dict:
        return {"model_id": self.model_id, "tau_t": self.tau_t, "tau_ik": self.tau_ik,
                "use_pik": self.use_pik, "pik_model_ref": self.pik_model_ref}

    @classmethod
    def from_json(cls, obj: Mapping) -> "StagePolicy":
        policy = cls(
            model_id=obj.get("model_id", ""),
            tau_t=float(obj.get("tau_t", DEFAULT_TAU_T)),
            tau_ik=float(obj.get("tau_ik", DEFAULT_TAU_IK)),
            use_pik=bool(obj.get("use_pik", False)),
            pik_model_ref=obj.get("pik_model_ref"),
        )
        policy.validate()
        return policy


@dataclass(frozen=True)
class CascadeConfig:
    """Ordered chain plus task shape; the final stage answers unconditionally."""

    stages: tuple[StagePolicy, ...]
    task_kind: str = "multiple_choice"
    answer_target_tokens: tuple[str, ...] | None = None
    final_stage_unconditional: bool = True

    def validate(self, registry: Mapping[str, ModelSpec] | None = None) -> None:
        if not self.stages:
            raise RoutingError("cascade needs at least one stage")
        if self.task_kind not in ("multiple_choice", "open_ended"):
            raise RoutingError(f"unknown task_kind {self.task_kind!r}")
        if self.task_kind == "open_ended" and not self.answer_target_tokens:
            raise RoutingError("open_ended routing needs answer_target_tokens")
        seen: set[str] = set()
        for policy in self.stages:
            policy.validate()
            if policy.model_id in seen:
                raise RoutingError(f"duplicate stage {policy.model_id!r}")
            seen.add(policy.model_id)
        if registry is not None:
            last_known: int | None = None
            for i, policy in enumerate(self.stages):
                spec = registry.get(policy.model_id)
                if spec is None:
                    raise RoutingError(f"stage {policy.model_id!r} is not in the model registry")
                if spec.kind == "api_only" and i != len(self.stages) - 1:
                    raise RoutingError(
                        f"api_only model {policy.model_id!r} may only be the final stage")
                if spec.param_count is not None:
                    if last_known is not None and spec.param_count < last_known:
                        raise RoutingError(
                            f"stages must ascend by parameter count; {policy.model_id!r} "
                            f"({spec.param_count}) follows a larger model ({last_known})")
                    last_known = spec.param_count

    def to_json(self) -> dict:
        return {
            "stages": [policy.to_json() for policy in self.stages],
            "task_kind": self.task_kind,
            "answer_target_tokens": (None if self.answer_target_tokens is None
                                     else list(self.answer_target_tokens)),
            "final_stage_unconditional": self.final_stage_unconditional,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "CascadeConfig":
        stages_raw = obj.get("stages")
        if not isinstance(stages_raw, list):
            raise RoutingError("config needs a 'stages' list")
        targets = obj.get("answer_target_tokens")
        config = cls(
            stages=tuple(StagePolicy.from_json(s) for s in stages_raw),
            task_kind=obj.get("task_kind", "multiple_choice"),
            answer_target_tokens=None if targets is None else tuple(targets),
            final_stage_unconditional=bool(obj.get("final_stage_unconditional", True)),
        )
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> "CascadeConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise RoutingError(f"config {path}: invalid JSON ({exc.msg})") from None
        return cls.from_json(obj)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    def with_tau_t(self, tau_t: float) -> "CascadeConfig":
        return replace(self, stages=tuple(replace(p, tau_t=tau_t) for p in self.stages))

    def without_pik(self) -> "CascadeConfig":
        return replace(self, stages=tuple(replace(p, use_pik=False) for p in self.stages))


# ---------------------------------------------------------------------------
# decisions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageVisit:
    """One stage's gate outcome for one query."""

    model_id: str
    p_ik: float | None
    p_t: float | None
    retained: bool
    gate: str

    def to_json(self) -> dict:
        return {"model_id": self.model_id, "p_ik": self.p_ik, "p_t": self.p_t,
                "retained": self.retained, "gate": self.gate}

    @classmethod
    def from_json(cls, obj: Mapping) -> "StageVisit":
        return cls(model_id=obj["model_id"], p_ik=obj.get("p_ik"), p_t=obj.get("p_t"),
                   retained=bool(obj["retained"]), gate=obj["gate"])


@dataclass(frozen=True)
class DecisionRecord:
    """Per-query routing outcome."""

    query_id: str
    visited: tuple[StageVisit, ...]
    answering_model: str
    answer: str
    correct: bool | None = None
    gold_answer: str | None = None
    factuality: str | None = None
    notes: tuple[str, ...] = ()

    def validate(self) -> None:
        if not self.visited:
            raise RoutingError(f"decision {self.query_id!r} visited no stages")
        retained = [v for v in self.visited if v.retained]
        if len(retained) != 1 or not self.visited[-1].retained:
            raise RoutingError(
                f"decision {self.query_id!r}: exactly the last visited stage must retain")
        for visit in self.visited[:-1]:
            if visit.gate not in ("fail_pik", "fail_pt"):
                raise RoutingError(
                    f"decision {self.query_id!r}: escalated stage {visit.model_id!r} "
                    f"records gate {visit.gate!r}")
        if self.visited[-1].model_id != self.answering_model:
            raise RoutingError(f"decision {self.query_id!r}: answering_model mismatch")

    def to_json(self) -> dict:
        out: dict = {
            "query_id": self.query_id,
            "visited": [visit.to_json() for visit in self.visited],
            "answering_model": self.answering_model,
            "answer": self.answer,
            "correct": self.correct,
        }
        if self.gold_answer is not None:
            out["gold_answer"] = self.gold_answer
        if self.factuality is not None:
            out["factuality"] = self.factuality
        if self.notes:
            out["notes"] = list(self.notes)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "DecisionRecord":
        record = cls(
            query_id=obj["query_id"],
            visited=tuple(StageVisit.from_json(v) for v in obj["visited"]),
            answering_model=obj["answering_model"],
            answer=obj["answer"],
            correct=obj.get("correct"),
            gold_answer=obj.get("gold_answer"),
            factuality=obj.get("factuality"),
            notes=tuple(obj.get("notes", ())),
        )
        record.validate()
        return record


@dataclass(frozen=True)
class StageDecision:
    """decide_stage outcome: retain or escalate, with recorded confidences."""

    retain: bool
    gate: str
    p_ik: float | None
    p_t: float | None
    answer: str


def decide_stage(obs: ModelObservation, policy: StagePolicy, config: CascadeConfig,
                 pik: PikModel | None = None,
                 choice_labels: Sequence[str] | None = None) -> StageDecision:
    """Evaluate one stage's gates: P(IK) first, then P(T).

    P(T) is computed even when the probe gate fails, so escalations keep
    their confidence diagnostics.
    """
    if obs.model_id != policy.model_id:
        raise RoutingError(f"observation for {obs.model_id!r} fed to stage {policy.model_id!r}")
    p_ik: float | None = None
    if policy.use_pik:
        if obs.hidden_state is None:
            raise RoutingError(f"stage {policy.model_id!r} gates on the probe "
                               f"but the observation has no hidden_state")
        if pik is None:
            raise RoutingError(f"stage {policy.model_id!r} gates on the probe but none was supplied")
        p_ik = pik_infer(pik, obs.hidden_state)

    p_t, answer = _stage_confidence(obs, config, choice_labels, strict=True)

    if p_ik is not None and p_ik < policy.tau_ik:
        return StageDecision(False, "fail_pik", p_ik, p_t, answer)
    if p_t < policy.tau_t:
        return StageDecision(False, "fail_pt", p_ik, p_t, answer)
    return StageDecision(True, "pass", p_ik, p_t, answer)


def route_replay(trace: TraceFile, config: CascadeConfig,
                 pik_registry: Mapping[str, PikModel] | None = None,
                 *, require_labels: bool = False) -> list[DecisionRecord]:
    """Replay the gate logic over a recorded trace, query by query.

    Every stage must have a pre-recorded observation for every query.
    Correctness is copied from the retained observation, falling back to
    answer == gold_answer for multiple choice; require_labels turns an
    unresolvable correctness into an error instead of None.
    """
    config.validate(trace.header.registry())
    probes = _resolve_probes(config, pik_registry)
    decisions = []
    for query in trace.records:
        decisions.append(_route_one(query.observations, query, config, probes,
                                    require_labels=require_labels))
    return decisions


@dataclass(frozen=True)
class RouteQuery:
    """A live query: prompt plus whatever labeling is known up front."""

    prompt: str
    query_id: str = ""
    choice_labels: tuple[str, ...] | None = None
    gold_answer: str | None = None

    def resolved_id(self) -> str:
        return self.query_id or f"live-{uuid.uuid4().hex[:12]}"


def route_live(query: RouteQuery, config: CascadeConfig,
               backends: Mapping[str, "object"],
               pik_registry: Mapping[str, PikModel] | None = None,
               *, fallback: str = "escalate",
               complete: Callable | None = None) -> tuple[DecisionRecord, QueryTrace]:
    """Route one live query, issuing backend calls only until a stage retains.

    A failed non-final stage is skipped when fallback="escalate" (the
    skip is noted on the DecisionRecord) and aborts the query when
    fallback="abort". Returns the decision plus the assembled QueryTrace
    so the caller can append it to an output trace.
    """
    from .gateway.client import BackendError, backend_complete

    if fallback not in ("escalate", "abort"):
        raise RoutingError(f"unknown fallback {fallback!r}")
    config.validate()
    probes = _resolve_probes(config, pik_registry)
    for policy in config.stages:
        if policy.model_id not in backends:
            raise RoutingError(f"stage {policy.model_id!r} has no configured backend")
    if config.task_kind == "multiple_choice" and not query.choice_labels:
        raise RoutingError("multiple_choice routing needs choice_labels on the query")
    complete = complete or backend_complete

    query_id = query.resolved_id()
    observations: dict[str, ModelObservation] = {}
    notes: list[str] = []
    visited: list[StageVisit] = []
    retained_obs: ModelObservation | None = None
    answer = ""
    last_index = len(config.stages) - 1
    for i, policy in enumerate(config.stages):
        is_final = i == last_index
        try:
            obs = complete(backends[policy.model_id], query.prompt)
        except BackendError as exc:
            if fallback == "escalate" and not is_final:
                notes.append(f"stage {policy.model_id} skipped: {exc}")
                continue
            raise RoutingError(f"stage {policy.model_id!r} failed: {exc}") from exc
        observations[policy.model_id] = obs
        if is_final and config.final_stage_unconditional:
            p_ik = None
            if policy.use_pik and obs.hidden_state is not None and policy.model_id in probes:
                p_ik = pik_infer(probes[policy.model_id], obs.hidden_state)
            p_t, answer = _stage_confidence(obs, config, query.choice_labels, strict=False)
            visited.append(StageVisit(policy.model_id, p_ik, p_t, True, "final"))
            retained_obs = obs
            break
        d = decide_stage(obs, policy, config, probes.get(policy.model_id), query.choice_labels)
        visited.append(StageVisit(policy.model_id, d.p_ik, d.p_t, d.retain, d.gate))
        if d.retain:
            retained_obs, answer = obs, d.answer
            break
    if retained_obs is None:
        raise RoutingError(f"query {query_id!r}: no stage retained the answer")
    decision = DecisionRecord(
        query_id=query_id, visited=tuple(visited), answering_model=visited[-1].model_id,
        answer=answer, correct=_resolve_correct(retained_obs, answer, query.gold_answer, config),
        gold_answer=query.gold_answer, factuality=retained_obs.factuality, notes=tuple(notes),
    )
    decision.validate()
    record = QueryTrace(query_id=query_id, prompt=query.prompt, task_kind=config.task_kind,
                        observations=observations, gold_answer=query.gold_answer,
                        choice_labels=query.choice_labels)
    return decision, record


# ---------------------------------------------------------------------------
# shared routing internals
# ---------------------------------------------------------------------------

def _route_one(observations: Mapping[str, ModelObservation], query: QueryTrace,
               config: CascadeConfig, probes: Mapping[str, PikModel],
               *, require_labels: bool) -> DecisionRecord:
    visited: list[StageVisit] = []
    retained_obs: ModelObservation | None = None
    final_answer = ""
    last_index = len(config.stages) - 1
    for i, policy in enumerate(config.stages):
        obs = observations.get(policy.model_id)
        if obs is None:
            raise RoutingError(
                f"query {query.query_id!r} has no observation for stage {policy.model_id!r}")
        is_final = i == last_index and config.final_stage_unconditional
        if is_final:
            p_ik = None
            if policy.use_pik and obs.hidden_state is not None and policy.model_id in probes:
                p_ik = pik_infer(probes[policy.model_id], obs.hidden_state)
            p_t, answer = _stage_confidence(obs, config, query.choice_labels, strict=False)
            visited.append(StageVisit(policy.model_id, p_ik, p_t, True, "final"))
            retained_obs, final_answer = obs, answer
            break
        d = decide_stage(obs, policy, config, probes.get(policy.model_id), query.choice_labels)
        visited.append(StageVisit(policy.model_id, d.p_ik, d.p_t, d.retain, d.gate))
        if d.retain:
            retained_obs, final_answer = obs, d.answer
            break
    if retained_obs is None:
        raise RoutingError(f"query {query.query_id!r}: no stage retained the answer "
                           f"(final stage is gated)")
    correct = _resolve_correct(retained_obs, final_answer, query.gold_answer, config)
    if require_labels and correct is None:
        raise RoutingError(f"query {query.query_id!r} has no resolvable correctness label")
    record = DecisionRecord(
        query_id=query.query_id, visited=tuple(visited),
        answering_model=visited[-1].model_id, answer=final_answer, correct=correct,
        gold_answer=query.gold_answer, factuality=retained_obs.factuality,
    )
    record.validate()
    return record


def _stage_confidence(obs: ModelObservation, config: CascadeConfig,
                      choice_labels: Sequence[str] | None,
                      *, strict: bool) -> tuple[float | None, str]:
    """P(T) and the stage's answer. strict raises on missing inputs; the
    lenient path (unconditional final stage) records None instead."""
    if config.task_kind == "multiple_choice":
        if not choice_labels:
            raise RoutingError("multiple_choice routing needs choice_labels")
        pt: PtResult = p_t_multiple_choice(obs.choice_dist, list(choice_labels))
        return pt.p_t, pt.chosen_label
    dist = obs.first_token_dist
    if dist is None or not config.answer_target_tokens:
        if strict:
            raise RoutingError(
                f"open_ended stage {obs.model_id!r} needs first_token_dist and target tokens")
        return None, obs.answer_text
    return p_t_first_token(dist, config.answer_target_tokens), obs.answer_text


def _resolve_correct(obs: ModelObservation, answer: str, gold: str | None,
                     config: CascadeConfig) -> bool | None:
    if obs.correct is not None:
        return obs.correct
    if config.task_kind == "multiple_choice" and gold is not None:
        return answer == gold
    return None


def _resolve_probes(config: CascadeConfig,
                    pik_registry: Mapping[str, PikModel] | None) -> dict[str, PikModel]:
    probes: dict[str, PikModel] = {}
    for policy in config.stages:
        if not policy.use_pik:
            continue
        if not pik_registry or policy.model_id not in pik_registry:
            raise RoutingError(
                f"stage {policy.model_id!r} gates on the probe but the registry has none for it")
        probes[policy.model_id] = pik_registry[policy.model_id]
    return probes
