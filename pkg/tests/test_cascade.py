"""Cascade routing: gate order, replay semantics, and live fallback."""

import numpy as np
import pytest

from conftest import make_mc_trace, oracle_gate, random_pik_model, two_stage_config

from confcascade.cascade import (
    DEFAULT_TAU_IK,
    DEFAULT_TAU_T,
    CascadeConfig,
    DecisionRecord,
    RouteQuery,
    RoutingError,
    StagePolicy,
    StageVisit,
    decide_stage,
    route_live,
    route_replay,
)
from confcascade.gateway.client import BackendError
from confcascade.probe import PikModel
from confcascade.trace import (
    ChoiceDistribution,
    ModelObservation,
    ModelSpec,
    QueryTrace,
    TraceFile,
    TraceHeader,
)

LABELS = ("A", "B", "C", "D")


def const_probe(dim, bias):
    """Probe whose output is sigmoid(bias) for every input."""
    return PikModel(layer_sizes=(dim, 1), weights=(np.zeros((dim, 1)),),
                    biases=(np.array([float(bias)]),))


def obs_for(model_id, pairs, hidden=None, correct=None, answer="A", first=None):
    return ModelObservation(
        model_id=model_id, answer_text=answer,
        choice_dist=ChoiceDistribution(tuple(pairs)),
        first_token_dist=None if first is None else ChoiceDistribution(tuple(first)),
        hidden_state=hidden, correct=correct, tokens_in=5, tokens_out=1)


class Script:
    """Scripted backend: maps a stage's endpoint to a canned observation
    or an exception, recording call order."""

    def __init__(self, responses):
        self.responses = responses
        self.calls = []

    def __call__(self, endpoint, prompt):
        self.calls.append(endpoint)
        result = self.responses[endpoint]
        if isinstance(result, Exception):
            raise result
        return result


BACKENDS = {"small": "small", "large": "large"}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def test_default_thresholds():
    policy = StagePolicy("m")
    assert policy.tau_t == DEFAULT_TAU_T == 0.9
    assert policy.tau_ik == DEFAULT_TAU_IK == 0.5


def test_policy_validation():
    with pytest.raises(RoutingError):
        StagePolicy("").validate()
    with pytest.raises(RoutingError):
        StagePolicy("m", tau_t=1.5).validate()
    with pytest.raises(RoutingError):
        StagePolicy("m", use_pik=True).validate()


def test_config_requires_stages():
    with pytest.raises(RoutingError):
        CascadeConfig(stages=()).validate()


def test_config_rejects_duplicate_stage():
    config = CascadeConfig(stages=(StagePolicy("m"), StagePolicy("m")))
    with pytest.raises(RoutingError):
        config.validate()


def test_open_ended_needs_targets():
    config = CascadeConfig(stages=(StagePolicy("m"),), task_kind="open_ended")
    with pytest.raises(RoutingError):
        config.validate()


def test_config_registry_checks():
    registry = {
        "small": ModelSpec("small", param_count=3),
        "large": ModelSpec("large", param_count=70),
        "api": ModelSpec("api", kind="api_only"),
    }
    two_stage_config().validate(registry)
    # api_only is legal only as the last stage
    CascadeConfig(stages=(StagePolicy("small"), StagePolicy("api"))).validate(registry)
    with pytest.raises(RoutingError):
        CascadeConfig(stages=(StagePolicy("api"), StagePolicy("small"))).validate(registry)
    # chain must ascend by known parameter counts
    with pytest.raises(RoutingError):
        CascadeConfig(stages=(StagePolicy("large"), StagePolicy("small"))).validate(registry)
    with pytest.raises(RoutingError):
        CascadeConfig(stages=(StagePolicy("ghost"),)).validate(registry)


def test_config_json_round_trip(tmp_path):
    config = CascadeConfig(
        stages=(StagePolicy("small", tau_t=0.7, use_pik=True, pik_model_ref="p.json"),
                StagePolicy("large", tau_ik=0.3)),
        task_kind="open_ended", answer_target_tokens=("Answer",),
    )
    assert CascadeConfig.from_json(config.to_json()) == config
    path = tmp_path / "config.json"
    config.save(path)
    assert CascadeConfig.load(path) == config


def test_config_load_rejects_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope", encoding="utf-8")
    with pytest.raises(RoutingError):
        CascadeConfig.load(path)


def test_with_tau_t_and_without_pik():
    config = two_stage_config(tau_t=0.9, use_pik=True)
    swept = config.with_tau_t(0.5)
    assert all(p.tau_t == 0.5 for p in swept.stages)
    assert [p.use_pik for p in swept.stages] == [p.use_pik for p in config.stages]
    ablated = config.without_pik()
    assert not any(p.use_pik for p in ablated.stages)


# ---------------------------------------------------------------------------
# decide_stage
# ---------------------------------------------------------------------------

def test_observation_stage_mismatch():
    config = two_stage_config()
    obs = obs_for("large", [("A", 0.95)])
    with pytest.raises(RoutingError):
        decide_stage(obs, config.stages[0], config, choice_labels=LABELS)


def test_probe_gate_runs_first():
    """P(IK) below threshold records fail_pik even when P(T) also fails."""
    config = two_stage_config(tau_t=0.9, use_pik=True)
    obs = obs_for("small", [("A", 0.2)], hidden=(0.0, 0.0))
    d = decide_stage(obs, config.stages[0], config, const_probe(2, -10.0), LABELS)
    assert (d.retain, d.gate) == (False, "fail_pik")
    assert d.p_ik < 0.5
    assert d.p_t == 0.2  # still recorded for diagnostics


def test_fail_pt_after_probe_passes():
    config = two_stage_config(tau_t=0.9, use_pik=True)
    obs = obs_for("small", [("A", 0.2)], hidden=(0.0, 0.0))
    d = decide_stage(obs, config.stages[0], config, const_probe(2, 10.0), LABELS)
    assert (d.retain, d.gate) == (False, "fail_pt")
    assert d.p_ik > 0.99


def test_pass_when_both_gates_clear():
    config = two_stage_config(tau_t=0.9, use_pik=True)
    obs = obs_for("small", [("A", 0.95)], hidden=(0.0, 0.0))
    d = decide_stage(obs, config.stages[0], config, const_probe(2, 10.0), LABELS)
    assert (d.retain, d.gate, d.answer) == (True, "pass", "A")
    assert d.p_t == 0.95


def test_no_probe_records_none():
    config = two_stage_config(tau_t=0.5)
    d = decide_stage(obs_for("small", [("B", 0.7)]), config.stages[0], config,
                     choice_labels=LABELS)
    assert d.p_ik is None
    assert (d.retain, d.answer) == (True, "B")


def test_thresholds_are_inclusive():
    """p_t == tau_t and p_ik == tau_ik both clear their gates."""
    config = two_stage_config(tau_t=0.25, use_pik=True)
    obs = obs_for("small", [(l, 0.25) for l in LABELS], hidden=(0.0, 0.0))
    # zero probe emits exactly 0.5 == tau_ik
    d = decide_stage(obs, config.stages[0], config, const_probe(2, 0.0), LABELS)
    assert (d.retain, d.gate) == (True, "pass")
    assert d.p_ik == 0.5 and d.p_t == 0.25


def test_probe_needs_hidden_state():
    config = two_stage_config(use_pik=True)
    obs = obs_for("small", [("A", 0.95)])
    with pytest.raises(RoutingError):
        decide_stage(obs, config.stages[0], config, const_probe(2, 0.0), LABELS)


def test_probe_gate_without_probe_supplied():
    config = two_stage_config(use_pik=True)
    obs = obs_for("small", [("A", 0.95)], hidden=(0.0, 0.0))
    with pytest.raises(RoutingError):
        decide_stage(obs, config.stages[0], config, None, LABELS)


def test_missing_labels_rejected():
    config = two_stage_config()
    with pytest.raises(RoutingError):
        decide_stage(obs_for("small", [("A", 0.95)]), config.stages[0], config)


def test_open_ended_gate_sums_targets():
    config = CascadeConfig(stages=(StagePolicy("small", tau_t=0.7), StagePolicy("large")),
                           task_kind="open_ended", answer_target_tokens=("Answer",))
    obs = obs_for("small", [("x", 0.1)], answer="Paris",
                  first=[("Answer", 0.5), (" Answer", 0.3)])
    d = decide_stage(obs, config.stages[0], config)
    assert d.retain and d.answer == "Paris"
    assert d.p_t == pytest.approx(0.8, abs=1e-12)


def test_open_ended_gate_requires_first_token_dist():
    config = CascadeConfig(stages=(StagePolicy("small"), StagePolicy("large")),
                           task_kind="open_ended", answer_target_tokens=("Answer",))
    with pytest.raises(RoutingError):
        decide_stage(obs_for("small", [("x", 0.1)], answer="Paris"),
                     config.stages[0], config)


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

def replay_trace(seed=1, n=40, use_pik=False, hidden_dim=None):
    dims = {"small": hidden_dim} if hidden_dim else None
    return make_mc_trace(seed, n, ("small", "large"), (3_000_000_000, 70_000_000_000),
                         hidden_dims=dims)


def test_tau_zero_retains_everything_at_first_stage():
    trace = replay_trace()
    decisions = route_replay(trace, two_stage_config(tau_t=0.0))
    assert all(d.answering_model == "small" for d in decisions)
    assert all(d.visited[0].gate == "pass" for d in decisions)


def test_tau_one_escalates_everything():
    # synthetic distributions keep total mass below 1, so p_t < 1 always
    trace = replay_trace()
    decisions = route_replay(trace, two_stage_config(tau_t=1.0))
    assert all(d.answering_model == "large" for d in decisions)
    assert all(d.visited[0].gate == "fail_pt" for d in decisions)
    assert all(d.visited[-1].gate == "final" for d in decisions)


def test_final_stage_is_unconditional():
    trace = replay_trace()
    config = two_stage_config(tau_t=1.0)
    for d in route_replay(trace, config):
        assert d.visited[-1].retained
        assert d.visited[-1].gate == "final"


def test_replay_preserves_query_order():
    trace = replay_trace(n=25)
    decisions = route_replay(trace, two_stage_config())
    assert [d.query_id for d in decisions] == [r.query_id for r in trace.records]


def test_replay_requires_every_stage_observation():
    trace = replay_trace(n=3)
    stripped = []
    for i, record in enumerate(trace.records):
        observations = dict(record.observations)
        if i == 1:
            observations.pop("large")
        stripped.append(QueryTrace(query_id=record.query_id, prompt=record.prompt,
                                   task_kind=record.task_kind, observations=observations,
                                   gold_answer=record.gold_answer,
                                   choice_labels=record.choice_labels))
    broken = TraceFile(header=trace.header, records=stripped)
    with pytest.raises(RoutingError) as err:
        route_replay(broken, two_stage_config(tau_t=1.0))
    assert "large" in str(err.value)


def test_replay_validates_config_against_header():
    trace = replay_trace(n=2)
    config = CascadeConfig(stages=(StagePolicy("small"), StagePolicy("ghost")))
    with pytest.raises(RoutingError):
        route_replay(trace, config)


def test_replay_uses_probe_registry():
    trace = replay_trace(use_pik=True, hidden_dim=6)
    config = two_stage_config(use_pik=True)
    with pytest.raises(RoutingError):
        route_replay(trace, config)  # no registry supplied
    probe = const_probe(6, -10.0)
    decisions = route_replay(trace, config, {"small": probe})
    assert all(d.visited[0].gate == "fail_pik" for d in decisions)
    assert all(d.answering_model == "large" for d in decisions)


def test_correctness_copied_from_observation():
    trace = replay_trace(n=30)
    decisions = route_replay(trace, two_stage_config(tau_t=0.0))
    for d, record in zip(decisions, trace.records):
        assert d.correct == record.observations["small"].correct


def test_correctness_falls_back_to_gold_match():
    header = TraceHeader(models=(ModelSpec("small", param_count=3),
                                 ModelSpec("large", param_count=70)),
                         hidden_dims={}, dataset_name="t")
    records = [QueryTrace(
        query_id="q0", prompt="p", task_kind="multiple_choice",
        observations={"small": obs_for("small", [("B", 0.99)], answer="B"),
                      "large": obs_for("large", [("A", 0.99)], answer="A")},
        gold_answer="B", choice_labels=LABELS)]
    trace = TraceFile(header=header, records=records)
    d = route_replay(trace, two_stage_config(tau_t=0.9))[0]
    assert d.answering_model == "small"
    assert d.answer == "B"
    assert d.correct is True


def test_require_labels_rejects_unresolvable():
    header = TraceHeader(models=(ModelSpec("small", param_count=3),
                                 ModelSpec("large", param_count=70)),
                         hidden_dims={}, dataset_name="t")
    records = [QueryTrace(
        query_id="q0", prompt="p", task_kind="multiple_choice",
        observations={"small": obs_for("small", [("B", 0.99)], answer="B"),
                      "large": obs_for("large", [("A", 0.99)], answer="A")},
        choice_labels=LABELS)]
    trace = TraceFile(header=header, records=records)
    config = two_stage_config(tau_t=0.9)
    assert route_replay(trace, config)[0].correct is None
    with pytest.raises(RoutingError):
        route_replay(trace, config, require_labels=True)


def test_replay_matches_oracle_gate(rng):
    """Replay decisions equal an independent gate evaluation, bit for bit."""
    for seed in range(10):
        probe = random_pik_model(np.random.default_rng(seed + 500), input_dim=12)
        trace = make_mc_trace(seed, 30, ("small", "large"),
                              (3_000_000_000, 70_000_000_000),
                              hidden_dims={"small": 12})
        tau_t, tau_ik = 0.6, 0.5
        config = CascadeConfig(stages=(
            StagePolicy("small", tau_t=tau_t, tau_ik=tau_ik, use_pik=True,
                        pik_model_ref="probe"),
            StagePolicy("large", tau_t=tau_t)))
        decisions = route_replay(trace, config, {"small": probe})
        for d, record in zip(decisions, trace.records):
            retain, gate, p_ik, p_t, answer = oracle_gate(
                record.observations["small"], LABELS, tau_t, tau_ik, probe)
            first = d.visited[0]
            assert (first.retained, first.gate) == (retain, gate)
            assert first.p_ik == p_ik and first.p_t == p_t
            if retain:
                assert d.answering_model == "small" and d.answer == answer
            else:
                _, _, _, p_t_large, answer_large = oracle_gate(
                    record.observations["large"], LABELS, 0.0, 0.0, None)
                assert d.answering_model == "large"
                assert d.answer == answer_large
                assert d.visited[1].p_t == p_t_large


# ---------------------------------------------------------------------------
# decision records
# ---------------------------------------------------------------------------

def test_decision_record_round_trip():
    record = DecisionRecord(
        query_id="q1",
        visited=(StageVisit("small", 0.4, 0.95, False, "fail_pik"),
                 StageVisit("large", None, 0.5, True, "final")),
        answering_model="large", answer="C", correct=False, gold_answer="B",
        factuality="incorrect", notes=("stage x skipped: boom",))
    record.validate()
    assert DecisionRecord.from_json(record.to_json()) == record


def test_decision_record_requires_last_retained():
    with pytest.raises(RoutingError):
        DecisionRecord(query_id="q", visited=(
            StageVisit("small", None, 0.99, True, "pass"),
            StageVisit("large", None, 0.5, True, "final")),
            answering_model="large", answer="A").validate()
    with pytest.raises(RoutingError):
        DecisionRecord(query_id="q", visited=(
            StageVisit("small", None, 0.2, False, "fail_pt"),),
            answering_model="small", answer="A").validate()


def test_decision_record_escalation_gates_checked():
    with pytest.raises(RoutingError):
        DecisionRecord(query_id="q", visited=(
            StageVisit("small", None, 0.99, False, "pass"),
            StageVisit("large", None, 0.5, True, "final")),
            answering_model="large", answer="A").validate()


def test_decision_record_answering_model_must_match():
    with pytest.raises(RoutingError):
        DecisionRecord(query_id="q", visited=(
            StageVisit("large", None, 0.5, True, "final"),),
            answering_model="small", answer="A").validate()


# ---------------------------------------------------------------------------
# live routing
# ---------------------------------------------------------------------------

def live_query():
    return RouteQuery(prompt="pick one", query_id="q-live", choice_labels=LABELS,
                      gold_answer="A")


def test_live_short_circuits_on_pass():
    script = Script({"small": obs_for("small", [("A", 0.95)], correct=True),
                     "large": obs_for("large", [("A", 0.99)])})
    decision, record = route_live(live_query(), two_stage_config(tau_t=0.9),
                                  BACKENDS, complete=script)
    assert script.calls == ["small"]
    assert decision.answering_model == "small"
    assert decision.answer == "A" and decision.correct is True
    assert set(record.observations) == {"small"}


def test_live_escalates_to_final():
    script = Script({"small": obs_for("small", [("A", 0.2)]),
                     "large": obs_for("large", [("B", 0.4)], answer="B")})
    decision, record = route_live(live_query(), two_stage_config(tau_t=0.9),
                                  BACKENDS, complete=script)
    assert script.calls == ["small", "large"]
    assert decision.answering_model == "large"
    assert decision.visited[0].gate == "fail_pt"
    assert decision.visited[1].gate == "final"
    assert decision.answer == "B"
    assert set(record.observations) == {"small", "large"}


def test_live_skips_failed_stage_under_escalate():
    script = Script({"small": BackendError("boom", stage="small"),
                     "large": obs_for("large", [("A", 0.99)])})
    decision, record = route_live(live_query(), two_stage_config(tau_t=0.9),
                                  BACKENDS, complete=script, fallback="escalate")
    assert decision.answering_model == "large"
    assert len(decision.visited) == 1
    assert decision.notes and "small" in decision.notes[0]
    assert "small" not in record.observations


def test_live_abort_raises_with_cause():
    script = Script({"small": BackendError("boom", stage="small"),
                     "large": obs_for("large", [("A", 0.99)])})
    with pytest.raises(RoutingError) as err:
        route_live(live_query(), two_stage_config(tau_t=0.9), BACKENDS,
                   complete=script, fallback="abort")
    assert isinstance(err.value.__cause__, BackendError)


def test_live_final_stage_failure_always_raises():
    script = Script({"small": obs_for("small", [("A", 0.2)]),
                     "large": BackendError("down", stage="large")})
    with pytest.raises(RoutingError):
        route_live(live_query(), two_stage_config(tau_t=0.9), BACKENDS,
                   complete=script, fallback="escalate")


def test_live_unknown_fallback_rejected():
    with pytest.raises(RoutingError):
        route_live(live_query(), two_stage_config(), BACKENDS,
                   complete=Script({}), fallback="retry")


def test_live_requires_backend_per_stage():
    with pytest.raises(RoutingError):
        route_live(live_query(), two_stage_config(), {"small": "small"},
                   complete=Script({}))


def test_live_multiple_choice_needs_labels():
    query = RouteQuery(prompt="pick", query_id="q")
    with pytest.raises(RoutingError):
        route_live(query, two_stage_config(), BACKENDS, complete=Script({}))


def test_live_generates_query_id_when_blank():
    script = Script({"small": obs_for("small", [("A", 0.95)]),
                     "large": obs_for("large", [("A", 0.99)])})
    query = RouteQuery(prompt="pick", choice_labels=LABELS)
    decision, record = route_live(query, two_stage_config(tau_t=0.9), BACKENDS,
                                  complete=script)
    assert decision.query_id.startswith("live-")
    assert decision.query_id == record.query_id


def test_live_agrees_with_replay(rng):
    """Routing the recorded observations live reproduces the replay decisions."""
    trace = replay_trace(seed=9, n=20)
    config = two_stage_config(tau_t=0.8)
    replayed = route_replay(trace, config)
    for record, want in zip(trace.records, replayed):
        script = Script({mid: obs for mid, obs in record.observations.items()})
        query = RouteQuery(prompt=record.prompt, query_id=record.query_id,
                           choice_labels=record.choice_labels,
                           gold_answer=record.gold_answer)
        got, _ = route_live(query, config, BACKENDS, complete=script)
        assert got.visited == want.visited
        assert got.answering_model == want.answering_model
        assert got.answer == want.answer
        assert got.correct == want.correct
