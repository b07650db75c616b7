"""Shared builders for synthetic traces, probes, and scripted backends."""

from __future__ import annotations

import math

import numpy as np
import pytest

from confcascade import (CascadeConfig, ChoiceDistribution, ModelObservation, ModelSpec,
                         PikModel, QueryTrace, StagePolicy, TraceFile, TraceHeader)

LABELS = ("A", "B", "C", "D")

# presentation variants a tokenizer might emit for a label
_VARIANTS = ("{}", " {}", "({})", "{} ")
_NOISE_TOKENS = ("the", "I", "Answer", " maybe")


def make_choice_dist(rng: np.random.Generator, labels=LABELS, peak: float | None = None,
                     peak_label: str | None = None) -> ChoiceDistribution:
    """Random distribution over label variants plus noise tokens, mass < 1."""
    if peak_label is None:
        peak_label = labels[rng.integers(len(labels))]
    raw = {}
    for label in labels:
        variant = _VARIANTS[rng.integers(len(_VARIANTS))].format(label)
        raw[variant] = float(rng.uniform(0.05, 1.0))
    for noise in _NOISE_TOKENS[: rng.integers(0, 3)]:
        raw[noise] = float(rng.uniform(0.01, 0.3))
    total = sum(raw.values())
    mass = float(rng.uniform(0.7, 0.995))
    entries = {tok: v / total * mass for tok, v in raw.items()}
    if peak is not None:
        # force the peak label's entry to dominate with the requested mass
        peak_token = next(tok for tok in entries if tok.strip().strip("()").strip() == peak_label)
        others = [tok for tok in entries if tok != peak_token]
        remaining = max(0.0, mass - peak)
        other_total = sum(entries[tok] for tok in others) or 1.0
        entries = {tok: entries[tok] / other_total * remaining for tok in others}
        entries[peak_token] = peak
    return ChoiceDistribution(entries=tuple(entries.items()))


def make_mc_trace(seed: int, n_queries: int, model_ids, param_counts,
                  *, labels=LABELS, hidden_dims: dict | None = None,
                  dataset_name: str = "synthetic") -> TraceFile:
    """Synthetic multiple-choice trace with per-model observations for every query."""
    rng = np.random.default_rng(seed)
    hidden_dims = hidden_dims or {}
    specs = tuple(ModelSpec(mid, param_count=int(pc))
                  for mid, pc in zip(model_ids, param_counts))
    header = TraceHeader(models=specs, hidden_dims=hidden_dims, dataset_name=dataset_name)
    records = []
    for i in range(n_queries):
        gold = labels[rng.integers(len(labels))]
        observations = {}
        for mid in model_ids:
            dist = make_choice_dist(rng, labels)
            hidden = None
            if mid in hidden_dims:
                hidden = tuple(float(v) for v in rng.normal(size=hidden_dims[mid]))
            observations[mid] = ModelObservation(
                model_id=mid,
                answer_text=gold,
                choice_dist=dist,
                hidden_state=hidden,
                correct=bool(rng.uniform() < 0.6),
                tokens_in=int(rng.integers(5, 60)),
                tokens_out=int(rng.integers(1, 8)),
            )
        records.append(QueryTrace(
            query_id=f"q{i:05d}", prompt=f"question {i}", task_kind="multiple_choice",
            observations=observations, gold_answer=gold, choice_labels=tuple(labels)))
    trace = TraceFile(header=header, records=records)
    trace.validate()
    return trace


def random_pik_model(rng: np.random.Generator, input_dim: int, width: int = 8) -> PikModel:
    """Probe with random (untrained) weights; gating behavior is all tests need."""
    return PikModel(
        layer_sizes=(input_dim, width, 1),
        weights=(rng.normal(size=(input_dim, width)) * 0.5,
                 rng.normal(size=(width, 1)) * 0.5),
        biases=(rng.normal(size=width) * 0.1, rng.normal(size=1) * 0.1),
    )


def two_stage_config(tau_t: float = 0.9, *, use_pik: bool = False,
                     small: str = "small", large: str = "large") -> CascadeConfig:
    return CascadeConfig(stages=(
        StagePolicy(small, tau_t=tau_t, use_pik=use_pik,
                    pik_model_ref="probe" if use_pik else None),
        StagePolicy(large),
    ))


def canonical(token: str) -> str:
    """Independent re-statement of the token canonicalization rule for oracles."""
    token = token.strip()
    if len(token) >= 2 and token[0] == "(" and token[-1] == ")":
        token = token[1:-1]
    return token.strip()


def oracle_gate(obs: ModelObservation, labels, tau_t: float, tau_ik: float,
                probe: PikModel | None):
    """Brute-force one-stage gate evaluation, independent of the engine.

    Returns (retain, gate, p_ik, p_t, answer) using a linear scan over the
    distribution and an explicitly written-out MLP forward pass.
    """
    p_ik = None
    if probe is not None:
        x = np.asarray(obs.hidden_state, dtype=np.float64)
        h = np.maximum(x @ probe.weights[0] + probe.biases[0], 0.0)
        z = (h @ probe.weights[1] + probe.biases[1])[0]
        if z >= 0:
            p_ik = float(1.0 / (1.0 + np.exp(-z)))
        else:
            expz = np.exp(z)
            p_ik = float(expz / (1.0 + expz))
    labels = list(labels)
    best_label, best_p, matched = labels[0], 0.0, False
    for token, prob in obs.choice_dist.entries:
        name = canonical(token)
        if name not in labels:
            continue
        if not matched:
            best_label, best_p, matched = name, prob, True
        elif prob > best_p or (prob == best_p
                               and labels.index(name) < labels.index(best_label)):
            best_label, best_p = name, prob
    p_t = best_p if matched else 0.0
    answer = best_label
    if p_ik is not None and p_ik < tau_ik:
        return False, "fail_pik", p_ik, p_t, answer
    if p_t < tau_t:
        return False, "fail_pt", p_ik, p_t, answer
    return True, "pass", p_ik, p_t, answer


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
