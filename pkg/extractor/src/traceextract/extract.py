"""Run an extraction job: one observation per dataset row, streamed out.

Per query: format the prompt, run a single forward pass, and record the
top-K first-token probabilities, the probability of each choice label's
answer token, the hidden state at the last prompt token from the job's
layer, the greedy answer, correctness against gold, and token counts.
A sidecar <out>.meta.json records the full job for provenance, including
the decoding fields (selection itself is always greedy).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .job import (
    DatasetRow,
    ExtractError,
    ExtractionJob,
    canonical,
    choice_labels,
    format_prompt,
    read_dataset,
)
from .model import CheckpointError, TinyGPT, softmax
from .writer import TraceEmitter, build_header

OPEN_ENDED_MAX_NEW = 16


@dataclass(frozen=True)
class ExtractReport:
    out_path: str
    n_written: int
    n_resumed: int
    model_id: str
    dataset_name: str


def extract(job: ExtractionJob, merge_labels: dict[str, bool] | None = None) -> ExtractReport:
    """Execute the job; returns what was written where.

    merge_labels maps query_id -> correct and overrides computed
    correctness (for labels graded outside this tool).
    """
    job.validate()
    model = TinyGPT.load(job.model_ref)
    if job.layer_index > model.n_layer:
        raise ExtractError(
            f"layer_index {job.layer_index} exceeds model depth {model.n_layer} "
            f"(layers are 1-based; no forward pass was run)")
    rows = read_dataset(job.dataset_path, job.task_kind)
    if job.start_index >= len(rows):
        raise ExtractError(
            f"start_index {job.start_index} is past the dataset end ({len(rows)} rows)")
    stop = len(rows) if job.max_queries is None else min(
        len(rows), job.start_index + job.max_queries)
    dataset_name = Path(job.dataset_path).stem
    header = build_header(model.model_id, model.param_count, model.n_layer,
                          model.d_model, dataset_name)
    _write_meta(job, model)
    written = 0
    with TraceEmitter(job.out_path, header, append=job.start_index > 0) as emitter:
        for i in range(job.start_index, stop):
            try:
                record = _observe(job, model, rows[i])
            except MemoryError:
                raise ExtractError(
                    f"out of memory at query index {i} ({rows[i].query_id!r}); "
                    f"resume with --start-index {i}") from None
            except CheckpointError as exc:
                raise ExtractError(
                    f"query index {i} ({rows[i].query_id!r}): {exc}") from None
            if merge_labels is not None and rows[i].query_id in merge_labels:
                record["observations"][model.model_id]["correct"] = bool(
                    merge_labels[rows[i].query_id])
            emitter.append_record(record)
            written += 1
        resumed = emitter.existing
    return ExtractReport(out_path=str(job.out_path), n_written=written,
                         n_resumed=resumed, model_id=model.model_id,
                         dataset_name=dataset_name)


def _observe(job: ExtractionJob, model: TinyGPT, row: DatasetRow) -> dict:
    prompt = format_prompt(job, row)
    ids = model.tokenizer.encode(prompt)
    started = time.monotonic()
    logits, hidden = model.forward(ids, capture_layer=job.layer_index)
    probs = softmax(logits)
    first_token_dist = _top_k_dist(model, probs, job.top_k)
    answer_id = int(np.argmax(probs))
    answer_text = model.tokenizer.token_text(answer_id)
    tokens_out = 1
    obs: dict = {"model_id": model.model_id}
    if job.task_kind == "multiple_choice":
        labels = choice_labels(len(row.choices))
        obs["choice_dist"] = [[lab, float(probs[_label_token(model, lab)])]
                              for lab in labels]
        correct = None if row.gold is None else (canonical(answer_text) == row.gold)
    else:
        rest = model.greedy_continue(ids + [answer_id], OPEN_ENDED_MAX_NEW - 1)
        answer_text = model.tokenizer.decode([answer_id] + rest)
        tokens_out = 1 + len(rest)
        obs["choice_dist"] = first_token_dist
        correct = None
        labels = None
    obs.update({
        "answer_text": answer_text,
        "first_token_dist": first_token_dist,
        "hidden_state": [float(x) for x in hidden],
        "tokens_in": len(ids),
        "tokens_out": tokens_out,
        "latency_ms": round((time.monotonic() - started) * 1000.0, 3),
    })
    if correct is not None:
        obs["correct"] = correct
    record = {
        "query_id": row.query_id,
        "prompt": prompt,
        "task_kind": job.task_kind,
        "observations": {model.model_id: obs},
    }
    if row.gold is not None:
        record["gold_answer"] = row.gold
    if labels is not None:
        record["choice_labels"] = list(labels)
    return record


def _top_k_dist(model: TinyGPT, probs: np.ndarray, k: int) -> list:
    # vocab strings, not decoded bytes: distinct ids can decode to the
    # same replacement character, and the dist may not repeat a token
    order = np.argsort(-probs, kind="stable")[:k]
    return [[model.tokenizer.token_string(int(t)), float(probs[t])] for t in order]


def _label_token(model: TinyGPT, label: str) -> int:
    """Token id whose probability stands for answering with this label.

    Prefers the space-prefixed form (" B") when the tokenizer merges it
    into a distinguishing token; falls back to the bare label's first
    token, which is distinct across single-letter labels.
    """
    spaced = model.tokenizer.encode(" " + label)
    if spaced and model.tokenizer.token_text(spaced[0]).strip() == label:
        return spaced[0]
    bare = model.tokenizer.encode(label)
    if not bare:
        raise ExtractError(f"label {label!r} does not tokenize")
    return bare[0]


def _write_meta(job: ExtractionJob, model: TinyGPT) -> None:
    meta = {"job": job.to_json(),
            "model": {"model_id": model.model_id, "n_layer": model.n_layer,
                      "d_model": model.d_model, "param_count": model.param_count}}
    Path(str(job.out_path) + ".meta.json").write_text(
        json.dumps(meta, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
