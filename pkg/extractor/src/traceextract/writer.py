"""Trace emission: line-delimited JSON, header first, validated records.

This is an independent implementation of the routing trace wire format
(format_version "1"): the header carries models, hidden_dims, and
dataset_name; each following line is one query record with per-model
observations. Every record is checked against the format rules and the
header before it reaches the file, so a finished trace always validates.
"""

from __future__ import annotations

import json
from pathlib import Path

from .job import ExtractError

PROB_SUM_TOL = 1e-9


def build_header(model_id: str, param_count: int, n_layer: int, d_model: int,
                 dataset_name: str) -> dict:
    return {
        "format_version": "1",
        "models": [{"model_id": model_id, "kind": "open_weights",
                    "param_count": param_count, "n_layer": n_layer,
                    "d_model": d_model, "price_in": 0.0, "price_out": 0.0}],
        "hidden_dims": {model_id: d_model},
        "dataset_name": dataset_name,
    }


def check_dist(entries: list, field: str) -> None:
    seen = set()
    total = 0.0
    for pair in entries:
        if not isinstance(pair, list) or len(pair) != 2:
            raise ExtractError(f"{field}: entries must be [token, probability] pairs")
        token, prob = pair
        if not isinstance(token, str) or not isinstance(prob, float):
            raise ExtractError(f"{field}: entries must be [string, float] pairs")
        if not 0.0 <= prob <= 1.0:
            raise ExtractError(f"{field}: probability {prob!r} for {token!r} outside [0, 1]")
        if token in seen:
            raise ExtractError(f"{field}: duplicate token {token!r}")
        seen.add(token)
        total += prob
    if total > 1.0 + PROB_SUM_TOL:
        raise ExtractError(f"{field}: probabilities sum to {total!r} > 1")


def check_record(record: dict, header: dict) -> None:
    for key in ("query_id", "prompt", "task_kind", "observations"):
        if not record.get(key):
            raise ExtractError(f"record missing {key!r}")
    if record["task_kind"] == "multiple_choice" and not record.get("choice_labels"):
        raise ExtractError(f"record {record['query_id']!r}: multiple_choice needs choice_labels")
    known = {m["model_id"] for m in header["models"]}
    dims = header["hidden_dims"]
    for model_id, obs in record["observations"].items():
        if model_id not in known:
            raise ExtractError(f"record {record['query_id']!r}: model {model_id!r} not in header")
        if obs["model_id"] != model_id:
            raise ExtractError(f"record {record['query_id']!r}: observation key/model_id mismatch")
        check_dist(obs["choice_dist"], "choice_dist")
        if obs.get("first_token_dist") is not None:
            check_dist(obs["first_token_dist"], "first_token_dist")
        if obs["tokens_in"] < 0 or obs["tokens_out"] < 0:
            raise ExtractError(f"record {record['query_id']!r}: negative token count")
        if obs["answer_text"] and obs["tokens_in"] + obs["tokens_out"] <= 0:
            raise ExtractError(f"record {record['query_id']!r}: answer text but zero tokens")
        hidden = obs.get("hidden_state")
        if hidden is not None:
            declared = dims.get(model_id)
            if declared is None:
                raise ExtractError(
                    f"record {record['query_id']!r}: hidden state for undeclared model {model_id!r}")
            if len(hidden) != declared:
                raise ExtractError(
                    f"record {record['query_id']!r}: hidden length {len(hidden)} != declared {declared}")


class TraceEmitter:
    """Streaming writer; append mode resumes an existing compatible trace."""

    def __init__(self, path: str | Path, header: dict, append: bool = False):
        self.path = Path(path)
        self.header = header
        self.existing = 0
        if append and self.path.exists():
            self.existing = self._check_resumable()
            self._fh = self.path.open("a", encoding="utf-8")
        else:
            self._fh = self.path.open("w", encoding="utf-8")
            self._fh.write(json.dumps(header, ensure_ascii=False) + "\n")

    def _check_resumable(self) -> int:
        with self.path.open(encoding="utf-8") as fh:
            first = fh.readline()
            try:
                old = json.loads(first)
            except json.JSONDecodeError:
                raise ExtractError(f"{self.path}: existing file has no valid header") from None
            if old != self.header:
                raise ExtractError(
                    f"{self.path}: existing header differs from this job's; "
                    f"write to a fresh file instead of resuming")
            return sum(1 for line in fh if line.strip())

    def append_record(self, record: dict) -> None:
        check_record(record, self.header)
        self._fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TraceEmitter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
