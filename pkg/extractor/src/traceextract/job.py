"""Extraction job description, dataset loading, and prompt formatting.

A dataset row is (query_id, subject, question, choices, gold). JSONL
carries those field names directly; CSV uses the same column names with
choices joined by "||". gold names a choice label ("A", "B", ...) and is
optional; without it correctness stays unset.
"""

from __future__ import annotations

import csv
import json
import string
from dataclasses import dataclass, field
from pathlib import Path


class ExtractError(ValueError):
    """Anything that stops an extraction job, with the cause named."""


@dataclass(frozen=True)
class DecodingSpec:
    """Recorded for provenance; selection is always greedy."""

    greedy: bool = True
    top_p: float = 0.9
    temperature: float = 1.0


@dataclass(frozen=True)
class DatasetRow:
    query_id: str
    question: str
    subject: str = ""
    choices: tuple[str, ...] = ()
    gold: str | None = None


@dataclass(frozen=True)
class ExtractionJob:
    """What to extract: checkpoint, dataset, prompt shape, and layer.

    layer_index is 1-based: 24 means the 24th transformer block's output,
    counting the first block as 1. Jobs against shallower models fail
    before any forward pass rather than clamping.
    """

    model_ref: str
    dataset_path: str
    out_path: str
    task_kind: str = "multiple_choice"
    prompt_template: str = ("The following are multiple choice questions about {subject}.\n"
                            "{question}\n{choices}\nAnswer:")
    layer_index: int = 24
    hidden_position: str = "last_prompt_token"
    max_queries: int | None = None
    start_index: int = 0
    top_k: int = 20
    decoding: DecodingSpec = field(default_factory=DecodingSpec)

    def validate(self) -> None:
        if self.task_kind not in ("multiple_choice", "open_ended"):
            raise ExtractError(f"unknown task_kind {self.task_kind!r}")
        if self.layer_index < 1:
            raise ExtractError("layer_index is 1-based and must be >= 1")
        if self.hidden_position != "last_prompt_token":
            raise ExtractError(f"unsupported hidden_position {self.hidden_position!r}")
        if self.start_index < 0:
            raise ExtractError("start_index must be >= 0")
        if self.max_queries is not None and self.max_queries < 1:
            raise ExtractError("max_queries must be >= 1")
        if self.top_k < 1:
            raise ExtractError("top_k must be >= 1")
        if "{question}" not in self.prompt_template:
            raise ExtractError("prompt template must contain a {question} slot")
        if self.task_kind == "multiple_choice" and "{choices}" not in self.prompt_template:
            raise ExtractError("multiple_choice template must contain a {choices} slot")
        allowed = {"subject", "question", "choices"}
        for _, name, _, _ in string.Formatter().parse(self.prompt_template):
            if name is not None and name not in allowed:
                raise ExtractError(f"unknown template slot {{{name}}}")

    def to_json(self) -> dict:
        return {
            "model_ref": self.model_ref,
            "dataset_path": self.dataset_path,
            "out_path": self.out_path,
            "task_kind": self.task_kind,
            "prompt_template": self.prompt_template,
            "layer_index": self.layer_index,
            "hidden_position": self.hidden_position,
            "max_queries": self.max_queries,
            "start_index": self.start_index,
            "top_k": self.top_k,
            "decoding": {"greedy": self.decoding.greedy,
                         "top_p": self.decoding.top_p,
                         "temperature": self.decoding.temperature},
        }


def choice_labels(n: int) -> tuple[str, ...]:
    if not 2 <= n <= 26:
        raise ExtractError(f"need 2..26 choices, got {n}")
    return tuple(string.ascii_uppercase[:n])


def format_choices(labels: tuple[str, ...], choices: tuple[str, ...]) -> str:
    return "\n".join(f"{lab}. {text}" for lab, text in zip(labels, choices))


def format_prompt(job: ExtractionJob, row: DatasetRow) -> str:
    slots = {"subject": row.subject, "question": row.question, "choices": ""}
    if row.choices:
        slots["choices"] = format_choices(choice_labels(len(row.choices)), row.choices)
    return job.prompt_template.format(**slots)


def canonical(token: str) -> str:
    """Answer-token normal form: strip, peel one pair of parens, strip."""
    token = token.strip()
    if len(token) >= 2 and token[0] == "(" and token[-1] == ")":
        token = token[1:-1]
    return token.strip()


# ---------------------------------------------------------------------------
# dataset readers
# ---------------------------------------------------------------------------

def read_dataset(path: str | Path, task_kind: str) -> list[DatasetRow]:
    """Rows from JSONL (suffix .jsonl/.json) or CSV, validated per task."""
    path = Path(path)
    try:
        if path.suffix.lower() in (".jsonl", ".json"):
            rows = _read_jsonl(path)
        elif path.suffix.lower() == ".csv":
            rows = _read_csv(path)
        else:
            raise ExtractError(f"dataset {path} must be .jsonl or .csv")
    except OSError as exc:
        raise ExtractError(f"cannot read dataset {path}: {exc}") from None
    if not rows:
        raise ExtractError(f"dataset {path} holds no rows")
    return [_check_row(row, i, task_kind) for i, row in enumerate(rows)]


def _read_jsonl(path: Path) -> list[DatasetRow]:
    rows = []
    with path.open(encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExtractError(f"{path} row {i}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ExtractError(f"{path} row {i}: expected an object")
            choices = obj.get("choices") or ()
            if choices and (not isinstance(choices, list)
                            or not all(isinstance(c, str) for c in choices)):
                raise ExtractError(f"{path} row {i}: choices must be a list of strings")
            rows.append(DatasetRow(
                query_id=str(obj.get("query_id") or f"q{i:05d}"),
                question=str(obj.get("question") or ""),
                subject=str(obj.get("subject") or ""),
                choices=tuple(choices),
                gold=None if obj.get("gold") in (None, "") else str(obj["gold"]),
            ))
    return rows


def _read_csv(path: Path) -> list[DatasetRow]:
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        for i, rec in enumerate(csv.DictReader(fh)):
            choices = tuple(c for c in (rec.get("choices") or "").split("||") if c)
            rows.append(DatasetRow(
                query_id=str(rec.get("query_id") or f"q{i:05d}"),
                question=rec.get("question") or "",
                subject=rec.get("subject") or "",
                choices=choices,
                gold=(rec.get("gold") or None),
            ))
    return rows


def _check_row(row: DatasetRow, index: int, task_kind: str) -> DatasetRow:
    if not row.question:
        raise ExtractError(f"row {index} ({row.query_id!r}): missing question")
    if task_kind == "multiple_choice":
        labels = choice_labels(len(row.choices)) if len(row.choices) >= 2 else ()
        if len(row.choices) < 2:
            raise ExtractError(f"row {index} ({row.query_id!r}): needs at least 2 choices")
        if row.gold is not None and row.gold not in labels:
            raise ExtractError(
                f"row {index} ({row.query_id!r}): gold {row.gold!r} is not one of {list(labels)}")
    return row
