"""Shared data model and line-delimited JSON trace IO.

A trace file is UTF-8 JSON lines: line 1 is the header object (format
version, model registry, hidden-state dims, dataset name), every later
line is one query record holding per-model observations. Traces are the
portable substrate for offline replay: anything the router needs at
decision time (token distributions, hidden states, correctness labels,
token counts) is recorded here.

Hidden states are stored inline as number arrays by default. Setting
``hidden_encoding="f32_b64"`` in the header makes the writer emit
base64-encoded little-endian float32 instead (smaller files, values
quantized to float32); readers accept both encodings regardless of the
flag.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping

FORMAT_VERSION = "1"

# Backends report top-K mass only, so sums may fall short of 1; anything
# above 1 beyond float-accumulation error is a corrupt distribution.
PROB_SUM_TOL = 1e-9

TASK_KINDS = ("multiple_choice", "open_ended")
MODEL_KINDS = ("open_weights", "api_only")
HIDDEN_ENCODINGS = ("list", "f32_b64")
FACTUALITY_LABELS = ("correct", "incorrect", "abstain")


class TraceFormatError(ValueError):
    """A trace file or record violates the format contract.

    Carries the 1-based file line and offending field when known, so a
    corrupt record can be located without a debugger.
    """

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"field '{field}': "
        super().__init__(prefix + message)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """A model's identity, size, architecture dims, and token pricing."""

    model_id: str
    param_count: int | None = None
    n_layer: int | None = None
    d_model: int | None = None
    price_in: float = 0.0
    price_out: float = 0.0
    kind: str = "open_weights"

    def validate(self) -> None:
        if not self.model_id:
            raise TraceFormatError("empty model_id", field="model_id")
        if self.kind not in MODEL_KINDS:
            raise TraceFormatError(f"unknown kind {self.kind!r}", field="kind")
        if self.kind == "open_weights":
            if self.param_count is None or self.param_count <= 0:
                raise TraceFormatError(
                    f"open_weights model {self.model_id!r} needs param_count > 0",
                    field="param_count",
                )
        elif self.param_count is not None and self.param_count <= 0:
            raise TraceFormatError("param_count must be positive when present", field="param_count")
        if self.price_in < 0 or self.price_out < 0:
            raise TraceFormatError("negative price", field="price_in")
        if self.n_layer is not None and self.d_model is not None:
            if self.n_layer <= 0 or self.d_model <= 0:
                raise TraceFormatError("n_layer and d_model must be positive", field="n_layer")

    def to_json(self) -> dict:
        out: dict = {"model_id": self.model_id, "kind": self.kind,
                     "price_in": self.price_in, "price_out": self.price_out}
        if self.param_count is not None:
            out["param_count"] = self.param_count
        if self.n_layer is not None:
            out["n_layer"] = self.n_layer
        if self.d_model is not None:
            out["d_model"] = self.d_model
        return out

    @classmethod
    def from_json(cls, obj: Mapping, *, line: int | None = None) -> "ModelSpec":
        if not isinstance(obj, Mapping):
            raise TraceFormatError("model spec must be an object", line=line, field="models")
        try:
            spec = cls(
                model_id=_expect(obj, "model_id", str, line=line),
                param_count=_expect_opt(obj, "param_count", int, line=line),
                n_layer=_expect_opt(obj, "n_layer", int, line=line),
                d_model=_expect_opt(obj, "d_model", int, line=line),
                price_in=float(_expect_opt(obj, "price_in", (int, float), line=line) or 0.0),
                price_out=float(_expect_opt(obj, "price_out", (int, float), line=line) or 0.0),
                kind=_expect_opt(obj, "kind", str, line=line) or "open_weights",
            )
        except TraceFormatError:
            raise
        spec.validate()
        return spec


@dataclass(frozen=True)
class ChoiceDistribution:
    """Ordered (token_text, probability) pairs over first-token candidates."""

    entries: tuple[tuple[str, float], ...] = ()

    def validate(self) -> None:
        seen: set[str] = set()
        total = 0.0
        for token, prob in self.entries:
            if not isinstance(token, str):
                raise TraceFormatError("token_text must be a string", field="choice_dist")
            if not isinstance(prob, (int, float)) or isinstance(prob, bool):
                raise TraceFormatError(f"probability for {token!r} is not a number", field="choice_dist")
            if not (0.0 <= prob <= 1.0):
                raise TraceFormatError(
                    f"probability {prob!r} for token {token!r} outside [0, 1]", field="choice_dist"
                )
            if token in seen:
                raise TraceFormatError(f"duplicate token {token!r} in distribution", field="choice_dist")
            seen.add(token)
            total += prob
        if total > 1.0 + PROB_SUM_TOL:
            raise TraceFormatError(f"probabilities sum to {total!r} > 1", field="choice_dist")

    def to_json(self) -> list:
        return [[token, prob] for token, prob in self.entries]

    @classmethod
    def from_json(cls, obj, *, line: int | None = None, field_name: str = "choice_dist") -> "ChoiceDistribution":
        if not isinstance(obj, list):
            raise TraceFormatError("distribution must be a list of [token, probability] pairs",
                                   line=line, field=field_name)
        entries = []
        for pair in obj:
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise TraceFormatError("distribution entry must be a [token, probability] pair",
                                       line=line, field=field_name)
            token, prob = pair
            if not isinstance(token, str) or not isinstance(prob, (int, float)) or isinstance(prob, bool):
                raise TraceFormatError("distribution entry must be [string, number]",
                                       line=line, field=field_name)
            entries.append((token, float(prob)))
        dist = cls(tuple(entries))
        try:
            dist.validate()
        except TraceFormatError as exc:
            raise TraceFormatError(str(exc), line=line, field=field_name) from None
        return dist


@dataclass(frozen=True)
class ModelObservation:
    """One model's recorded behavior on one query."""

    model_id: str
    answer_text: str
    choice_dist: ChoiceDistribution
    first_token_dist: ChoiceDistribution | None = None
    hidden_state: tuple[float, ...] | None = None
    correct: bool | None = None
    tokens_in: int = 0
    tokens_out: int = 0
    latency_ms: float | None = None
    factuality: str | None = None

    def validate(self) -> None:
        if not self.model_id:
            raise TraceFormatError("empty model_id", field="model_id")
        self.choice_dist.validate()
        if self.first_token_dist is not None:
            self.first_token_dist.validate()
        if self.tokens_in < 0 or self.tokens_out < 0:
            raise TraceFormatError("negative token count", field="tokens_in")
        if self.answer_text and self.tokens_in + self.tokens_out <= 0:
            raise TraceFormatError(
                f"observation for {self.model_id!r} has answer text but zero tokens",
                field="tokens_out",
            )
        if self.latency_ms is not None and self.latency_ms < 0:
            raise TraceFormatError("negative latency", field="latency_ms")
        if self.factuality is not None and self.factuality not in FACTUALITY_LABELS:
            raise TraceFormatError(f"unknown factuality label {self.factuality!r}", field="factuality")

    def to_json(self, *, hidden_encoding: str = "list") -> dict:
        out: dict = {
            "model_id": self.model_id,
            "answer_text": self.answer_text,
            "choice_dist": self.choice_dist.to_json(),
            "tokens_in": self.tokens_in,
            "tokens_out": self.tokens_out,
        }
        if self.first_token_dist is not None:
            out["first_token_dist"] = self.first_token_dist.to_json()
        if self.hidden_state is not None:
            out["hidden_state"] = _encode_hidden(self.hidden_state, hidden_encoding)
        if self.correct is not None:
            out["correct"] = self.correct
        if self.latency_ms is not None:
            out["latency_ms"] = self.latency_ms
        if self.factuality is not None:
            out["factuality"] = self.factuality
        return out

    @classmethod
    def from_json(cls, obj: Mapping, *, line: int | None = None) -> "ModelObservation":
        if not isinstance(obj, Mapping):
            raise TraceFormatError("observation must be an object", line=line, field="observations")
        first = obj.get("first_token_dist")
        obs = cls(
            model_id=_expect(obj, "model_id", str, line=line),
            answer_text=_expect(obj, "answer_text", str, line=line),
            choice_dist=ChoiceDistribution.from_json(obj.get("choice_dist", []), line=line),
            first_token_dist=None if first is None else ChoiceDistribution.from_json(
                first, line=line, field_name="first_token_dist"),
            hidden_state=_decode_hidden(obj.get("hidden_state"), line=line),
            correct=_expect_opt(obj, "correct", bool, line=line),
            tokens_in=_expect(obj, "tokens_in", int, line=line),
            tokens_out=_expect(obj, "tokens_out", int, line=line),
            latency_ms=_opt_number(obj, "latency_ms", line=line),
            factuality=_expect_opt(obj, "factuality", str, line=line),
        )
        try:
            obs.validate()
        except TraceFormatError as exc:
            raise TraceFormatError(str(exc), line=line) from None
        return obs


@dataclass(frozen=True)
class QueryTrace:
    """One query plus every model's observation of it."""

    query_id: str
    prompt: str
    task_kind: str
    observations: Mapping[str, ModelObservation]
    gold_answer: str | None = None
    choice_labels: tuple[str, ...] | None = None

    def validate(self) -> None:
        if not self.query_id:
            raise TraceFormatError("empty query_id", field="query_id")
        if self.task_kind not in TASK_KINDS:
            raise TraceFormatError(f"unknown task_kind {self.task_kind!r}", field="task_kind")
        if self.task_kind == "multiple_choice" and not self.choice_labels:
            raise TraceFormatError("multiple_choice query without choice_labels", field="choice_labels")
        if not self.observations:
            raise TraceFormatError(f"query {self.query_id!r} has no observations", field="observations")
        for model_id, obs in self.observations.items():
            if model_id != obs.model_id:
                raise TraceFormatError(
                    f"observation keyed {model_id!r} carries model_id {obs.model_id!r}",
                    field="observations",
                )
            obs.validate()

    def to_json(self, *, hidden_encoding: str = "list") -> dict:
        out: dict = {
            "query_id": self.query_id,
            "prompt": self.prompt,
            "task_kind": self.task_kind,
            "observations": {mid: obs.to_json(hidden_encoding=hidden_encoding)
                             for mid, obs in self.observations.items()},
        }
        if self.gold_answer is not None:
            out["gold_answer"] = self.gold_answer
        if self.choice_labels is not None:
            out["choice_labels"] = list(self.choice_labels)
        return out

    @classmethod
    def from_json(cls, obj: Mapping, *, line: int | None = None) -> "QueryTrace":
        if not isinstance(obj, Mapping):
            raise TraceFormatError("record must be an object", line=line)
        raw_obs = obj.get("observations")
        if not isinstance(raw_obs, Mapping):
            raise TraceFormatError("missing or invalid observations map", line=line, field="observations")
        labels = obj.get("choice_labels")
        if labels is not None:
            if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
                raise TraceFormatError("choice_labels must be a list of strings",
                                       line=line, field="choice_labels")
            labels = tuple(labels)
        record = cls(
            query_id=_expect(obj, "query_id", str, line=line),
            prompt=_expect(obj, "prompt", str, line=line),
            task_kind=_expect(obj, "task_kind", str, line=line),
            observations={mid: ModelObservation.from_json(o, line=line) for mid, o in raw_obs.items()},
            gold_answer=_expect_opt(obj, "gold_answer", str, line=line),
            choice_labels=labels,
        )
        try:
            record.validate()
        except TraceFormatError as exc:
            raise TraceFormatError(str(exc), line=line) from None
        return record


@dataclass(frozen=True)
class TraceHeader:
    """First line of a trace file: registry and format metadata."""

    models: tuple[ModelSpec, ...]
    hidden_dims: Mapping[str, int]
    dataset_name: str
    format_version: str = FORMAT_VERSION
    hidden_encoding: str = "list"

    def validate(self) -> None:
        if self.format_version != FORMAT_VERSION:
            raise TraceFormatError(
                f"unsupported format_version {self.format_version!r} (reader understands {FORMAT_VERSION!r})",
                line=1, field="format_version",
            )
        if self.hidden_encoding not in HIDDEN_ENCODINGS:
            raise TraceFormatError(f"unknown hidden_encoding {self.hidden_encoding!r}",
                                   line=1, field="hidden_encoding")
        seen: set[str] = set()
        for spec in self.models:
            spec.validate()
            if spec.model_id in seen:
                raise TraceFormatError(f"duplicate model {spec.model_id!r} in header", line=1, field="models")
            seen.add(spec.model_id)
        for model_id, dim in self.hidden_dims.items():
            if model_id not in seen:
                raise TraceFormatError(f"hidden_dims names unknown model {model_id!r}",
                                       line=1, field="hidden_dims")
            if not isinstance(dim, int) or dim <= 0:
                raise TraceFormatError(f"hidden dim for {model_id!r} must be a positive integer",
                                       line=1, field="hidden_dims")

    def model(self, model_id: str) -> ModelSpec:
        for spec in self.models:
            if spec.model_id == model_id:
                return spec
        raise KeyError(model_id)

    def registry(self) -> dict[str, ModelSpec]:
        return {spec.model_id: spec for spec in self.models}

    def to_json(self) -> dict:
        out: dict = {
            "format_version": self.format_version,
            "models": [spec.to_json() for spec in self.models],
            "hidden_dims": dict(self.hidden_dims),
            "dataset_name": self.dataset_name,
        }
        if self.hidden_encoding != "list":
            out["hidden_encoding"] = self.hidden_encoding
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "TraceHeader":
        if not isinstance(obj, Mapping):
            raise TraceFormatError("header must be an object", line=1)
        version = obj.get("format_version")
        if not isinstance(version, str):
            raise TraceFormatError("missing format_version", line=1, field="format_version")
        models_raw = obj.get("models")
        if not isinstance(models_raw, list):
            raise TraceFormatError("missing models list", line=1, field="models")
        dims_raw = obj.get("hidden_dims", {})
        if not isinstance(dims_raw, Mapping):
            raise TraceFormatError("hidden_dims must be an object", line=1, field="hidden_dims")
        header = cls(
            models=tuple(ModelSpec.from_json(m, line=1) for m in models_raw),
            hidden_dims=dict(dims_raw),
            dataset_name=_expect(obj, "dataset_name", str, line=1),
            format_version=version,
            hidden_encoding=_expect_opt(obj, "hidden_encoding", str, line=1) or "list",
        )
        header.validate()
        return header


@dataclass
class TraceFile:
    """A parsed trace: immutable after load, safe to share across readers."""

    header: TraceHeader
    records: list[QueryTrace] = field(default_factory=list)

    def validate(self) -> None:
        self.header.validate()
        known = {spec.model_id for spec in self.header.models}
        for i, record in enumerate(self.records):
            record.validate()
            _check_record_against_header(record, self.header, known, line=i + 2)

    def __iter__(self) -> Iterator[QueryTrace]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def read_trace(path: str | Path) -> TraceFile:
    """Parse and fully validate a trace file.

    Raises TraceFormatError naming the 1-based line and field for any
    malformed content; record order is preserved.
    """
    path = Path(path)
    records: list[QueryTrace] = []
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise TraceFormatError("empty file: missing header line", line=1)
        header = TraceHeader.from_json(_parse_line(first, line=1))
        known = {spec.model_id for spec in header.models}
        for line_no, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            record = QueryTrace.from_json(_parse_line(raw, line=line_no), line=line_no)
            _check_record_against_header(record, header, known, line=line_no)
            records.append(record)
    return TraceFile(header=header, records=records)


def write_trace(trace: TraceFile, path: str | Path) -> None:
    """Write a validated trace; read_trace(write_trace(t)) == t.

    Numbers round-trip at full precision under the default "list" hidden
    encoding; "f32_b64" quantizes hidden states to float32.
    """
    trace.validate()
    with TraceWriter(path, trace.header) as writer:
        for record in trace.records:
            writer.append(record)


class TraceWriter:
    """Streaming single-writer appender for trace files.

    Writes the header when creating a new file; appending to an existing
    file checks the stored header matches instead. Every record is
    validated against the header before it touches disk.
    """

    def __init__(self, path: str | Path, header: TraceHeader):
        header.validate()
        self.path = Path(path)
        self.header = header
        self._known = {spec.model_id for spec in header.models}
        if self.path.exists() and self.path.stat().st_size > 0:
            existing = read_trace(self.path).header
            if existing.to_json() != header.to_json():
                raise TraceFormatError(f"existing trace {self.path} has a different header")
            self._fh: IO[str] = self.path.open("a", encoding="utf-8")
        else:
            self._fh = self.path.open("w", encoding="utf-8")
            self._fh.write(_dump_line(header.to_json()))
            self._fh.flush()

    def append(self, record: QueryTrace) -> None:
        record.validate()
        _check_record_against_header(record, self.header, self._known, line=None)
        self._fh.write(_dump_line(record.to_json(hidden_encoding=self.header.hidden_encoding)))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _check_record_against_header(record: QueryTrace, header: TraceHeader,
                                 known: set[str], *, line: int | None) -> None:
    for model_id, obs in record.observations.items():
        if model_id not in known:
            raise TraceFormatError(
                f"query {record.query_id!r} references model {model_id!r} absent from header",
                line=line, field="observations",
            )
        if obs.hidden_state is not None:
            declared = header.hidden_dims.get(model_id)
            if declared is None:
                raise TraceFormatError(
                    f"model {model_id!r} carries a hidden_state but header declares no dim for it",
                    line=line, field="hidden_state",
                )
            if len(obs.hidden_state) != declared:
                raise TraceFormatError(
                    f"hidden_state for {model_id!r} has length {len(obs.hidden_state)}, "
                    f"header declares {declared}",
                    line=line, field="hidden_state",
                )


def _encode_hidden(values: tuple[float, ...], encoding: str) -> list | str:
    if encoding == "list":
        return list(values)
    if encoding == "f32_b64":
        packed = struct.pack(f"<{len(values)}f", *values)
        return base64.b64encode(packed).decode("ascii")
    raise TraceFormatError(f"unknown hidden_encoding {encoding!r}", field="hidden_encoding")


def _decode_hidden(value, *, line: int | None = None) -> tuple[float, ...] | None:
    if value is None:
        return None
    if isinstance(value, list):
        floats = []
        for x in value:
            if not isinstance(x, (int, float)) or isinstance(x, bool):
                raise TraceFormatError("hidden_state entries must be numbers",
                                       line=line, field="hidden_state")
            floats.append(float(x))
        return tuple(floats)
    if isinstance(value, str):
        try:
            packed = base64.b64decode(value.encode("ascii"), validate=True)
        except Exception:
            raise TraceFormatError("hidden_state is not valid base64",
                                   line=line, field="hidden_state") from None
        if len(packed) % 4 != 0:
            raise TraceFormatError("base64 hidden_state length is not a multiple of 4 bytes",
                                   line=line, field="hidden_state")
        return tuple(struct.unpack(f"<{len(packed) // 4}f", packed))
    raise TraceFormatError("hidden_state must be a number array or base64 string",
                           line=line, field="hidden_state")


def _parse_line(raw: str, *, line: int) -> dict:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"invalid JSON ({exc.msg})", line=line) from None
    if not isinstance(obj, dict):
        raise TraceFormatError("each line must be a JSON object", line=line)
    return obj


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n"


def _expect(obj: Mapping, key: str, kind, *, line: int | None):
    if key not in obj:
        raise TraceFormatError("missing required field", line=line, field=key)
    value = obj[key]
    if kind is int and isinstance(value, bool):
        raise TraceFormatError("expected an integer", line=line, field=key)
    if not isinstance(value, kind):
        raise TraceFormatError(f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}",
                               line=line, field=key)
    return value


def _expect_opt(obj: Mapping, key: str, kind, *, line: int | None):
    if key not in obj or obj[key] is None:
        return None
    return _expect(obj, key, kind, line=line)


def _opt_number(obj: Mapping, key: str, *, line: int | None) -> float | None:
    value = obj.get(key)
    if value is None:
        return None
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise TraceFormatError("expected a number", line=line, field=key)
    return float(value)
