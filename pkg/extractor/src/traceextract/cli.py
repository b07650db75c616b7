"""Command line entry point.

    traceextract --model ckpt_dir --dataset toy.jsonl --out trace.jsonl \
        --template @mc_template.txt --layer 24

Exit codes: 0 success, 1 extraction failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .job import DecodingSpec, ExtractError, ExtractionJob
from .extract import extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="traceextract",
        description="Extract a routing trace (first-token distributions, hidden "
                    "states, correctness) from a local checkpoint.")
    parser.add_argument("--model", required=True, help="checkpoint directory")
    parser.add_argument("--dataset", required=True, help=".jsonl or .csv question file")
    parser.add_argument("--out", required=True, help="trace output path (.jsonl)")
    parser.add_argument("--template", default=None,
                        help="prompt template with {subject}/{question}/{choices} "
                             "slots; @path reads it from a file")
    parser.add_argument("--layer", type=int, default=24,
                        help="1-based transformer layer for the hidden state (default 24)")
    parser.add_argument("--task", default="multiple_choice",
                        choices=("multiple_choice", "open_ended"))
    parser.add_argument("--max-queries", type=int, default=None)
    parser.add_argument("--start-index", type=int, default=0,
                        help="skip this many rows and append to an existing trace")
    parser.add_argument("--top-k", type=int, default=20)
    parser.add_argument("--merge-labels", default=None, metavar="JSON",
                        help="JSON file of query_id -> correct overriding computed labels")
    parser.add_argument("--quiet", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        template = _resolve_template(args.template, args.task)
        merge = _load_merge(args.merge_labels)
        kwargs = {} if template is None else {"prompt_template": template}
        job = ExtractionJob(
            model_ref=args.model, dataset_path=args.dataset, out_path=args.out,
            task_kind=args.task, layer_index=args.layer,
            max_queries=args.max_queries, start_index=args.start_index,
            top_k=args.top_k, decoding=DecodingSpec(), **kwargs)
        report = extract(job, merge_labels=merge)
    except ExtractError as exc:
        print(f"traceextract: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"traceextract: error: {exc}", file=sys.stderr)
        return 1
    if not args.quiet:
        print(f"wrote {report.n_written} records"
              + (f" (after {report.n_resumed} already present)" if report.n_resumed else "")
              + f" for {report.model_id} to {report.out_path}")
    return 0


def _resolve_template(value: str | None, task_kind: str) -> str | None:
    if value is None:
        if task_kind == "open_ended":
            return "{question}\nAnswer:"
        return None
    if value.startswith("@"):
        path = Path(value[1:])
        try:
            return path.read_text(encoding="utf-8").rstrip("\n")
        except OSError as exc:
            raise ExtractError(f"cannot read template {path}: {exc}") from None
    return value


def _load_merge(path: str | None) -> dict[str, bool] | None:
    if path is None:
        return None
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ExtractError(f"cannot read merge labels {path}: {exc}") from None
    if not isinstance(obj, dict) or not all(isinstance(v, bool) for v in obj.values()):
        raise ExtractError(f"{path}: merge labels must map query_id to true/false")
    return obj


def entry() -> None:
    raise SystemExit(main())
