"""Command-line entry point: every workflow as one subcommand.

    confcascade replay --config chain.json trace.jsonl
    confcascade sweep --config chain.json --taus 0.95 0.9 0.7 0.5 trace.jsonl
    confcascade train-pik --model llama-8b --out probe.json trace.jsonl
    confcascade cost --counts llama-8b=594 --counts llama-70b=836
    confcascade mcnemar run_a.jsonl run_b.jsonl
    confcascade serve --config chain.json --endpoints backends.json
    confcascade validate-trace trace.jsonl

Exit codes: 0 success, 1 domain error (bad data, failed backends),
2 usage error (bad flags, malformed config). JSON output is
stable-keyed; table output is aligned for eyeballing; csv emits one
row per table line.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .cascade import CascadeConfig, DecisionRecord, RoutingError, route_replay
from .costs import (CostError, StageCount, chain_cc, gflops, load_pricing,
                    reduced_fraction, replay_cost_report, stage_counts)
from .metrics import (EvalError, baseline_accuracy_from_trace, classification_metrics,
                      decision_correct, discordant_counts, hallucination_rate, mcnemar,
                      threshold_sweep)
from .probe import PikModel, PikTrainConfig, pik_train
from .stats import StatsError
from .trace import TraceFormatError, read_trace

PROG = "confcascade"


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors with exit code 2
        return int(exc.code or 0)
    args.seed = getattr(args, "seed", 0)
    args.format = getattr(args, "format", "table")
    args.quiet = getattr(args, "quiet", False)
    try:
        return args.func(args)
    except (TraceFormatError, RoutingError, CostError, EvalError, StatsError,
            ValueError, OSError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    # Global flags live on a shared parent with SUPPRESS defaults so they
    # parse on either side of the subcommand without the subparser's
    # defaults clobbering values given before it.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="seed for all randomness (default 0)")
    common.add_argument("--format", choices=("table", "json", "csv"),
                        default=argparse.SUPPRESS, help="report format (default table)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="suppress report output")
    parser = argparse.ArgumentParser(
        prog=PROG, description="Confidence-gated model cascade toolkit",
        parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name: str, **kwargs):
        return sub.add_parser(name, parents=[common], **kwargs)

    replay = add_parser("replay", help="route a recorded trace through a chain")
    replay.add_argument("trace", help="trace JSONL path")
    replay.add_argument("--config", required=True, help="cascade config JSON path")
    replay.add_argument("--pik", action="append", default=[], metavar="MODEL=PATH",
                        help="probe weights for a stage (repeatable)")
    replay.add_argument("--baseline", default=None, metavar="MODEL",
                        help="baseline model id (default: final stage)")
    replay.add_argument("--decisions-out", default=None, metavar="PATH",
                        help="write per-query decisions as JSONL")
    replay.add_argument("--require-labels", action="store_true",
                        help="fail on queries without resolvable correctness")
    replay.set_defaults(func=_cmd_replay)

    sweep = add_parser("sweep", help="threshold sensitivity sweep over a trace")
    sweep.add_argument("trace")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--taus", type=float, nargs="+", required=True,
                       help="tau_t values to sweep")
    sweep.add_argument("--ablation", choices=("as-config", "both"), default="as-config",
                       help="'both' runs each tau with and without the probe")
    sweep.add_argument("--pik", action="append", default=[], metavar="MODEL=PATH")
    sweep.set_defaults(func=_cmd_sweep)

    train = add_parser("train-pik", help="train a probe from one model's trace rows")
    train.add_argument("trace")
    train.add_argument("--model", required=True, help="model id whose hidden states to use")
    train.add_argument("--out", required=True, help="output path for probe weights JSON")
    train.add_argument("--hidden-width", type=int, default=256)
    train.add_argument("--epochs", type=int, default=50)
    train.add_argument("--batch-size", type=int, default=64)
    train.add_argument("--learning-rate", type=float, default=1e-3)
    train.add_argument("--patience", type=int, default=5)
    train.set_defaults(func=_cmd_train_pik)

    cost = add_parser("cost", help="compute-cost and reduction accounting")
    cost.add_argument("--counts", action="append", default=[], metavar="MODEL=K",
                      help="retained-query count per stage (repeatable)")
    cost.add_argument("--pricing", default=None, help="pricing JSON (default: bundled)")
    cost.add_argument("--baseline", default=None, metavar="MODEL",
                      help="baseline model id (default: largest in --counts)")
    cost.add_argument("--trace", default=None, help="trace to replay for a full report")
    cost.add_argument("--config", default=None, help="config for --trace mode")
    cost.add_argument("--pik", action="append", default=[], metavar="MODEL=PATH")
    cost.add_argument("--value", type=float, default=None,
                      help="bare reduction: observed value")
    cost.add_argument("--value-baseline", type=float, default=None,
                      help="bare reduction: baseline value")
    cost.set_defaults(func=_cmd_cost)

    mcn = add_parser("mcnemar", help="paired test between two decision files")
    mcn.add_argument("decisions", nargs="*", metavar="DECISIONS_JSONL",
                     help="two decision files from replay --decisions-out")
    mcn.add_argument("--b", type=int, default=None, help="discordant count b (with --c)")
    mcn.add_argument("--c", type=int, default=None, help="discordant count c (with --b)")
    mcn.add_argument("--small-threshold", type=int, default=25,
                     help="b+c below this uses the exact binomial (default 25)")
    mcn.set_defaults(func=_cmd_mcnemar)

    serve = add_parser("serve", help="run the routing HTTP service")
    serve.add_argument("--config", required=True)
    serve.add_argument("--endpoints", required=True, help="JSON list of backend endpoints")
    serve.add_argument("--pik", action="append", default=[], metavar="MODEL=PATH")
    serve.add_argument("--listen", default="127.0.0.1:8080", metavar="HOST:PORT")
    serve.add_argument("--trace-out", default=None, help="append observations here")
    serve.add_argument("--pricing", default=None)
    serve.add_argument("--dataset", default="live", help="dataset name for the trace header")
    serve.set_defaults(func=_cmd_serve)

    validate = add_parser("validate-trace", help="check a trace file against the format")
    validate.add_argument("trace")
    validate.set_defaults(func=_cmd_validate)

    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_replay(args) -> int:
    trace = read_trace(args.trace)
    config = CascadeConfig.load(args.config)
    probes = _load_probes(args.pik)
    decisions = route_replay(trace, config, probes, require_labels=args.require_labels)
    if args.decisions_out:
        _write_decisions(args.decisions_out, decisions)

    baseline_model = args.baseline or config.stages[-1].model_id
    cost = replay_cost_report(decisions, trace, baseline_model)
    counts = stage_counts(decisions)
    payload: dict = {
        "chain": [p.model_id for p in config.stages],
        "n": len(decisions),
        "stage_counts": {c.model_id: c.k for c in counts},
        "baseline_model": baseline_model,
        "cost": cost.to_json(),
    }
    try:
        baseline_acc = baseline_accuracy_from_trace(trace, baseline_model)
    except EvalError:
        baseline_acc = None
    if config.task_kind == "multiple_choice":
        label_set = _trace_label_set(trace)
        report = classification_metrics(decisions, label_set,
                                        baseline_accuracy=baseline_acc, cost=cost)
        payload.update(report.to_json())
    else:
        accuracy = _labeled_accuracy(decisions)
        payload["accuracy"] = accuracy
        payload["pd"] = (None if baseline_acc is None or accuracy is None
                         else (accuracy - baseline_acc) * 100.0)
    try:
        payload["hallucination_rate"] = hallucination_rate(decisions)
    except EvalError:
        payload["hallucination_rate"] = None

    row = {
        "chain": "->".join(payload["chain"]),
        "n": payload["n"],
        "acc": _pct(payload.get("accuracy")),
        "pd": _signed(payload.get("pd")),
        "reduced_cc": _pct(cost.reduced_cc),
        "macro_f1": _pct(payload.get("macro_f1")),
        "counts": " ".join(f"{c.model_id}={c.k}" for c in counts),
    }
    _emit(args, payload, [row])
    return 0


def _cmd_sweep(args) -> int:
    trace = read_trace(args.trace)
    config = CascadeConfig.load(args.config)
    probes = _load_probes(args.pik)
    rows = threshold_sweep(trace, config, args.taus,
                           with_and_without_pik=args.ablation == "both",
                           pik_registry=probes)
    payload = {"rows": [r.to_json() for r in rows]}
    table = [{
        "tau": f"{r.tau:g}",
        "ablation": r.ablation,
        "acc": _pct(r.accuracy),
        "pd": _signed(r.pd),
        "reduced_cc": _pct(r.reduced_cc),
        "escalations": r.n_escalations,
    } for r in rows]
    _emit(args, payload, table)
    return 0


def _cmd_train_pik(args) -> int:
    trace = read_trace(args.trace)
    samples = _probe_samples(trace, args.model)
    config = PikTrainConfig(seed=args.seed, hidden_width=args.hidden_width,
                            epochs=args.epochs, batch_size=args.batch_size,
                            learning_rate=args.learning_rate,
                            early_stop_patience=args.patience)
    model, report = pik_train(samples, config, trained_on=trace.header.dataset_name,
                              source_model_id=args.model)
    model.save(args.out)
    payload = {
        "model": args.model,
        "out": str(args.out),
        "n_samples": len(samples),
        "input_dim": model.input_dim,
        **report.to_json(),
    }
    row = {"model": args.model, "n": len(samples),
           "accuracy": _pct(report.accuracy), "f1": _pct(report.f1),
           "auroc": f"{report.auroc:.4f}", "out": str(args.out)}
    _emit(args, payload, [row])
    return 0


def _cmd_cost(args) -> int:
    bare = args.value is not None or args.value_baseline is not None
    modes = sum((bool(args.counts), args.trace is not None, bare))
    if modes != 1:
        print(f"{PROG}: error: pick exactly one of --counts, --trace, or "
              f"--value/--value-baseline", file=sys.stderr)
        return 2
    if bare:
        if args.value is None or args.value_baseline is None:
            print(f"{PROG}: error: --value and --value-baseline go together",
                  file=sys.stderr)
            return 2
        reduced = reduced_fraction(args.value, args.value_baseline)
        payload = {"value": args.value, "baseline": args.value_baseline,
                   "reduced": reduced}
        _emit(args, payload, [{"value": args.value, "baseline": args.value_baseline,
                               "reduced": _pct(reduced)}])
        return 0
    pricing = load_pricing(args.pricing)
    if args.trace is not None:
        if not args.config:
            print(f"{PROG}: error: --trace mode needs --config", file=sys.stderr)
            return 2
        trace = read_trace(args.trace)
        config = CascadeConfig.load(args.config)
        decisions = route_replay(trace, config, _load_probes(args.pik))
        baseline_model = args.baseline or config.stages[-1].model_id
        report = replay_cost_report(decisions, trace, baseline_model)
        counts = stage_counts(decisions)
    else:
        counts = [_parse_count(item) for item in args.counts]
        baseline_model = args.baseline or _largest_model(counts, pricing)
        n = sum(c.k for c in counts)
        cc = chain_cc(counts, pricing)
        cc_baseline = chain_cc([StageCount(baseline_model, n)], pricing)
        from .costs import CostReport
        report = CostReport(cc_flops=cc, cc_baseline_flops=cc_baseline,
                            reduced_cc=(reduced_fraction(cc, cc_baseline)
                                        if cc_baseline > 0 else None))
    payload = {"stage_counts": {c.model_id: c.k for c in counts},
               "baseline_model": baseline_model, **report.to_json()}
    row = {
        "counts": " ".join(f"{c.model_id}={c.k}" for c in counts) or "-",
        "cc_gflops": "-" if report.cc_flops is None else f"{gflops(report.cc_flops):.2f}",
        "baseline_gflops": ("-" if report.cc_baseline_flops is None
                            else f"{gflops(report.cc_baseline_flops):.2f}"),
        "reduced_cc": _pct(report.reduced_cc),
        "usd": "-" if report.usd is None else f"${report.usd:.3f}",
        "reduced_usd": _pct(report.reduced_usd),
        "reduced_tokens": _pct(report.reduced_tokens),
    }
    _emit(args, payload, [row])
    return 0


def _cmd_mcnemar(args) -> int:
    direct = args.b is not None or args.c is not None
    if direct:
        if args.b is None or args.c is None or args.decisions:
            print(f"{PROG}: error: --b and --c go together, without decision files",
                  file=sys.stderr)
            return 2
        b, c = args.b, args.c
    else:
        if len(args.decisions) != 2:
            print(f"{PROG}: error: need exactly two decision files (or --b/--c)",
                  file=sys.stderr)
            return 2
        b, c = discordant_counts(_read_decisions(args.decisions[0]),
                                 _read_decisions(args.decisions[1]))
    result = mcnemar(b, c, small_threshold=args.small_threshold)
    payload = result.to_json()
    row = {"b": result.b, "c": result.c,
           "statistic": "-" if result.statistic is None else f"{result.statistic:.2f}",
           "p_value": f"{result.p_value:.4g}", "method": result.method}
    _emit(args, payload, [row])
    return 0


def _cmd_serve(args) -> int:
    from .gateway import BackendEndpoint, serve

    try:
        config = CascadeConfig.load(args.config)
        endpoints_raw = json.loads(Path(args.endpoints).read_text(encoding="utf-8"))
        if not isinstance(endpoints_raw, list):
            raise ValueError("endpoints file must hold a JSON list")
        endpoints = {}
        for item in endpoints_raw:
            endpoint = BackendEndpoint.from_json(item)
            endpoints[endpoint.model_id] = endpoint
        probes = _load_probes(args.pik)
        pricing = load_pricing(args.pricing) if args.pricing else None
    except (RoutingError, TraceFormatError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    serve(config, endpoints, probes, args.listen,
          trace_path=args.trace_out, dataset_name=args.dataset, pricing=pricing)
    return 0


def _cmd_validate(args) -> int:
    trace = read_trace(args.trace)
    payload = {
        "path": str(args.trace),
        "records": len(trace.records),
        "models": [spec.model_id for spec in trace.header.models],
        "dataset_name": trace.header.dataset_name,
        "hidden_encoding": trace.header.hidden_encoding,
        "valid": True,
    }
    _emit(args, payload, [payload])
    return 0


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _emit(args, payload: dict, rows: list[dict]) -> None:
    if args.quiet:
        return
    if args.format == "json":
        print(json.dumps(payload, sort_keys=True, indent=2))
    elif args.format == "csv":
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
        sys.stdout.write(buffer.getvalue())
    else:
        _print_table(rows)


def _print_table(rows: list[dict]) -> None:
    headers = list(rows[0].keys())
    cells = [[_cell(row.get(h)) for h in headers] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) for i, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip())
    for r in cells:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())


def _cell(value) -> str:
    if value is None:
        return "-"
    return str(value)


def _pct(value) -> str:
    return "-" if value is None else f"{value * 100:.2f}%"


def _signed(value) -> str:
    return "-" if value is None else f"{value:+.2f}"


def _load_probes(items: list[str]) -> dict[str, PikModel]:
    probes: dict[str, PikModel] = {}
    for item in items:
        model_id, sep, path = item.partition("=")
        if not sep or not model_id or not path:
            raise ValueError(f"--pik expects MODEL=PATH, got {item!r}")
        probes[model_id] = PikModel.load(path)
    return probes


def _parse_count(item: str) -> StageCount:
    model_id, sep, k_text = item.partition("=")
    if not sep or not model_id:
        raise ValueError(f"--counts expects MODEL=K, got {item!r}")
    try:
        k = int(k_text)
    except ValueError:
        raise ValueError(f"--counts expects an integer count, got {item!r}") from None
    return StageCount(model_id, k)


def _largest_model(counts: list[StageCount], pricing) -> str:
    best = None
    best_params = -1
    for count in counts:
        spec = pricing.get(count.model_id)
        if spec is None:
            raise CostError(f"no pricing entry for {count.model_id!r}")
        if spec.param_count is not None and spec.param_count > best_params:
            best, best_params = count.model_id, spec.param_count
    if best is None:
        raise CostError("no stage has a known parameter count; pass --baseline")
    return best


def _trace_label_set(trace) -> list[str]:
    labels: dict[str, None] = {}
    for record in trace.records:
        for label in record.choice_labels or ():
            labels.setdefault(label)
    if not labels:
        raise EvalError("trace has no choice labels to score against")
    return list(labels)


def _labeled_accuracy(decisions) -> float | None:
    try:
        return sum(decision_correct(d) for d in decisions) / len(decisions)
    except EvalError:
        return None


def _probe_samples(trace, model_id: str):
    samples = []
    for record in trace.records:
        obs = record.observations.get(model_id)
        if obs is None:
            continue
        if obs.hidden_state is None:
            raise ValueError(f"query {record.query_id!r} has no hidden state for "
                             f"{model_id!r}; cannot train the probe")
        correct = obs.correct
        if correct is None and record.task_kind == "multiple_choice" \
                and record.gold_answer is not None:
            from .confidence import p_t_multiple_choice
            chosen = p_t_multiple_choice(obs.choice_dist,
                                         list(record.choice_labels)).chosen_label
            correct = chosen == record.gold_answer
        if correct is None:
            raise ValueError(f"query {record.query_id!r} has no correctness label for "
                             f"{model_id!r}")
        samples.append((obs.hidden_state, bool(correct)))
    if not samples:
        raise ValueError(f"trace has no observations for {model_id!r}")
    return samples


def _write_decisions(path, decisions) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for decision in decisions:
            fh.write(json.dumps(decision.to_json(), sort_keys=True,
                                separators=(",", ":")) + "\n")


def _read_decisions(path) -> list[DecisionRecord]:
    decisions = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                decisions.append(DecisionRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {i}: bad decision record ({exc})") from None
    if not decisions:
        raise ValueError(f"{path}: no decision records")
    return decisions


if __name__ == "__main__":
    sys.exit(main())
