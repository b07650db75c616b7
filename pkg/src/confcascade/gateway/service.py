"""Front-facing HTTP service exposing the cascade over JSON.

POST /v1/route answers one query through the chain; GET /v1/health
reports per-backend reachability; GET /v1/config shows the active chain
with credentials redacted to environment-variable names. Every routed
request's observations are appended to the output trace by a single
writer thread behind a bounded queue; a full queue surfaces as a
retryable 503 rather than blocking the request path.

Request handlers never crash the process: domain errors map to 400,
backend failures to 502 with the failing stage named, and anything else
to a structured 500.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import queue
import sys
import threading
import time
from typing import Callable, Mapping

from ..cascade import CascadeConfig, RouteQuery, RoutingError, route_live
from ..costs import usd_cost
from ..probe import PikModel
from ..trace import ModelSpec, QueryTrace, TraceHeader, TraceWriter
from .client import BackendEndpoint, BackendError, backend_complete, check_reachable

logger = logging.getLogger("confcascade.gateway")

DEFAULT_QUEUE_SIZE = 256


class TraceAppender:
    """Single serialized trace writer fed by a bounded queue."""

    def __init__(self, path, header: TraceHeader, maxsize: int = DEFAULT_QUEUE_SIZE):
        self._queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self._writer = TraceWriter(path, header)
        self._thread = threading.Thread(target=self._drain, name="trace-appender", daemon=True)
        self._thread.start()

    def offer(self, record: QueryTrace) -> bool:
        """Enqueue without blocking; False signals backpressure."""
        try:
            self._queue.put_nowait(record)
            return True
        except queue.Full:
            return False

    def _drain(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            try:
                self._writer.append(item)
            except Exception as exc:
                _log(event="trace_append_error", error=str(exc))

    def close(self) -> None:
        self._queue.put(None)
        self._thread.join(timeout=10.0)
        self._writer.close()


def build_app(config: CascadeConfig, endpoints: Mapping[str, BackendEndpoint],
              pik_registry: Mapping[str, PikModel] | None = None,
              *, trace_path=None, dataset_name: str = "live",
              model_specs: Mapping[str, ModelSpec] | None = None,
              pricing: Mapping[str, ModelSpec] | None = None,
              complete: Callable | None = None,
              reachable: Callable[[BackendEndpoint], bool] | None = None,
              queue_size: int = DEFAULT_QUEUE_SIZE):
    """Assemble the FastAPI app; config/weights/pricing are frozen at startup."""
    from contextlib import asynccontextmanager

    from fastapi import FastAPI
    from fastapi.responses import JSONResponse

    _check_deployment(config, endpoints, pik_registry)
    complete = complete or backend_complete
    reachable = reachable or check_reachable
    header = _live_header(config, pik_registry, model_specs, pricing, dataset_name)
    if trace_path is not None:
        # the emitted trace must replay under this config, so the header's
        # registry has to satisfy the same chain checks route_replay applies;
        # without model_specs a non-final stage defaults to api_only and fails
        try:
            config.validate(header.registry())
        except RoutingError as exc:
            raise RoutingError(
                f"trace output would not replay: {exc}; pass model_specs for "
                f"every non-final stage") from exc

    @asynccontextmanager
    async def lifespan(app):
        app.state.appender = (TraceAppender(trace_path, header, queue_size)
                              if trace_path is not None else None)
        app.state.hidden_dropped = set()
        try:
            yield
        finally:
            if app.state.appender is not None:
                app.state.appender.close()

    app = FastAPI(lifespan=lifespan)

    @app.post("/v1/route")
    def route(request: dict):
        started = time.monotonic()
        try:
            prompt = request.get("prompt")
            if not isinstance(prompt, str) or not prompt:
                return _error(400, "request needs a non-empty 'prompt'")
            active = config
            if request.get("config_override") is not None:
                active = CascadeConfig.from_json(request["config_override"])
                _check_deployment(active, endpoints, pik_registry)
            labels = request.get("choice_labels")
            query = RouteQuery(
                prompt=prompt,
                query_id=request.get("query_id") or "",
                choice_labels=None if labels is None else tuple(str(l) for l in labels),
                gold_answer=request.get("gold_answer"),
            )
            decision, record = route_live(query, active, endpoints, pik_registry,
                                          complete=complete)
        except RoutingError as exc:
            cause = exc.__cause__
            if isinstance(cause, BackendError):
                return _error(502, str(exc), stage=cause.stage)
            return _error(400, str(exc))
        except Exception as exc:  # the service must survive any single request
            _log(event="route_internal_error", error=str(exc))
            return _error(500, f"internal error: {exc}")

        appender = app.state.appender
        if appender is not None:
            record, undeclared = _strip_undeclared_hidden(record, header)
            for mid in undeclared - app.state.hidden_dropped:
                app.state.hidden_dropped.add(mid)
                _log(event="hidden_state_dropped", model_id=mid,
                     note="backend sends hidden states but no probe declares "
                          "a dim for this model; vectors are not traced")
            if not appender.offer(record):
                return _error(503, "trace queue full, retry later")
        tokens_in = sum(o.tokens_in for o in record.observations.values())
        tokens_out = sum(o.tokens_out for o in record.observations.values())
        _log(event="route", query_id=decision.query_id,
             answering_model=decision.answering_model,
             stages=[v.model_id for v in decision.visited],
             ms=round((time.monotonic() - started) * 1000.0, 3))
        return {
            "query_id": decision.query_id,
            "answer": decision.answer,
            "answering_model": decision.answering_model,
            "stages": [{"model_id": v.model_id, "p_ik": v.p_ik, "p_t": v.p_t,
                        "retained": v.retained, "gate": v.gate} for v in decision.visited],
            "tokens": {"in": tokens_in, "out": tokens_out},
            "usd_estimate": _usd_estimate(record, pricing),
            "notes": list(decision.notes),
        }

    @app.get("/v1/health")
    def health():
        backends = {mid: ("reachable" if reachable(endpoint) else "unreachable")
                    for mid, endpoint in endpoints.items()}
        return {"status": "ok", "backends": backends}

    @app.get("/v1/config")
    def show_config():
        return {
            "chain": config.to_json(),
            "endpoints": [endpoints[p.model_id].to_json() for p in config.stages],
            "trace_path": None if trace_path is None else str(trace_path),
            "dataset_name": dataset_name,
        }

    def _error(status: int, message: str, *, stage: str | None = None):
        _log(event="route_error", status=status, error=message, stage=stage)
        return JSONResponse(status_code=status, content={"error": message, "stage": stage})

    return app


def serve(config: CascadeConfig, endpoints: Mapping[str, BackendEndpoint],
          pik_registry: Mapping[str, PikModel] | None, listen_addr: str,
          **app_kwargs) -> None:
    """Run the service until interrupted. listen_addr is host:port."""
    import uvicorn

    host, _, port_text = listen_addr.rpartition(":")
    if not host or not port_text.isdigit():
        raise ValueError(f"listen_addr must be host:port, got {listen_addr!r}")
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)
        logger.setLevel(logging.INFO)
    app = build_app(config, endpoints, pik_registry, **app_kwargs)
    uvicorn.run(app, host=host, port=int(port_text), log_level="warning")


# ---------------------------------------------------------------------------
# internals
# ---------------------------------------------------------------------------

def _check_deployment(config: CascadeConfig, endpoints: Mapping[str, BackendEndpoint],
                      pik_registry: Mapping[str, PikModel] | None) -> None:
    config.validate()
    for i, policy in enumerate(config.stages):
        endpoint = endpoints.get(policy.model_id)
        if endpoint is None:
            raise RoutingError(f"stage {policy.model_id!r} has no configured endpoint")
        endpoint.validate()
        is_final = i == len(config.stages) - 1
        if not is_final and not endpoint.supports_logprobs:
            raise RoutingError(
                f"non-final stage {policy.model_id!r} needs a logprobs-capable backend")
        if policy.use_pik:
            if not endpoint.supports_hidden_states:
                raise RoutingError(
                    f"stage {policy.model_id!r} gates on the probe but its backend "
                    f"exposes no hidden states")
            if not pik_registry or policy.model_id not in pik_registry:
                raise RoutingError(f"no probe loaded for stage {policy.model_id!r}")


def _live_header(config: CascadeConfig, pik_registry, model_specs, pricing,
                 dataset_name: str) -> TraceHeader:
    specs = []
    hidden_dims: dict[str, int] = {}
    for policy in config.stages:
        source = None
        if model_specs and policy.model_id in model_specs:
            source = model_specs[policy.model_id]
        elif pricing and policy.model_id in pricing:
            source = pricing[policy.model_id]
        specs.append(source if source is not None
                     else ModelSpec(model_id=policy.model_id, kind="api_only"))
        if policy.use_pik and pik_registry and policy.model_id in pik_registry:
            hidden_dims[policy.model_id] = pik_registry[policy.model_id].input_dim
    return TraceHeader(models=tuple(specs), hidden_dims=hidden_dims,
                       dataset_name=dataset_name)


def _strip_undeclared_hidden(record: QueryTrace,
                             header: TraceHeader) -> tuple[QueryTrace, set[str]]:
    """Drop hidden vectors the header declares no length for.

    Backends may expose hidden states on stages that never gate on the
    probe. The trace format only admits vectors whose length the header
    declares, and rejecting the whole record would lose the query from
    the trace, so the undeclared vectors are shed instead.
    """
    undeclared = {mid for mid, obs in record.observations.items()
                  if obs.hidden_state is not None and mid not in header.hidden_dims}
    if not undeclared:
        return record, undeclared
    observations = {
        mid: (dataclasses.replace(obs, hidden_state=None) if mid in undeclared else obs)
        for mid, obs in record.observations.items()}
    return dataclasses.replace(record, observations=observations), undeclared


def _usd_estimate(record: QueryTrace, pricing: Mapping[str, ModelSpec] | None) -> float | None:
    if not pricing:
        return None
    total = 0.0
    for mid, obs in record.observations.items():
        spec = pricing.get(mid)
        if spec is None:
            return None
        total += usd_cost(obs.tokens_in, obs.tokens_out, spec)
    return total


def _log(**fields) -> None:
    logger.info(json.dumps(fields, sort_keys=True))
