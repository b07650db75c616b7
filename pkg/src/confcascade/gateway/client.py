"""Backend completion client speaking OpenAI-compatible chat completions.

One call produces one ModelObservation: the first generated token's
top-K log-probabilities become the choice distribution (exponentiated),
usage fills the token counts, and self-hosted servers may attach the
probe's hidden-state vector through an extension field ("hidden_state"
on the first choice or at the top level).

Transport failures and 5xx/429 responses retry with exponential backoff
(base 250 ms, factor 2, full jitter); other HTTP errors fail fast.
Missing logprobs on a backend that claims to support them is a hard
error, never silent degradation. The HTTP transport, sleep, and jitter
source are injectable so tests can script faults without a network.
"""

from __future__ import annotations

import math
import os
import random
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Mapping

BACKOFF_BASE_S = 0.25
BACKOFF_FACTOR = 2.0
DEFAULT_TOP_LOGPROBS = 20
DEFAULT_MAX_TOKENS = 16

# (url, body, headers, timeout_s) -> (status_code, parsed_body)
PostFn = Callable[[str, dict, Mapping[str, str], float], tuple[int, object]]


class BackendError(Exception):
    """A backend call failed for good; carries the stage that failed."""

    def __init__(self, message: str, *, stage: str, status: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.status = status


@dataclass(frozen=True)
class BackendEndpoint:
    """Where and how to reach one stage's model server."""

    model_id: str
    base_url: str
    api_key_env: str = ""
    timeout_ms: int = 30_000
    max_retries: int = 2
    supports_logprobs: bool = True
    supports_hidden_states: bool = False

    def validate(self) -> None:
        if not self.model_id or not self.base_url:
            raise ValueError("endpoint needs model_id and base_url")
        if self.timeout_ms <= 0:
            raise ValueError(f"endpoint {self.model_id!r}: timeout_ms must be positive")
        if self.max_retries < 0:
            raise ValueError(f"endpoint {self.model_id!r}: max_retries must be non-negative")

    def to_json(self) -> dict:
        return {"model_id": self.model_id, "base_url": self.base_url,
                "api_key_env": self.api_key_env, "timeout_ms": self.timeout_ms,
                "max_retries": self.max_retries, "supports_logprobs": self.supports_logprobs,
                "supports_hidden_states": self.supports_hidden_states}

    @classmethod
    def from_json(cls, obj: Mapping) -> "BackendEndpoint":
        endpoint = cls(
            model_id=obj.get("model_id", ""),
            base_url=obj.get("base_url", ""),
            api_key_env=obj.get("api_key_env", ""),
            timeout_ms=int(obj.get("timeout_ms", 30_000)),
            max_retries=int(obj.get("max_retries", 2)),
            supports_logprobs=bool(obj.get("supports_logprobs", True)),
            supports_hidden_states=bool(obj.get("supports_hidden_states", False)),
        )
        endpoint.validate()
        return endpoint


def backend_complete(endpoint: BackendEndpoint, prompt: str,
                     need_top_logprobs: int = DEFAULT_TOP_LOGPROBS,
                     *, max_tokens: int = DEFAULT_MAX_TOKENS,
                     post: PostFn | None = None,
                     sleep: Callable[[float], None] = time.sleep,
                     rng: random.Random | None = None):
    """Issue one completion call and shape the reply into a ModelObservation."""
    from ..trace import ChoiceDistribution, ModelObservation

    endpoint.validate()
    if need_top_logprobs < 1:
        raise ValueError("need_top_logprobs must be at least 1")
    post = post or _httpx_post
    rng = rng or random.Random()

    body = {
        "model": endpoint.model_id,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0,
        "max_tokens": max_tokens,
    }
    if endpoint.supports_logprobs:
        body["logprobs"] = True
        body["top_logprobs"] = need_top_logprobs
    headers = {"Content-Type": "application/json"}
    key_env = endpoint.api_key_env
    if key_env and os.environ.get(key_env):
        headers["Authorization"] = f"Bearer {os.environ[key_env]}"

    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    timeout_s = endpoint.timeout_ms / 1000.0
    start = time.monotonic()
    obj = _post_with_retries(post, url, body, headers, timeout_s, endpoint, sleep, rng)
    latency_ms = (time.monotonic() - start) * 1000.0

    return _parse_completion(obj, endpoint, prompt, ChoiceDistribution, ModelObservation,
                             latency_ms)


def _post_with_retries(post: PostFn, url: str, body: dict, headers: Mapping[str, str],
                       timeout_s: float, endpoint: BackendEndpoint,
                       sleep: Callable[[float], None], rng: random.Random) -> object:
    last_error = "no attempt made"
    last_status: int | None = None
    for attempt in range(endpoint.max_retries + 1):
        if attempt:
            sleep(rng.uniform(0.0, BACKOFF_BASE_S * BACKOFF_FACTOR ** (attempt - 1)))
        try:
            status, parsed = post(url, body, headers, timeout_s)
        except Exception as exc:  # transport-level: connection refused, timeout
            last_error, last_status = f"transport error: {exc}", None
            continue
        if status == 200:
            return parsed
        last_error, last_status = f"HTTP {status}", status
        if status < 500 and status != 429:
            break  # client errors do not retry
    raise BackendError(f"backend {endpoint.model_id!r} failed after "
                       f"{endpoint.max_retries + 1} attempt(s): {last_error}",
                       stage=endpoint.model_id, status=last_status)


def _parse_completion(obj, endpoint: BackendEndpoint, prompt: str,
                      choice_dist_cls, observation_cls, latency_ms: float):
    if not isinstance(obj, Mapping):
        raise BackendError(f"backend {endpoint.model_id!r} returned a non-object body",
                           stage=endpoint.model_id)
    choices = obj.get("choices")
    if not isinstance(choices, list) or not choices:
        raise BackendError(f"backend {endpoint.model_id!r} returned no choices",
                           stage=endpoint.model_id)
    choice = choices[0]
    message = choice.get("message") or {}
    answer_text = (message.get("content") or "").strip()

    entries: tuple[tuple[str, float], ...] = ()
    if endpoint.supports_logprobs:
        top = _first_token_top_logprobs(choice)
        if top is None:
            raise BackendError(
                f"backend {endpoint.model_id!r} advertises logprobs but returned none",
                stage=endpoint.model_id)
        try:
            entries = tuple((str(item["token"]), math.exp(float(item["logprob"])))
                            for item in top)
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"backend {endpoint.model_id!r} sent malformed logprobs: {exc}",
                               stage=endpoint.model_id) from None
    try:
        dist = choice_dist_cls(entries=entries)
        dist.validate()
    except ValueError as exc:
        raise BackendError(f"backend {endpoint.model_id!r} sent an invalid first-token "
                           f"distribution: {exc}", stage=endpoint.model_id) from None

    usage = obj.get("usage")
    if isinstance(usage, Mapping) and "prompt_tokens" in usage and "completion_tokens" in usage:
        tokens_in = int(usage["prompt_tokens"])
        tokens_out = int(usage["completion_tokens"])
    else:
        tokens_in = len(prompt) // 4 + 1
        tokens_out = len(answer_text) // 4 + 1
        warnings.warn(f"backend {endpoint.model_id!r} sent no usage block; "
                      f"token counts estimated from text length", stacklevel=2)

    hidden = None
    if endpoint.supports_hidden_states:
        raw = choice.get("hidden_state", obj.get("hidden_state"))
        if raw is not None:
            hidden = tuple(float(v) for v in raw)

    try:
        obs = observation_cls(
            model_id=endpoint.model_id,
            answer_text=answer_text,
            choice_dist=dist,
            first_token_dist=dist if entries else None,
            hidden_state=hidden,
            tokens_in=tokens_in,
            tokens_out=tokens_out,
            latency_ms=latency_ms,
        )
        obs.validate()
    except ValueError as exc:
        raise BackendError(f"backend {endpoint.model_id!r} reply does not form a valid "
                           f"observation: {exc}", stage=endpoint.model_id) from None
    return obs


def _first_token_top_logprobs(choice: Mapping) -> list | None:
    logprobs = choice.get("logprobs")
    if not isinstance(logprobs, Mapping):
        return None
    content = logprobs.get("content")
    if not isinstance(content, list) or not content:
        return None
    top = content[0].get("top_logprobs")
    if not isinstance(top, list) or not top:
        return None
    return top


def _httpx_post(url: str, body: dict, headers: Mapping[str, str],
                timeout_s: float) -> tuple[int, object]:
    import httpx

    response = httpx.post(url, json=body, headers=dict(headers), timeout=timeout_s)
    try:
        parsed = response.json()
    except ValueError:
        parsed = response.text
    return response.status_code, parsed


def check_reachable(endpoint: BackendEndpoint, *, get: Callable | None = None) -> bool:
    """Liveness probe: GET {base_url}/models answers with any 2xx."""
    url = endpoint.base_url.rstrip("/") + "/models"
    if get is None:
        import httpx

        def get(u, timeout):
            return httpx.get(u, timeout=timeout).status_code
    try:
        status = get(url, timeout=min(endpoint.timeout_ms / 1000.0, 2.0))
    except Exception:
        return False
    return 200 <= int(status) < 300
