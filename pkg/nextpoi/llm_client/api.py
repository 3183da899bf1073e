import time
from typing import Any, Dict, Optional, Protocol, runtime_checkable

import backoff
import httpx
import structlog

from . import errors
from .types import ChatRequest, ChatResponse

logger = structlog.get_logger(__name__)

DEFAULT_BASE_URL = "https://api.openai.com/v1"
USER_AGENT = "nextpoi"


@runtime_checkable
class ChatBackend(Protocol):
    """Anything that turns a ChatRequest into a ChatResponse: the live API or a mock policy."""

    def complete(self, request: ChatRequest) -> ChatResponse:
        ...


def _log_backoff(details: Dict[str, Any]) -> None:
    exc = details.get("exception")
    logger.warning(
        "retrying chat completion",
        tries=details["tries"],
        wait_seconds=round(details["wait"], 3),
        status_code=getattr(exc, "status_code", None),
    )


class ChatCompletionsAPI:
    """Client for an OpenAI-compatible ``/chat/completions`` endpoint.

    429 and 5xx answers are retried with jittered exponential backoff; 401/403 are not.
    Pass ``transport`` to swap the network for e.g. ``httpx.MockTransport``.
    """

    def __init__(
        self,
        base_url: str = DEFAULT_BASE_URL,
        api_key: Optional[str] = None,
        timeout_seconds: float = 60.0,
        max_attempts: int = 5,
        backoff_base_seconds: float = 1.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        if not api_key:
            raise errors.MissingCredentialError()

        self._base_url = base_url.rstrip("/")
        self._client = httpx.Client(http2=True, transport=transport)
        self._client.headers["User-Agent"] = USER_AGENT
        self._client.headers["Authorization"] = f"Bearer {api_key}"
        self._default_timeout = httpx.Timeout(timeout_seconds, connect=min(timeout_seconds, 10.0))

        self._complete_with_retries = backoff.on_exception(
            backoff.expo,
            (errors.RateLimitedError, errors.ServerError),
            max_tries=max_attempts,
            jitter=backoff.full_jitter,
            on_backoff=_log_backoff,
            factor=backoff_base_seconds,
        )(self._complete_once)

    @property
    def base_url(self) -> str:
        return self._base_url

    def complete(self, request: ChatRequest) -> ChatResponse:
        return self._complete_with_retries(request)

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()

    def post(self, endpoint: str, operation: str, **kwargs) -> Dict[str, Any]:
        return self._request("POST", endpoint, operation, **kwargs)

    def _complete_once(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": request.model,
            "messages": [{"role": m.role.value, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }

        started = time.monotonic()
        resp = self.post("chat/completions", "chat completion", json=body)
        latency_ms = int((time.monotonic() - started) * 1000)

        try:
            text = resp["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise errors.BadAPIResponseError("no choices[0].message.content") from None

        usage = resp.get("usage") or {}
        return ChatResponse(
            text=text,
            prompt_tokens=usage.get("prompt_tokens") or 0,
            completion_tokens=usage.get("completion_tokens") or 0,
            latency_ms=latency_ms,
            from_cache=False,
        )

    def _request(self, method: str, endpoint: str, operation: str, **kwargs) -> Dict[str, Any]:
        full_url = f"{self._base_url}/{endpoint}"
        kwargs.setdefault("timeout", self._default_timeout)
        logger.debug(
            "making api request to model endpoint",
            method=method,
            endpoint=endpoint,
            operation=operation,
        )

        try:
            resp = self._client.request(method, full_url, **kwargs)
        except httpx.TimeoutException as e:
            raise errors.LLMTimeoutError(operation) from e
        except httpx.HTTPError as e:
            raise errors.TransportError(operation) from e

        return self._check_response(resp, operation)

    def _check_response(self, resp: httpx.Response, operation: str) -> Dict[str, Any]:
        try:
            response = resp.json()
        except ValueError:
            response = resp.text

        status = resp.status_code
        if status in (401, 403):
            raise errors.AuthError(status, response, operation)
        elif status == 429:
            raise errors.RateLimitedError(status, response, operation)
        elif status >= 500:
            raise errors.ServerError(status, response, operation)
        elif status != 200:
            raise errors.LLMAPIError(status, response, operation)
        elif not isinstance(response, dict):
            raise errors.BadAPIResponseError()

        return response


def complete(backend: ChatBackend, request: ChatRequest) -> ChatResponse:
    return backend.complete(request)
