import json
from typing import Any, Optional


class LLMClientError(Exception):
    def __init__(self, msg: Optional[str] = None):
        super().__init__(msg or "There was an error while talking to the model endpoint.")

    def user_error(self) -> str:
        return str(self)


class LLMAPIError(LLMClientError):
    def __init__(self, status_code: int, body: Any, operation: str):
        self.status_code = status_code
        self.body = body
        self.operation = operation
        super().__init__(f"received {self.status_code} status from model endpoint for {operation}")

    def user_error(self) -> str:
        try:
            body = self.body
            if not isinstance(body, dict):
                body = json.loads(body)

            error = body.get("error")
            if isinstance(error, dict) and (message := error.get("message")):
                return f"There was an error while doing the {self.operation} operation.\n{message}"
            if message := body.get("detail"):
                return f"There was an error while doing the {self.operation} operation.\n{message}"
        except (json.JSONDecodeError, TypeError, AttributeError):
            pass

        return (
            f"There was an error while doing the {self.operation} operation "
            f"(status {self.status_code})."
        )


class AuthError(LLMAPIError):
    """401 / 403; never retried"""


class RateLimitedError(LLMAPIError):
    """429 after all retries"""


class ServerError(LLMAPIError):
    """5xx after all retries"""


class LLMTimeoutError(LLMClientError):
    def __init__(self, operation: str):
        super().__init__(f"Timed out waiting on operation: {operation}")


class TransportError(LLMClientError):
    def __init__(self, operation: str):
        super().__init__(f"Unable to connect to the model endpoint to perform '{operation}'")


class BadAPIResponseError(LLMClientError):
    def __init__(self, detail: str = ""):
        suffix = f": {detail}" if detail else "."
        super().__init__(f"Unable to parse response from the model endpoint{suffix}")


class MissingCredentialError(LLMClientError):
    def __init__(self):
        super().__init__("No API key configured. Set LLM_API_KEY to run against a live endpoint.")


class CacheIoError(LLMClientError):
    def __init__(self, path, cause: Exception):
        self.path = path
        super().__init__(f"Unable to write response cache entry {str(path)!r}: {cause}")


class FixtureExhausted(LLMClientError):
    def __init__(self, path, used: int):
        self.path = path
        super().__init__(f"Replay fixture {str(path)!r} ran out after {used} responses")
