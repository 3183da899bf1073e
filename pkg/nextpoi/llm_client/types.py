"""Request / response types shared by the live, cached and mock chat backends"""
import enum
import hashlib
import json
import math
from typing import List

from pydantic import BaseModel, Field, conint, validator

DEFAULT_MODEL = "gpt-3.5-turbo"
DEFAULT_MAX_OUTPUT_TOKENS = 1024


@enum.unique
class Role(str, enum.Enum):
    system = "system"
    user = "user"
    assistant = "assistant"


class ChatMessage(BaseModel):
    role: Role
    content: str

    class Config:
        extra = "forbid"
        frozen = True


class ChatRequest(BaseModel):
    model: str = DEFAULT_MODEL
    messages: List[ChatMessage]
    temperature: float = 0.0
    max_output_tokens: conint(ge=1) = DEFAULT_MAX_OUTPUT_TOKENS

    class Config:
        extra = "forbid"
        frozen = True

    @validator('messages')
    def validate_messages(cls, v):
        if not v:
            raise ValueError('a chat request needs at least one message')
        return v

    @validator('temperature')
    def validate_temperature(cls, v):
        if not math.isfinite(v) or not 0.0 <= v <= 2.0:
            raise ValueError(f'temperature must lie in [0, 2], got {v}')
        return v

    @property
    def user_text(self) -> str:
        """Content of the last user message, which carries the prompt body."""
        for message in reversed(self.messages):
            if message.role is Role.user:
                return message.content
        return ""

    def key_inputs(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": m.role.value, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
        }

    def cache_key(self) -> str:
        """Hex sha256 of the canonical JSON of everything that affects the answer"""
        canonical = json.dumps(
            self.key_inputs(), sort_keys=True, separators=(',', ':'), ensure_ascii=False
        )
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


class ChatResponse(BaseModel):
    text: str
    prompt_tokens: conint(ge=0) = 0
    completion_tokens: conint(ge=0) = 0
    latency_ms: conint(ge=0) = 0
    from_cache: bool = Field(False, description="True when served from the response cache")

    class Config:
        extra = "forbid"
        frozen = True
