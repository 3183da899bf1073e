"""Deterministic in-process backends that read the rendered prompt instead of calling a model.

Each policy is registered by name with ``@mock_policy`` and built with ``mock_backend(name)``.
"""
import hashlib
import json
import re
import threading
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Type, Union

import structlog

from nextpoi.dataset import TrainStats
from nextpoi.prompting import (
    CANDIDATE_HEADER,
    COLD_USER_LINE,
    DEFAULT_TOP_K,
    LONG_TERM_HEADER,
    RECENT_HEADER,
)

from .errors import FixtureExhausted
from .types import ChatRequest, ChatResponse

logger = structlog.get_logger(__name__)

LINE_PATTERN = re.compile(
    r"^\(POIID (?P<poi_id>.+?), Category (?P<category>.*?)"
    r"(?:, Distance (?P<distance>\d+\.\d{2}) km)?\)"
    r"(?P<current> \[current position\])?$"
)
TOP_K_PATTERN = re.compile(r"exactly (\d+) POIIDs")


class PromptLine(NamedTuple):
    poi_id: str
    category: str
    distance_km: Optional[float] = None
    current: bool = False


@dataclass
class ParsedPrompt:
    long_term: Optional[List[PromptLine]] = None
    """None when the prompt has no long-term block, empty for a cold user"""
    recent: List[PromptLine] = field(default_factory=list)
    current: Optional[PromptLine] = None
    candidates: List[PromptLine] = field(default_factory=list)
    top_k: int = DEFAULT_TOP_K


def parse_prompt_line(line: str) -> Optional[PromptLine]:
    match = LINE_PATTERN.match(line)
    if not match:
        return None
    distance = match.group("distance")
    return PromptLine(
        poi_id=match.group("poi_id"),
        category=match.group("category"),
        distance_km=float(distance) if distance is not None else None,
        current=match.group("current") is not None,
    )


def parse_prompt_sections(user_text: str) -> ParsedPrompt:
    """Recover the check-in and candidate lists from a rendered user prompt."""
    parsed = ParsedPrompt()

    for section in user_text.split("\n\n"):
        header, *body = section.split("\n")
        if header == LONG_TERM_HEADER:
            if body == [COLD_USER_LINE]:
                parsed.long_term = []
            else:
                parsed.long_term = [line for line in map(parse_prompt_line, body) if line]
        elif header == RECENT_HEADER:
            parsed.recent = [line for line in map(parse_prompt_line, body) if line]
        elif header.startswith(CANDIDATE_HEADER.rstrip(":")):
            parsed.candidates = [line for line in map(parse_prompt_line, body) if line]
        elif not body:
            line = parse_prompt_line(header)
            if line is not None and line.current:
                parsed.recent = [line]

    currents = [line for line in parsed.recent if line.current]
    parsed.current = currents[-1] if currents else None

    top_k = TOP_K_PATTERN.search(user_text)
    if top_k:
        parsed.top_k = int(top_k.group(1))

    return parsed


def _count_tokens(text: str) -> int:
    return len(text.split())


class MockBackend:
    """Base class; subclasses implement ``respond``."""

    policy: str = ""

    def complete(self, request: ChatRequest) -> ChatResponse:
        text = self.respond(request)
        return ChatResponse(
            text=text,
            prompt_tokens=sum(_count_tokens(m.content) for m in request.messages),
            completion_tokens=_count_tokens(text),
            latency_ms=0,
            from_cache=False,
        )

    def respond(self, request: ChatRequest) -> str:
        raise NotImplementedError


_policy_to_backend_type: Dict[str, Type[MockBackend]] = {}


def mock_policy(name: str):
    """Decorator to register a MockBackend implementation under a policy name"""

    def decorator_outer(clazz):
        clazz.policy = name
        _policy_to_backend_type[name] = clazz
        return clazz

    return decorator_outer


def mock_policies() -> List[str]:
    return sorted(_policy_to_backend_type)


def mock_backend(policy: str, **kwargs) -> MockBackend:
    try:
        clazz = _policy_to_backend_type[policy]
    except KeyError:
        raise ValueError(
            f"unknown mock policy {policy!r}, expected one of {mock_policies()}"
        ) from None
    return clazz(**kwargs)


def _recommendation_text(poi_ids: List[str], reason: str) -> str:
    return json.dumps({"recommendation": poi_ids, "reason": reason})


def is_dist_ascending(candidates: List[PromptLine]) -> bool:
    distances = [c.distance_km for c in candidates]
    rising = all(a <= b for a, b in zip(distances, distances[1:]))
    return rising and len(set(distances)) > 1


@mock_policy("nearest_k")
class NearestBackend(MockBackend):
    """Recommends the k candidates with the smallest printed distance, ties by poi_id.

    A prompt whose printed distances already rise (and are not all equal) is in dist-asc
    order, which also settles differences below the printed precision, so it is kept as is.
    Without distances the prompt order itself is the answer.
    """

    def respond(self, request: ChatRequest) -> str:
        parsed = parse_prompt_sections(request.user_text)
        candidates = parsed.candidates
        if candidates and all(c.distance_km is not None for c in candidates):
            if not is_dist_ascending(candidates):
                candidates = sorted(candidates, key=lambda c: (c.distance_km, c.poi_id))
        return _recommendation_text(
            [c.poi_id for c in candidates[: parsed.top_k]],
            "These candidates are the closest to the current position.",
        )


@mock_policy("popular_k")
class PopularBackend(MockBackend):
    """Recommends the k most visited candidates according to a popularity sidecar.

    The sidecar is a TrainStats, a poi_id -> count mapping or a JSON file holding one.
    Ties go to the smaller poi_id.
    """

    def __init__(self, popularity: Union[TrainStats, Mapping, str, Path, None] = None):
        if popularity is None:
            counts = {}
        elif isinstance(popularity, TrainStats):
            counts = dict(popularity.poi_counts)
        elif isinstance(popularity, Mapping):
            counts = dict(popularity)
        else:
            counts = json.loads(Path(popularity).read_text(encoding="utf-8"))
        self._counts: Dict[str, int] = {str(k): int(v) for k, v in counts.items()}

    def respond(self, request: ChatRequest) -> str:
        parsed = parse_prompt_sections(request.user_text)
        ranked = sorted(parsed.candidates, key=lambda c: (-self._counts.get(c.poi_id, 0), c.poi_id))
        return _recommendation_text(
            [c.poi_id for c in ranked[: parsed.top_k]],
            "These candidates are the most visited ones.",
        )


@mock_policy("fixture_replay")
class ReplayBackend(MockBackend):
    """Returns scripted texts in file order, one per call.

    The fixture is JSONL with a ``text`` field per line.
    """

    def __init__(self, path: Union[str, Path]):
        self._path = Path(path)
        self._texts: List[str] = []
        with open(self._path, encoding="utf-8") as infile:
            for line in infile:
                if line.strip():
                    self._texts.append(json.loads(line)["text"])
        self._used = 0
        self._lock = threading.Lock()

    def respond(self, request: ChatRequest) -> str:
        with self._lock:
            if self._used >= len(self._texts):
                raise FixtureExhausted(self._path, self._used)
            text = self._texts[self._used]
            self._used += 1
        return text


@mock_policy("garbage")
class GarbageBackend(MockBackend):
    """Prose with no JSON object in it, for exercising the failure path of the parser."""

    def respond(self, request: ChatRequest) -> str:
        digest = hashlib.sha256(request.user_text.encode("utf-8")).hexdigest()[:8]
        return (
            "I am not able to pick places for this user right now, "
            f"please try again later (ref {digest})."
        )
