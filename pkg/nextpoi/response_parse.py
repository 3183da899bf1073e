"""Pull the ``recommendation`` / ``reason`` object out of raw model text.

Failing to find one is reported through ParseStatus, never raised: the evaluation scores
such a case as a miss.
"""
import enum
import json
import math
from typing import Any, Iterator, List, Optional, Sequence, Tuple

import structlog
from pydantic import BaseModel, root_validator

from nextpoi.candidates import CandidateSet

logger = structlog.get_logger(__name__)


@enum.unique
class ParseStatus(str, enum.Enum):
    clean = "clean"
    recovered = "recovered"
    failed = "failed"


class Recommendation(BaseModel):
    poi_ids: List[str]
    reason: str = ""
    raw_text: str = ""
    parse_status: ParseStatus

    class Config:
        extra = "forbid"
        frozen = True

    @root_validator(skip_on_failure=True)
    def validate_unique(cls, values):
        if len(set(values['poi_ids'])) != len(values['poi_ids']):
            raise ValueError('recommended poi_ids must be unique')
        return values


def parse_recommendation(raw_text: str) -> Tuple[List[str], str, ParseStatus]:
    """Strict JSON first, then the first embedded ``{...}`` object with a recommendation list."""
    payload = _as_payload(_loads(raw_text.strip()))
    if payload is not None:
        return _ids(payload), _reason(payload), ParseStatus.clean

    for candidate in _embedded_objects(raw_text):
        payload = _as_payload(candidate)
        if payload is not None:
            return _ids(payload), _reason(payload), ParseStatus.recovered

    logger.debug('no recommendation object in model output', length=len(raw_text))
    return [], "", ParseStatus.failed


def sanitize(ids: Sequence[str], candidate_set: CandidateSet, k: int = 10) -> List[str]:
    """Keep candidate ids only, first occurrence wins, at most k. Short lists are not padded."""
    allowed = set(candidate_set.poi_ids)
    seen = set()
    kept: List[str] = []
    for poi_id in ids:
        if len(kept) >= k:
            break
        if poi_id in allowed and poi_id not in seen:
            seen.add(poi_id)
            kept.append(poi_id)
    return kept


def to_recommendation(raw_text: str, candidate_set: CandidateSet, k: int = 10) -> Recommendation:
    ids, reason, status = parse_recommendation(raw_text)
    return Recommendation(
        poi_ids=sanitize(ids, candidate_set, k),
        reason=reason,
        raw_text=raw_text,
        parse_status=status,
    )


def _loads(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        return None


def _as_payload(obj: Any) -> Optional[dict]:
    if isinstance(obj, dict) and isinstance(obj.get('recommendation'), list):
        return obj
    return None


def _ids(payload: dict) -> List[str]:
    ids = []
    for item in payload['recommendation']:
        # bool is an int subclass; true/false are never ids.
        if isinstance(item, bool):
            continue
        if isinstance(item, str):
            ids.append(item.strip())
        elif isinstance(item, int):
            ids.append(str(item))
        elif isinstance(item, float) and math.isfinite(item):
            ids.append(str(int(item)) if item.is_integer() else repr(item))
    return ids


def _reason(payload: dict) -> str:
    reason = payload.get('reason', '')
    return reason if isinstance(reason, str) else ''


def _embedded_objects(text: str) -> Iterator[Any]:
    """Decode a JSON value at every ``{`` in turn, outer objects before the ones nested in them."""
    decoder = json.JSONDecoder()
    start = text.find('{')
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(text, start)
        except ValueError:
            pass
        else:
            yield obj
        start = text.find('{', start + 1)
