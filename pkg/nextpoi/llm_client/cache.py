"""Content-addressed response cache: one JSON file per request digest.

Layout is ``<cache_dir>/<first two hex chars>/<digest>.json``. Writes go to a temp file in
the same directory and are renamed into place, so readers never see a partial entry.
"""
import json
import os
import tempfile
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional, Union

import structlog
from pydantic import BaseModel

from .api import ChatBackend
from .errors import CacheIoError
from .types import ChatRequest, ChatResponse

logger = structlog.get_logger(__name__)


class CacheStats(BaseModel):
    cache_dir: str
    entries: int = 0
    total_bytes: int = 0
    corrupt_entries: int = 0
    entries_by_model: Dict[str, int] = {}


class ResponseCache:
    def __init__(self, cache_dir: Union[str, Path]):
        self.cache_dir = Path(cache_dir)

    def path_for(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def get(self, request: ChatRequest) -> Optional[ChatResponse]:
        key = request.cache_key()
        path = self.path_for(key)
        if not path.exists():
            return None

        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
            if entry["key"] != key or not isinstance(entry["text"], str):
                raise ValueError("entry does not match its key")
            return ChatResponse(
                text=entry["text"],
                prompt_tokens=entry.get("prompt_tokens", 0),
                completion_tokens=entry.get("completion_tokens", 0),
                latency_ms=0,
                from_cache=True,
            )
        except (OSError, ValueError, KeyError, TypeError) as e:
            # Treated as a miss; the next put overwrites it.
            logger.warning("ignoring corrupt cache entry", path=str(path), error=str(e))
            return None

    def put(self, request: ChatRequest, response: ChatResponse) -> Path:
        key = request.cache_key()
        path = self.path_for(key)
        entry = {
            "key": key,
            "request": request.key_inputs(),
            "text": response.text,
            "prompt_tokens": response.prompt_tokens,
            "completion_tokens": response.completion_tokens,
            "created_at": datetime.now(timezone.utc).isoformat(),
        }

        tmp_name = None
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with tempfile.NamedTemporaryFile(
                "w", encoding="utf-8", dir=path.parent, suffix=".tmp", delete=False
            ) as tmp:
                tmp_name = tmp.name
                json.dump(entry, tmp, sort_keys=True, ensure_ascii=False)
            os.replace(tmp_name, path)
        except OSError as e:
            if tmp_name is not None and os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise CacheIoError(path, e) from e

        return path

    def stats(self) -> CacheStats:
        stats = CacheStats(cache_dir=str(self.cache_dir))
        by_model: Counter = Counter()

        if not self.cache_dir.is_dir():
            return stats

        for path in sorted(self.cache_dir.glob("*/*.json")):
            stats.entries += 1
            stats.total_bytes += path.stat().st_size
            try:
                entry = json.loads(path.read_text(encoding="utf-8"))
                by_model[entry["request"]["model"]] += 1
            except (OSError, ValueError, KeyError, TypeError):
                stats.corrupt_entries += 1

        stats.entries_by_model = dict(sorted(by_model.items()))
        return stats


def cached_complete(
    backend: ChatBackend, cache: Union[ResponseCache, str, Path], request: ChatRequest
) -> ChatResponse:
    """Serve from the cache when possible, otherwise call the backend and store the answer."""
    if not isinstance(cache, ResponseCache):
        cache = ResponseCache(cache)

    hit = cache.get(request)
    if hit is not None:
        logger.debug("response cache hit", model=request.model)
        return hit

    logger.debug("response cache miss", model=request.model)
    response = backend.complete(request)
    cache.put(request, response)
    return response
