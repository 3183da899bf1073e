import json
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest

from nextpoi.llm_client.cache import ResponseCache, cached_complete
from nextpoi.llm_client.errors import CacheIoError
from nextpoi.llm_client.types import ChatMessage, ChatRequest, ChatResponse, Role


class CountingBackend:
    def __init__(self, text: str = '{"recommendation": ["a"], "reason": "near"}'):
        self.text = text
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
        return ChatResponse(text=self.text, prompt_tokens=10, completion_tokens=5, latency_ms=40)


def make_request(content: str = "pick a place", **kwargs) -> ChatRequest:
    return ChatRequest(messages=[ChatMessage(role=Role.user, content=content)], **kwargs)


def test_hit_after_miss(tmp_path):
    backend = CountingBackend()
    cache = ResponseCache(tmp_path)
    request = make_request()

    first = cached_complete(backend, cache, request)
    assert first.from_cache is False
    assert backend.calls == 1

    second = cached_complete(backend, tmp_path, request)
    assert backend.calls == 1
    assert second.from_cache is True
    assert second.text == first.text
    assert second.prompt_tokens == 10
    assert second.latency_ms == 0


def test_entry_layout(tmp_path):
    request = make_request()
    path = ResponseCache(tmp_path).put(request, ChatResponse(text="hi"))

    key = request.cache_key()
    assert path == tmp_path / key[:2] / f"{key}.json"
    entry = json.loads(path.read_text())
    assert entry["key"] == key
    assert entry["text"] == "hi"
    assert entry["request"]["model"] == request.model
    assert list(path.parent.glob("*.tmp")) == []


def test_temperature_is_part_of_the_key(tmp_path):
    backend = CountingBackend()
    cached_complete(backend, tmp_path, make_request(temperature=0.0))
    cached_complete(backend, tmp_path, make_request(temperature=0.7))

    assert backend.calls == 2
    assert ResponseCache(tmp_path).stats().entries == 2


def test_concurrent_misses_leave_one_valid_entry(tmp_path):
    backend = CountingBackend()
    request = make_request()

    with ThreadPoolExecutor(max_workers=8) as pool:
        responses = list(pool.map(lambda _: cached_complete(backend, tmp_path, request), range(8)))

    assert {r.text for r in responses} == {backend.text}
    assert backend.calls >= 1
    files = list(tmp_path.glob("*/*"))
    assert [f.suffix for f in files] == [".json"]
    assert ResponseCache(tmp_path).get(request).text == backend.text


def test_corrupt_entry_is_a_miss(tmp_path, log_capture):
    cache = ResponseCache(tmp_path)
    request = make_request()
    path = cache.put(request, ChatResponse(text="old"))
    path.write_text('{"key": "trunc')

    backend = CountingBackend()
    with log_capture() as logs:
        response = cached_complete(backend, cache, request)

    assert response.from_cache is False
    assert backend.calls == 1
    assert any(log["event"] == "ignoring corrupt cache entry" for log in logs)
    assert cache.get(request).text == backend.text


def test_unwritable_cache_raises(tmp_path):
    blocker = tmp_path / "blocked"
    blocker.write_text("a file where the cache directory should be")

    with pytest.raises(CacheIoError):
        ResponseCache(blocker).put(make_request(), ChatResponse(text="x"))


def test_stats(tmp_path):
    cache = ResponseCache(tmp_path)
    assert ResponseCache(tmp_path / "nowhere").stats().entries == 0

    cache.put(make_request("one"), ChatResponse(text="a"))
    cache.put(make_request("two", model="other-model"), ChatResponse(text="b"))
    broken = cache.put(make_request("three"), ChatResponse(text="c"))
    broken.write_text("{")

    stats = cache.stats()
    assert stats.entries == 3
    assert stats.corrupt_entries == 1
    assert stats.total_bytes > 0
    assert stats.entries_by_model == {"gpt-3.5-turbo": 1, "other-model": 1}
