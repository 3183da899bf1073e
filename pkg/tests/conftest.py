from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import httpx
import pytest

from nextpoi.dataset import PoiCatalog
from nextpoi.logging import RawLogCapture, configure_logging
from nextpoi.types import CheckIn, Poi, TestCase

# Tue Apr 03 18:00:09 +0000 2012
BASE_TIME = 1333476009

# Longer than a trajectory window, so every synthetic day is its own trajectory.
DAY_STRIDE = 100_000

CATEGORIES = ["Coffee Shop", "Office", "Bar"]

GRID_POIS = [
    Poi(
        poi_id=f"p{i}",
        category=CATEGORIES[i % 3],
        category_id=f"cat{i % 3}",
        lat=40.70 + 0.01 * i,
        lon=-74.0,
    )
    for i in range(10)
]


@pytest.fixture(scope="session", autouse=True)
def _configure_logging():
    configure_logging(True, "INFO", "DEBUG")


@pytest.fixture
def log_capture():
    """Reset logs and enable log capture for a test.

    Returns a context manager which returns the list of logged structlog dicts"""

    @contextmanager
    def _log_capture():
        logcap = RawLogCapture()
        configure_logging(True, "INFO", "DEBUG", log_capture=logcap)
        yield logcap.entries

    yield _log_capture

    configure_logging(True, "INFO", "DEBUG")


def format_utc(utc_time: int) -> str:
    return datetime.fromtimestamp(utc_time, tz=timezone.utc).strftime("%a %b %d %H:%M:%S +0000 %Y")


def checkin_line(user_id: str, poi: Poi, utc_time: int, tz_offset: int = -240) -> str:
    return "\t".join(
        [
            user_id,
            poi.poi_id,
            poi.category_id,
            poi.category,
            repr(poi.lat),
            repr(poi.lon),
            str(tz_offset),
            format_utc(utc_time),
        ]
    )


def write_checkins(path: Path, rows: Iterable[Tuple[str, Poi, int]]) -> Path:
    path.write_text(
        "".join(checkin_line(user, poi, t) + "\n" for user, poi, t in rows), encoding="utf-8"
    )
    return path


def revisit_rows(users: int = 6, days: int = 10) -> List[Tuple[str, Poi, int]]:
    """Each user checks in twice per day at one grid POI, half an hour apart.

    With 80/10/10 ratios the test split is exactly the last day, and every test case's
    ground truth is the POI of its current position.
    """
    rows = []
    for day in range(days):
        for user in range(users):
            poi = GRID_POIS[(user + day) % len(GRID_POIS)]
            start = BASE_TIME + day * DAY_STRIDE + user * 600
            rows.append((f"u{user}", poi, start))
            rows.append((f"u{user}", poi, start + 1800))
    return rows


@pytest.fixture
def revisit_dataset(tmp_path) -> Path:
    return write_checkins(tmp_path / "revisits.tsv", revisit_rows())


@pytest.fixture
def grid_catalog() -> PoiCatalog:
    return PoiCatalog(GRID_POIS)


def make_checkins(user_id: str, poi_ids: Sequence[str], start: int = BASE_TIME) -> List[CheckIn]:
    return [
        CheckIn(user_id=user_id, poi_id=poi_id, utc_time=start + 600 * i)
        for i, poi_id in enumerate(poi_ids)
    ]


def make_test_case(
    catalog: PoiCatalog, context_ids: Sequence[str], ground_truth: str, user_id: str = "u0"
) -> TestCase:
    context = make_checkins(user_id, context_ids)
    return TestCase(
        trajectory_id=f"{user_id}-{context[0].utc_time}",
        user_id=user_id,
        context=context,
        ground_truth_poi=ground_truth,
        current_position=catalog[context_ids[-1]].position,
    )


@pytest.fixture
def no_network(mocker):
    """Fail the test on any attempt to send an HTTP request."""

    def _panic(*args, **kwargs):
        raise AssertionError("unexpected network access")

    mocker.patch.object(httpx.Client, "send", side_effect=_panic)
    mocker.patch.object(httpx.HTTPTransport, "handle_request", side_effect=_panic)

