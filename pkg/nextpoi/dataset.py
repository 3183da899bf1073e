"""Check-in ingestion: POI catalog, chronological check-ins, trajectories, splits and test cases.

Input records are tab separated, one check-in per line:

    user_id, venue_id, category_id, category_name, lat, lon, tz offset (minutes), UTC time

with the UTC time written like ``Tue Apr 03 18:00:09 +0000 2012``.
"""
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from fractions import Fraction
from operator import attrgetter
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import pandas as pd
import structlog
from pydantic import BaseModel, ValidationError

from nextpoi.errors import (
    DatasetIOError,
    EmptyDataset,
    MalformedRecord,
    TrajectoryTooShort,
    UnknownPoi,
)
from nextpoi.types import TRAJECTORY_WINDOW_SECONDS, CheckIn, Poi, TestCase, Trajectory

logger = structlog.get_logger(__name__)

FIELD_COUNT = 8
TIMESTAMP_FORMAT = '%a %b %d %H:%M:%S %z %Y'
DEFAULT_SPLIT_RATIOS = (0.8, 0.1, 0.1)


class PoiCatalog:
    """Immutable mapping of poi_id -> Poi"""

    def __init__(self, pois: Iterable[Poi]):
        self._pois: Dict[str, Poi] = {}
        for poi in pois:
            if poi.poi_id in self._pois:
                raise ValueError(f'POI {poi.poi_id!r} appears twice in the catalog')
            self._pois[poi.poi_id] = poi

        # Sorted once; sampling and tie-breaking rely on a stable id order.
        self._ids: Tuple[str, ...] = tuple(sorted(self._pois))

    @property
    def ids(self) -> Tuple[str, ...]:
        return self._ids

    def get(self, poi_id: str, default: Optional[Poi] = None) -> Optional[Poi]:
        return self._pois.get(poi_id, default)

    def __getitem__(self, poi_id: str) -> Poi:
        try:
            return self._pois[poi_id]
        except KeyError:
            raise UnknownPoi(poi_id) from None

    def __contains__(self, poi_id: object) -> bool:
        return poi_id in self._pois

    def __len__(self) -> int:
        return len(self._pois)

    def __iter__(self) -> Iterator[Poi]:
        return (self._pois[poi_id] for poi_id in self._ids)


@dataclass(frozen=True)
class IngestResult:
    catalog: PoiCatalog
    checkins: Tuple[CheckIn, ...]
    """All check-ins, sorted by utc_time; ties keep file order"""
    malformed_records: int = 0
    duplicate_poi_conflicts: int = 0


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[CheckIn, ...]
    validation: Tuple[CheckIn, ...]
    test_trajectories: Tuple[Trajectory, ...]

    @property
    def evaluable_trajectories(self) -> Tuple[Trajectory, ...]:
        """Test trajectories long enough to yield a test case (k >= 2)."""
        return tuple(t for t in self.test_trajectories if len(t) >= 2)

    @property
    def short_trajectory_count(self) -> int:
        return len(self.test_trajectories) - len(self.evaluable_trajectories)


@dataclass(frozen=True)
class TrainStats:
    """Visit counts over the train split only."""

    poi_counts: Counter = field(default_factory=Counter)
    category_counts: Counter = field(default_factory=Counter)
    user_checkins: Dict[str, Tuple[CheckIn, ...]] = field(default_factory=dict)
    user_poi_counts: Dict[str, Counter] = field(default_factory=dict)

    def popularity(self, poi_id: str) -> int:
        return self.poi_counts.get(poi_id, 0)

    def category_frequency(self, category: str) -> int:
        return self.category_counts.get(category, 0)

    def history(self, user_id: str) -> Tuple[CheckIn, ...]:
        return self.user_checkins.get(user_id, ())

    def user_popularity(self, user_id: str, poi_id: str) -> int:
        return self.user_poi_counts.get(user_id, Counter()).get(poi_id, 0)


def parse_checkin_line(line: str, line_number: Optional[int] = None) -> Tuple[CheckIn, Poi]:
    """Parse one raw record into its check-in and the POI attributes it carries."""
    fields = [f.strip() for f in line.rstrip('\r\n').split('\t')]
    if len(fields) != FIELD_COUNT:
        raise MalformedRecord(f'expected {FIELD_COUNT} fields, got {len(fields)}', line_number)

    (
        user_id,
        venue_id,
        category_id,
        category_name,
        raw_lat,
        raw_lon,
        raw_offset,
        raw_time,
    ) = fields

    if not user_id or not venue_id:
        raise MalformedRecord('empty user or venue id', line_number)

    try:
        lat = float(raw_lat)
        lon = float(raw_lon)
    except ValueError:
        raise MalformedRecord(
            f'unparseable coordinates {raw_lat!r}, {raw_lon!r}', line_number
        ) from None

    if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
        raise MalformedRecord(f'latitude {lat} out of range', line_number)
    if not (math.isfinite(lon) and -180.0 <= lon <= 180.0):
        raise MalformedRecord(f'longitude {lon} out of range', line_number)

    try:
        tz_offset = int(raw_offset)
    except ValueError:
        raise MalformedRecord(f'unparseable timezone offset {raw_offset!r}', line_number) from None

    try:
        utc_time = int(datetime.strptime(raw_time, TIMESTAMP_FORMAT).timestamp())
    except ValueError:
        raise MalformedRecord(f'unparseable timestamp {raw_time!r}', line_number) from None

    try:
        poi = Poi(
            poi_id=venue_id, category=category_name, category_id=category_id, lat=lat, lon=lon
        )
        checkin = CheckIn(
            user_id=user_id, poi_id=venue_id, utc_time=utc_time, tz_offset_minutes=tz_offset
        )
    except ValidationError as e:
        raise MalformedRecord(str(e), line_number) from None

    return checkin, poi


def load_dataset(path: Union[str, Path], strict: bool = False) -> IngestResult:
    """Read a check-in file into a deduplicated catalog and time-sorted check-ins.

    Malformed lines are logged and skipped, or abort the load when strict. When a POI
    shows up with differing attributes, its first definition wins.
    """
    pois: Dict[str, Poi] = {}
    checkins: List[CheckIn] = []
    malformed = 0
    conflicts = 0

    try:
        with open(path, encoding='utf-8') as infile:
            for line_number, line in enumerate(infile, start=1):
                if not line.strip():
                    continue

                try:
                    checkin, poi = parse_checkin_line(line, line_number)
                except MalformedRecord as e:
                    if strict:
                        raise
                    malformed += 1
                    logger.warning(
                        'skipping malformed check-in record',
                        line_number=line_number,
                        reason=e.reason,
                    )
                    continue

                known = pois.get(poi.poi_id)
                if known is None:
                    pois[poi.poi_id] = poi
                elif known != poi:
                    conflicts += 1

                checkins.append(checkin)
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetIOError(path, e) from e

    if not checkins:
        raise EmptyDataset(str(path))

    if conflicts:
        logger.warning('conflicting POI definitions, kept first occurrence', conflicts=conflicts)

    # list.sort is stable: equal timestamps keep file order.
    checkins.sort(key=attrgetter('utc_time'))

    logger.info(
        'loaded check-ins',
        path=str(path),
        checkins=len(checkins),
        pois=len(pois),
        malformed=malformed,
    )

    return IngestResult(
        catalog=PoiCatalog(pois.values()),
        checkins=tuple(checkins),
        malformed_records=malformed,
        duplicate_poi_conflicts=conflicts,
    )


def segment_trajectories(checkins: Sequence[CheckIn]) -> List[Trajectory]:
    """Greedily cut one user's time-sorted check-ins into 24-hour trajectories.

    A check-in joins the open trajectory while it is at most 24 hours after that
    trajectory's first check-in; otherwise it opens a new one.
    """
    if len({c.user_id for c in checkins}) > 1:
        raise ValueError('segment_trajectories expects the check-ins of a single user')

    trajectories: List[Trajectory] = []
    current: List[CheckIn] = []

    for checkin in checkins:
        if current and checkin.utc_time - current[0].utc_time > TRAJECTORY_WINDOW_SECONDS:
            trajectories.append(_make_trajectory(current))
            current = []
        current.append(checkin)

    if current:
        trajectories.append(_make_trajectory(current))

    return trajectories


def segment_all_users(checkins: Sequence[CheckIn]) -> List[Trajectory]:
    """Segment every user's check-ins; result ordered by (start time, trajectory_id)."""
    by_user: Dict[str, List[CheckIn]] = defaultdict(list)
    for checkin in checkins:
        by_user[checkin.user_id].append(checkin)

    trajectories = [
        trajectory
        for user_checkins in by_user.values()
        for trajectory in segment_trajectories(user_checkins)
    ]
    trajectories.sort(key=lambda t: (t.start_time, t.trajectory_id))
    return trajectories


def chronological_split(
    checkins: Sequence[CheckIn], ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS
) -> DatasetSplit:
    """Split time-sorted check-ins by count into train / validation / test.

    Boundaries sit at floor(r0 * N) and floor((r0 + r1) * N). The test portion is
    segmented per user into trajectories.
    """
    if not checkins:
        raise EmptyDataset()

    train_ratio, validation_ratio = validate_split_ratios(ratios)
    n = len(checkins)
    train_end = math.floor(train_ratio * n)
    validation_end = math.floor((train_ratio + validation_ratio) * n)

    test_trajectories = segment_all_users(checkins[validation_end:])

    return DatasetSplit(
        train=tuple(checkins[:train_end]),
        validation=tuple(checkins[train_end:validation_end]),
        test_trajectories=tuple(test_trajectories),
    )


def make_test_case(trajectory: Trajectory, catalog: PoiCatalog) -> TestCase:
    """First k-1 check-ins become context, check-in k the ground truth."""
    if len(trajectory) < 2:
        raise TrajectoryTooShort(trajectory.trajectory_id, len(trajectory))

    context = trajectory.checkins[:-1]
    ground_truth = trajectory.checkins[-1].poi_id
    if ground_truth not in catalog:
        raise UnknownPoi(ground_truth)

    return TestCase(
        trajectory_id=trajectory.trajectory_id,
        user_id=trajectory.user_id,
        context=list(context),
        ground_truth_poi=ground_truth,
        current_position=catalog[context[-1].poi_id].position,
    )


def make_test_cases(split: DatasetSplit, catalog: PoiCatalog) -> List[TestCase]:
    """Test cases for every evaluable trajectory, in chronological order."""
    cases = [make_test_case(t, catalog) for t in split.evaluable_trajectories]

    if split.short_trajectory_count:
        logger.info(
            'dropped single check-in test trajectories',
            dropped=split.short_trajectory_count,
            kept=len(cases),
        )

    return cases


def build_stats(train: Iterable[CheckIn], catalog: PoiCatalog) -> TrainStats:
    poi_counts: Counter = Counter()
    category_counts: Counter = Counter()
    user_checkins: Dict[str, List[CheckIn]] = defaultdict(list)
    user_poi_counts: Dict[str, Counter] = defaultdict(Counter)

    # train is time-sorted, so per-user lists come out time-ordered.
    for checkin in train:
        poi_counts[checkin.poi_id] += 1
        category_counts[catalog[checkin.poi_id].category] += 1
        user_checkins[checkin.user_id].append(checkin)
        user_poi_counts[checkin.user_id][checkin.poi_id] += 1

    return TrainStats(
        poi_counts=poi_counts,
        category_counts=category_counts,
        user_checkins={user: tuple(checkins) for user, checkins in user_checkins.items()},
        user_poi_counts=dict(user_poi_counts),
    )


class DatasetStats(BaseModel):
    """Dataset summary in the shape of a dataset statistics table row"""

    dataset: str
    users: int
    pois: int
    categories: int
    category_names: int
    checkins: int
    train_checkins: int
    validation_checkins: int
    test_checkins: int
    test_trajectories: int
    test_cases: int
    dropped_short_trajectories: int
    malformed_records: int
    duplicate_poi_conflicts: int


def describe_dataset(name: str, ingested: IngestResult, split: DatasetSplit) -> DatasetStats:
    checkins = pd.DataFrame(
        {
            'user_id': [c.user_id for c in ingested.checkins],
            'poi_id': [c.poi_id for c in ingested.checkins],
        }
    )
    pois = pd.DataFrame(
        [(p.poi_id, p.category_id, p.category) for p in ingested.catalog],
        columns=['poi_id', 'category_id', 'category'],
    )

    test_checkins = sum(len(t) for t in split.test_trajectories)

    return DatasetStats(
        dataset=name,
        users=int(checkins['user_id'].nunique()),
        pois=len(pois),
        categories=int(pois['category_id'].nunique()),
        category_names=int(pois['category'].nunique()),
        checkins=len(checkins),
        train_checkins=len(split.train),
        validation_checkins=len(split.validation),
        test_checkins=test_checkins,
        test_trajectories=len(split.test_trajectories),
        test_cases=len(split.evaluable_trajectories),
        dropped_short_trajectories=split.short_trajectory_count,
        malformed_records=ingested.malformed_records,
        duplicate_poi_conflicts=ingested.duplicate_poi_conflicts,
    )


def _make_trajectory(checkins: List[CheckIn]) -> Trajectory:
    first = checkins[0]
    return Trajectory(
        trajectory_id=Trajectory.make_id(first.user_id, first.utc_time),
        user_id=first.user_id,
        checkins=list(checkins),
    )


def validate_split_ratios(ratios: Sequence[float]) -> Tuple[Fraction, Fraction]:
    """Return exact (train, validation) fractions so floor() never suffers float drift."""
    if len(ratios) != 3:
        raise ValueError(f'expected three split ratios, got {len(ratios)}')

    exact = [Fraction(str(r)) for r in ratios]
    if any(r < 0 for r in exact) or abs(float(sum(exact)) - 1.0) > 1e-9:
        raise ValueError(f'split ratios must be non-negative and sum to 1, got {list(ratios)}')

    return exact[0], exact[1]
