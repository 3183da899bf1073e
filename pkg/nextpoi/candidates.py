"""Per-test-case candidate sets: ground truth plus uniformly sampled POIs, annotated and ordered."""
import enum
import math
from bisect import bisect_left
from typing import List, Sequence

import numpy as np
import structlog
from pydantic import BaseModel, conint, root_validator, validator

from nextpoi.dataset import PoiCatalog, TrainStats
from nextpoi.geo import distances_to_candidates
from nextpoi.types import TestCase
from nextpoi.util import derive_seed

logger = structlog.get_logger(__name__)

DEFAULT_CANDIDATE_COUNT = 100


@enum.unique
class OrderingStrategy(str, enum.Enum):
    """Presentation order of candidates inside the prompt"""

    dist_asc = "dist-asc"
    dist_des = "dist-des"
    rand = "rand"
    freq_asc = "freq-asc"
    freq_des = "freq-des"


class CandidateEntry(BaseModel):
    poi_id: str
    category: str
    distance_km: float
    popularity: conint(ge=0) = 0
    """Train-split visits of this POI"""
    category_frequency: conint(ge=0) = 0
    """Train-split visits of this POI's category"""

    class Config:
        extra = "forbid"
        frozen = True

    @validator('distance_km')
    def validate_distance(cls, v):
        if not math.isfinite(v) or v < 0:
            raise ValueError(f'distance must be finite and non-negative, got {v}')
        return v


class CandidateSet(BaseModel):
    trajectory_id: str
    entries: List[CandidateEntry]
    ground_truth_poi: str
    ordering: OrderingStrategy
    seed: int

    class Config:
        extra = "forbid"
        frozen = True

    @root_validator(skip_on_failure=True)
    def validate_entries(cls, values):
        poi_ids = [e.poi_id for e in values['entries']]
        if len(set(poi_ids)) != len(poi_ids):
            raise ValueError('candidate poi_ids must be unique')
        if poi_ids.count(values['ground_truth_poi']) != 1:
            raise ValueError('the ground truth must appear exactly once among the candidates')
        return values

    @property
    def poi_ids(self) -> List[str]:
        return [e.poi_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, poi_id: object) -> bool:
        return any(e.poi_id == poi_id for e in self.entries)


def sample_candidates(
    test_case: TestCase,
    catalog: PoiCatalog,
    n: int = DEFAULT_CANDIDATE_COUNT,
    seed: int = 0,
) -> List[str]:
    """Uniform sample without replacement from the catalog minus the ground truth.

    Deterministic in (seed, trajectory_id). POIs from the user's own history may be drawn.
    """
    ids = catalog.ids
    gt_index = bisect_left(ids, test_case.ground_truth_poi)
    gt_in_catalog = gt_index < len(ids) and ids[gt_index] == test_case.ground_truth_poi
    pool_size = len(ids) - 1 if gt_in_catalog else len(ids)

    size = min(n, pool_size)
    if size < n:
        logger.debug(
            'candidate pool smaller than requested sample',
            trajectory_id=test_case.trajectory_id,
            requested=n,
            available=pool_size,
        )

    rng = np.random.default_rng(derive_seed(seed, test_case.trajectory_id, 'sample'))
    picked = rng.choice(pool_size, size=size, replace=False)

    # Pool index i maps to catalog index i, shifted by one past the ground truth.
    if gt_in_catalog:
        return [ids[i + 1] if i >= gt_index else ids[i] for i in picked.tolist()]
    return [ids[i] for i in picked.tolist()]


def build_candidate_set(
    test_case: TestCase,
    sampled_ids: Sequence[str],
    catalog: PoiCatalog,
    stats: TrainStats,
    ordering: OrderingStrategy,
    seed: int,
) -> CandidateSet:
    """Annotate sampled ids plus the ground truth with distance and popularity, then order them."""
    if test_case.ground_truth_poi in sampled_ids:
        raise ValueError('sampled candidates must not include the ground truth')

    pois = [catalog[poi_id] for poi_id in [*sampled_ids, test_case.ground_truth_poi]]
    distances = distances_to_candidates(test_case.current_position, pois)

    entries = [
        CandidateEntry(
            poi_id=poi.poi_id,
            category=poi.category,
            distance_km=distance,
            popularity=stats.popularity(poi.poi_id),
            category_frequency=stats.category_frequency(poi.category),
        )
        for poi, distance in zip(pois, distances)
    ]

    ordered = order_candidates(
        entries, ordering, derive_seed(seed, test_case.trajectory_id, 'order')
    )

    return CandidateSet(
        trajectory_id=test_case.trajectory_id,
        entries=ordered,
        ground_truth_poi=test_case.ground_truth_poi,
        ordering=ordering,
        seed=seed,
    )


def order_candidates(
    entries: Sequence[CandidateEntry], ordering: OrderingStrategy, seed: int
) -> List[CandidateEntry]:
    """Order annotated entries; every strategy is a deterministic permutation.

    Ties: distance orderings by poi_id, frequency orderings by distance then poi_id.
    rand shuffles the poi_id-sorted entries with the given seed.
    """
    ordering = OrderingStrategy(ordering)

    if ordering is OrderingStrategy.dist_asc:
        return sorted(entries, key=lambda e: (e.distance_km, e.poi_id))
    if ordering is OrderingStrategy.dist_des:
        return sorted(entries, key=lambda e: (-e.distance_km, e.poi_id))
    if ordering is OrderingStrategy.freq_asc:
        return sorted(entries, key=lambda e: (e.category_frequency, e.distance_km, e.poi_id))
    if ordering is OrderingStrategy.freq_des:
        return sorted(entries, key=lambda e: (-e.category_frequency, e.distance_km, e.poi_id))

    canonical = sorted(entries, key=lambda e: e.poi_id)
    permutation = np.random.default_rng(seed).permutation(len(canonical))
    return [canonical[i] for i in permutation.tolist()]


def make_candidate_set(
    test_case: TestCase,
    catalog: PoiCatalog,
    stats: TrainStats,
    n: int = DEFAULT_CANDIDATE_COUNT,
    ordering: OrderingStrategy = OrderingStrategy.dist_asc,
    seed: int = 0,
) -> CandidateSet:
    sampled = sample_candidates(test_case, catalog, n=n, seed=seed)
    return build_candidate_set(test_case, sampled, catalog, stats, ordering, seed)
