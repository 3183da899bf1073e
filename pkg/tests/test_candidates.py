from collections import Counter

import numpy as np
import pytest

from nextpoi.candidates import (
    CandidateEntry,
    CandidateSet,
    OrderingStrategy,
    build_candidate_set,
    make_candidate_set,
    order_candidates,
    sample_candidates,
)
from nextpoi.dataset import PoiCatalog, TrainStats, build_stats
from nextpoi.errors import UnknownPoi
from nextpoi.geo import haversine_distance
from nextpoi.types import CheckIn, Poi
from tests.conftest import GRID_POIS, make_checkins, make_test_case


def make_catalog(size: int) -> PoiCatalog:
    return PoiCatalog(
        Poi(
            poi_id=f'v{i:03d}',
            category=f'cat{i % 7}',
            lat=35.0 + (i * 37 % 101) / 100,
            lon=139.0 + (i * 53 % 97) / 100,
        )
        for i in range(size)
    )


def test_sample_excludes_ground_truth_and_exhausts_small_catalogs(grid_catalog):
    case = make_test_case(grid_catalog, ['p0', 'p1'], 'p4')
    sampled = sample_candidates(case, PoiCatalog(GRID_POIS[:5]), n=100)

    assert sorted(sampled) == ['p0', 'p1', 'p2', 'p3']


def test_sample_is_deterministic():
    catalog = make_catalog(300)
    case = make_test_case(catalog, ['v001', 'v002'], 'v150')

    first = sample_candidates(case, catalog, n=100, seed=5)
    assert first == sample_candidates(case, catalog, n=100, seed=5)
    assert first != sample_candidates(case, catalog, n=100, seed=6)
    assert len(set(first)) == 100
    assert 'v150' not in first


def test_sample_depends_on_trajectory_not_call_order():
    catalog = make_catalog(300)
    a = make_test_case(catalog, ['v001'], 'v010', user_id='ua')
    b = make_test_case(catalog, ['v001'], 'v010', user_id='ub')

    sample_a = sample_candidates(a, catalog, n=20)
    sample_candidates(b, catalog, n=20)
    assert sample_candidates(a, catalog, n=20) == sample_a
    assert sample_candidates(b, catalog, n=20) != sample_a


def test_sample_is_uniform():
    catalog = make_catalog(50)
    case = make_test_case(catalog, ['v000'], 'v025')
    trials, n = 10_000, 10

    counts: Counter = Counter()
    for seed in range(trials):
        counts.update(sample_candidates(case, catalog, n=n, seed=seed))

    p = n / 49
    expected = trials * p
    sigma = (trials * p * (1 - p)) ** 0.5
    assert 'v025' not in counts
    assert len(counts) == 49
    for poi_id, count in counts.items():
        assert abs(count - expected) < 4 * sigma, poi_id


@pytest.fixture
def grid_stats(grid_catalog) -> TrainStats:
    train = make_checkins('u0', ['p0', 'p0', 'p3', 'p1', 'p2'])
    return build_stats(train, grid_catalog)


def test_build_candidate_set(grid_catalog, grid_stats):
    case = make_test_case(grid_catalog, ['p2', 'p0'], 'p5')
    candidate_set = build_candidate_set(
        case, ['p1', 'p9', 'p3'], grid_catalog, grid_stats, OrderingStrategy.dist_asc, seed=0
    )

    assert len(candidate_set) == 4
    assert 'p5' in candidate_set
    assert candidate_set.ground_truth_poi == 'p5'
    for entry in candidate_set.entries:
        poi = grid_catalog[entry.poi_id]
        assert entry.distance_km == haversine_distance(case.current_position, poi)
        assert entry.category == poi.category
        assert entry.popularity == grid_stats.popularity(entry.poi_id)
        assert entry.category_frequency == grid_stats.category_frequency(poi.category)

    # Current position is p0; the grid is laid out along one meridian.
    assert candidate_set.poi_ids == ['p1', 'p3', 'p5', 'p9']


def test_full_candidate_set_has_one_hundred_and_one_entries():
    catalog = make_catalog(500)
    case = make_test_case(catalog, ['v001', 'v002'], 'v321')
    stats = build_stats([], catalog)
    candidate_set = make_candidate_set(case, catalog, stats, n=100, seed=3)

    assert len(candidate_set) == 101
    assert len(set(candidate_set.poi_ids)) == 101
    assert candidate_set.poi_ids.count('v321') == 1


def test_build_rejects_unknown_and_ground_truth_ids(grid_catalog, grid_stats):
    case = make_test_case(grid_catalog, ['p0'], 'p5')
    with pytest.raises(UnknownPoi):
        build_candidate_set(
            case, ['p1', 'zzz'], grid_catalog, grid_stats, OrderingStrategy.rand, seed=0
        )
    with pytest.raises(ValueError):
        build_candidate_set(
            case, ['p1', 'p5'], grid_catalog, grid_stats, OrderingStrategy.rand, seed=0
        )


def test_candidate_set_requires_ground_truth_once():
    entry = CandidateEntry(poi_id='a', category='Bar', distance_km=1.0)
    with pytest.raises(ValueError):
        CandidateSet(
            trajectory_id='t',
            entries=[entry],
            ground_truth_poi='b',
            ordering=OrderingStrategy.rand,
            seed=0,
        )
    with pytest.raises(ValueError):
        CandidateSet(
            trajectory_id='t',
            entries=[entry, entry],
            ground_truth_poi='a',
            ordering=OrderingStrategy.rand,
            seed=0,
        )
    with pytest.raises(ValueError):
        CandidateEntry(poi_id='a', category='Bar', distance_km=float('nan'))


def random_entries(rng: np.random.Generator, size: int):
    return [
        CandidateEntry(
            poi_id=f'c{i:03d}',
            category='x',
            # Coarse values so ties actually happen.
            distance_km=float(rng.integers(0, 8)),
            category_frequency=int(rng.integers(0, 4)),
        )
        for i in rng.permutation(size).tolist()
    ]


def test_distance_orderings_mirror_each_other():
    entries = [
        CandidateEntry(poi_id=poi_id, category='x', distance_km=distance)
        for poi_id, distance in [('b', 2.0), ('a', 1.0), ('c', 3.0), ('d', 0.5)]
    ]
    ascending = order_candidates(entries, OrderingStrategy.dist_asc, seed=0)
    descending = order_candidates(entries, OrderingStrategy.dist_des, seed=0)

    assert [e.poi_id for e in ascending] == ['d', 'a', 'b', 'c']
    assert list(reversed(ascending)) == descending


def test_distance_ties_break_by_poi_id():
    entries = [
        CandidateEntry(poi_id=poi_id, category='x', distance_km=1.0) for poi_id in ['c', 'a', 'b']
    ]
    for ordering in (OrderingStrategy.dist_asc, OrderingStrategy.dist_des):
        assert [e.poi_id for e in order_candidates(entries, ordering, seed=0)] == ['a', 'b', 'c']


def test_rand_ordering_is_a_seeded_shuffle_of_id_order():
    rng = np.random.default_rng(1)
    entries = random_entries(rng, 30)

    expected = sorted(entries, key=lambda e: e.poi_id)
    np.random.default_rng(42).shuffle(expected)

    assert order_candidates(entries, OrderingStrategy.rand, seed=42) == expected
    assert order_candidates(list(reversed(entries)), OrderingStrategy.rand, seed=42) == expected
    assert order_candidates(entries, OrderingStrategy.rand, seed=43) != expected


@pytest.mark.parametrize('ordering', list(OrderingStrategy))
def test_orderings_on_random_sets(ordering):
    rng = np.random.default_rng(2024)
    for _ in range(200):
        entries = random_entries(rng, int(rng.integers(1, 25)))
        ordered = order_candidates(entries, ordering, seed=int(rng.integers(0, 2**32)))

        assert sorted(ordered, key=lambda e: e.poi_id) == sorted(entries, key=lambda e: e.poi_id)

        for prev, cur in zip(ordered, ordered[1:]):
            if ordering is OrderingStrategy.dist_asc:
                assert (prev.distance_km, prev.poi_id) < (cur.distance_km, cur.poi_id)
            elif ordering is OrderingStrategy.dist_des:
                assert prev.distance_km >= cur.distance_km
                if prev.distance_km == cur.distance_km:
                    assert prev.poi_id < cur.poi_id
            elif ordering is OrderingStrategy.freq_asc:
                assert (prev.category_frequency, prev.distance_km, prev.poi_id) < (
                    cur.category_frequency,
                    cur.distance_km,
                    cur.poi_id,
                )
            elif ordering is OrderingStrategy.freq_des:
                assert prev.category_frequency >= cur.category_frequency
                if prev.category_frequency == cur.category_frequency:
                    assert (prev.distance_km, prev.poi_id) < (cur.distance_km, cur.poi_id)


def test_candidate_set_ordering_uses_trajectory_seed(grid_catalog, grid_stats):
    case = make_test_case(grid_catalog, ['p0'], 'p5')
    sampled = ['p1', 'p2', 'p3', 'p4', 'p6', 'p7']

    first = build_candidate_set(
        case, sampled, grid_catalog, grid_stats, OrderingStrategy.rand, seed=9
    )
    again = build_candidate_set(
        case, list(reversed(sampled)), grid_catalog, grid_stats, OrderingStrategy.rand, seed=9
    )
    assert first.poi_ids == again.poi_ids


def test_popularity_annotations_count_train_only(grid_catalog):
    stats = build_stats([CheckIn(user_id='u9', poi_id='p4', utc_time=0)], grid_catalog)
    case = make_test_case(grid_catalog, ['p0'], 'p4')
    candidate_set = build_candidate_set(
        case, ['p1'], grid_catalog, stats, OrderingStrategy.dist_asc, seed=0
    )
    popularity = {e.poi_id: e.popularity for e in candidate_set.entries}
    assert popularity == {'p1': 0, 'p4': 1}
