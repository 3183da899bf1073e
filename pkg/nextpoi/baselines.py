"""Non-LLM reference recommenders over the same candidate sets."""
import enum
from typing import List, Optional

from nextpoi.candidates import CandidateSet
from nextpoi.dataset import TrainStats


@enum.unique
class PopularityScope(str, enum.Enum):
    global_ = "global"
    user = "user"


def recommend_popu(
    candidate_set: CandidateSet,
    stats: TrainStats,
    k: int = 10,
    scope: PopularityScope = PopularityScope.global_,
    user_id: Optional[str] = None,
) -> List[str]:
    """Most visited candidates in the train split.

    Global scope counts every user's check-ins and breaks ties by poi_id. User scope counts
    only ``user_id``'s check-ins, then falls back to global counts and poi_id for ties.
    """
    scope = PopularityScope(scope)
    if scope is PopularityScope.user:
        if user_id is None:
            raise ValueError('user-scoped popularity needs a user_id')
        ranked = sorted(
            candidate_set.entries,
            key=lambda e: (-stats.user_popularity(user_id, e.poi_id), -e.popularity, e.poi_id),
        )
    else:
        ranked = sorted(candidate_set.entries, key=lambda e: (-e.popularity, e.poi_id))

    return [e.poi_id for e in ranked[:k]]


def recommend_dist(candidate_set: CandidateSet, k: int = 10) -> List[str]:
    """Nearest candidates first, ties by poi_id."""
    ranked = sorted(candidate_set.entries, key=lambda e: (e.distance_km, e.poi_id))
    return [e.poi_id for e in ranked[:k]]
