"""Ground-truth rank extraction and Acc@k / MRR aggregation."""
import math
from collections import Counter
from typing import Any, Dict, Iterable, List, Optional, Sequence

from pydantic import BaseModel, conint

from nextpoi.errors import EmptyOutcomes
from nextpoi.response_parse import ParseStatus

ACCURACY_CUTOFFS = (1, 5, 10)
ABSENT_POLICY = "unlisted ground truth scores 0 for every Acc@k and reciprocal rank 0"
MIXED = "mixed"

# Outcome fields echoed into the report when every outcome agrees on them.
ECHOED_FIELDS = ("method", "flags", "ordering", "seed", "model", "temperature")


class EvalOutcome(BaseModel):
    """One evaluated test case; also the shape of a JSONL result record."""

    trajectory_id: str
    user_id: str
    ground_truth: str
    method: str
    flags: str
    ordering: str
    seed: int
    recommended_ids: List[str]
    rank: Optional[conint(ge=1)] = None
    """1-based position of the ground truth in recommended_ids; None when unlisted"""
    parse_status: ParseStatus = ParseStatus.clean
    reason: str = ""
    model: Optional[str] = None
    temperature: Optional[float] = None
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0

    class Config:
        extra = "forbid"
        frozen = True


class EvalReport(BaseModel):
    n: int
    acc1: float
    acc5: float
    acc10: float
    mrr: float
    parse_status_counts: Dict[str, int]
    config: Dict[str, Any]
    absent_policy: str = ABSENT_POLICY

    class Config:
        extra = "forbid"

    def to_json(self) -> str:
        """Byte-stable serialization used for report files."""
        return self.json(indent=2, sort_keys=True)


def rank_of_ground_truth(recommended_ids: Sequence[str], ground_truth: str) -> Optional[int]:
    try:
        return list(recommended_ids).index(ground_truth) + 1
    except ValueError:
        return None


def hits_at(ranks: Iterable[Optional[int]], k: int) -> int:
    return sum(1 for rank in ranks if rank is not None and rank <= k)


def aggregate(outcomes: Iterable[EvalOutcome]) -> EvalReport:
    """Acc@1/5/10 and MRR over all outcomes; Failed parses count in n and score 0."""
    outcomes = list(outcomes)
    if not outcomes:
        raise EmptyOutcomes()

    n = len(outcomes)
    ranks = [o.rank for o in outcomes]
    acc1, acc5, acc10 = (hits_at(ranks, k) / n for k in ACCURACY_CUTOFFS)
    mrr = math.fsum(1.0 / rank for rank in ranks if rank is not None) / n

    status_counts = Counter(o.parse_status for o in outcomes)

    return EvalReport(
        n=n,
        acc1=acc1,
        acc5=acc5,
        acc10=acc10,
        mrr=mrr,
        parse_status_counts={status.value: status_counts[status] for status in ParseStatus},
        config=_config_echo(outcomes),
    )


def _config_echo(outcomes: List[EvalOutcome]) -> Dict[str, Any]:
    echo = {}
    for name in ECHOED_FIELDS:
        values = {getattr(o, name) for o in outcomes}
        echo[name] = values.pop() if len(values) == 1 else MIXED
    return echo
