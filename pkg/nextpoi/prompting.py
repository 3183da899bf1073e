"""Prompt rendering for zero-shot next-POI recommendation.

A user prompt is a fixed sequence of blank-line separated sections:

    intro
    long-term check-ins      (when lp or seq is set)
    recent check-ins         (all context when rp is set, else only the current position)
    candidate POIs           (with distances when geo is set)
    requirements             (one numbered sentence per set flag)
    output instruction

The wording is frozen by the golden files under tests/fixtures/prompts; change both together.
"""
from typing import Iterable, List, Optional, Sequence

from pydantic import BaseModel, validator

from nextpoi.candidates import CandidateSet, OrderingStrategy
from nextpoi.dataset import PoiCatalog
from nextpoi.errors import EmptyContext
from nextpoi.geo import format_distance
from nextpoi.types import CheckIn, TestCase

DEFAULT_LONG_TERM_LENGTH = 40
DEFAULT_TOP_K = 10

FLAG_NAMES = ("lp", "rp", "geo", "seq")

SYSTEM_TEXT = (
    "You are an assistant recommending the next point of interest (POI) a user will visit. "
    "You answer with a single JSON object and nothing else."
)

INTRO_TEXT = (
    "Recommend the next point of interest (POI) this user will visit. "
    "Every check-in and candidate is written as (POIID <id>, Category <category>). "
    "The check-in marked [current position] is where the user is now."
)

LONG_TERM_HEADER = "Long-term check-ins (oldest first):"
RECENT_HEADER = "Recent check-ins (oldest first):"
CANDIDATE_HEADER = "Candidate POIs:"
CANDIDATE_HEADER_WITH_DISTANCE = (
    "Candidate POIs (distances in kilometers from the current position):"
)
REQUIREMENTS_HEADER = "Requirements:"

COLD_USER_LINE = "None"
CURRENT_POSITION_MARKER = " [current position]"

REQUIREMENT_SENTENCES = {
    "lp": (
        "Consider the user's long-term check-ins, which offer insight into the user's "
        "stable preferences."
    ),
    "rp": (
        "Consider the user's recent check-ins, which mirror the user's current contextual "
        "preferences."
    ),
    "geo": (
        "Consider the distance of each candidate from the current position; users tend to "
        "favor nearby POIs."
    ),
    "seq": (
        "Consider sequential transition patterns, i.e. the flow between consecutive categories "
        "in the user's long-term check-ins."
    ),
}

OUTPUT_INSTRUCTION = (
    'Answer with a single JSON object with exactly two keys: "recommendation", an array of '
    "exactly {top_k} POIIDs chosen from the candidate POIs, written as strings, most probable "
    'first; and "reason", a string briefly explaining the recommendation. '
    "Do not output any other text."
)


class RequirementFlags(BaseModel):
    """Which of the four recommendation factors the prompt asks the model to weigh."""

    lp: bool = True
    rp: bool = True
    geo: bool = True
    seq: bool = True

    class Config:
        extra = "forbid"
        frozen = True

    @classmethod
    def from_ablation(cls, ablated: Iterable[str]) -> "RequirementFlags":
        """All factors on except the named ones; accepts 'geo' as well as '-geo'."""
        names = {name.strip().lower().lstrip('-') for name in ablated}
        unknown = names - set(FLAG_NAMES)
        if unknown:
            raise ValueError(f'unknown ablation {sorted(unknown)}, expected some of {FLAG_NAMES}')
        return cls(**{name: name not in names for name in FLAG_NAMES})

    @classmethod
    def from_tag(cls, tag: str) -> "RequirementFlags":
        if tag == 'none':
            return cls(lp=False, rp=False, geo=False, seq=False)
        names = set(tag.split('+'))
        unknown = names - set(FLAG_NAMES)
        if unknown:
            raise ValueError(f'unknown requirement flags {sorted(unknown)} in {tag!r}')
        return cls(**{name: name in names for name in FLAG_NAMES})

    @property
    def enabled(self) -> List[str]:
        return [name for name in FLAG_NAMES if getattr(self, name)]

    @property
    def tag(self) -> str:
        """Stable label such as ``lp+rp+geo+seq``, used in result files."""
        return '+'.join(self.enabled) or 'none'


class PromptBundle(BaseModel):
    system_text: str
    user_text: str
    flags: RequirementFlags
    ordering: OrderingStrategy
    trajectory_id: str
    candidate_count: int
    top_k: int = DEFAULT_TOP_K

    class Config:
        extra = "forbid"
        frozen = True

    @validator('top_k')
    def validate_top_k(cls, v):
        if v < 1:
            raise ValueError('top_k must be at least 1')
        return v


def format_checkin_line(
    poi_id: str, category: str, distance_km: Optional[float] = None, current: bool = False
) -> str:
    if distance_km is None:
        line = f'(POIID {poi_id}, Category {category})'
    else:
        line = f'(POIID {poi_id}, Category {category}, Distance {format_distance(distance_km)} km)'
    return line + CURRENT_POSITION_MARKER if current else line


def render_long_term_block(
    history: Sequence[CheckIn], catalog: PoiCatalog, m: int = DEFAULT_LONG_TERM_LENGTH
) -> str:
    """The m most recent train check-ins, oldest first; the cold-user line when there are none."""
    recent = list(history)[-m:] if m > 0 else []
    if not recent:
        return COLD_USER_LINE
    return '\n'.join(format_checkin_line(c.poi_id, catalog[c.poi_id].category) for c in recent)


def render_recent_block(context: Sequence[CheckIn], catalog: PoiCatalog) -> str:
    if not context:
        raise EmptyContext()

    *earlier, current = context
    lines = [format_checkin_line(c.poi_id, catalog[c.poi_id].category) for c in earlier]
    current_category = catalog[current.poi_id].category
    lines.append(format_checkin_line(current.poi_id, current_category, current=True))
    return '\n'.join(lines)


def render_current_position(context: Sequence[CheckIn], catalog: PoiCatalog) -> str:
    """Only the flagged last context check-in; kept when recent check-ins are ablated."""
    if not context:
        raise EmptyContext()
    current = context[-1]
    return format_checkin_line(current.poi_id, catalog[current.poi_id].category, current=True)


def render_candidate_block(candidate_set: CandidateSet, include_distance: bool) -> str:
    return '\n'.join(
        format_checkin_line(
            e.poi_id, e.category, distance_km=e.distance_km if include_distance else None
        )
        for e in candidate_set.entries
    )


def render_requirements(flags: RequirementFlags) -> str:
    """Numbered sentences for the set flags, numbered contiguously; empty when none are set."""
    return '\n'.join(
        f'{number}. {REQUIREMENT_SENTENCES[name]}'
        for number, name in enumerate(flags.enabled, start=1)
    )


def render_output_instruction(top_k: int = DEFAULT_TOP_K) -> str:
    return OUTPUT_INSTRUCTION.format(top_k=top_k)


def build_prompt(
    test_case: TestCase,
    candidate_set: CandidateSet,
    history: Sequence[CheckIn],
    flags: RequirementFlags,
    catalog: PoiCatalog,
    m: int = DEFAULT_LONG_TERM_LENGTH,
    top_k: int = DEFAULT_TOP_K,
) -> PromptBundle:
    """Render the system and user texts for one test case.

    ``history`` is the user's train-split check-ins in time order.
    """
    if not test_case.context:
        raise EmptyContext(test_case.trajectory_id)
    if candidate_set.trajectory_id != test_case.trajectory_id:
        raise ValueError(
            f'candidate set for {candidate_set.trajectory_id!r} '
            f'does not belong to test case {test_case.trajectory_id!r}'
        )

    sections = [INTRO_TEXT]

    # seq reasons over categories of the long-term check-ins, so either flag keeps the block.
    if flags.lp or flags.seq:
        sections.append(f'{LONG_TERM_HEADER}\n{render_long_term_block(history, catalog, m)}')

    if flags.rp:
        sections.append(f'{RECENT_HEADER}\n{render_recent_block(test_case.context, catalog)}')
    else:
        sections.append(render_current_position(test_case.context, catalog))

    header = CANDIDATE_HEADER_WITH_DISTANCE if flags.geo else CANDIDATE_HEADER
    candidates = render_candidate_block(candidate_set, include_distance=flags.geo)
    sections.append(f"{header}\n{candidates}")

    requirements = render_requirements(flags)
    if requirements:
        sections.append(f'{REQUIREMENTS_HEADER}\n{requirements}')

    sections.append(render_output_instruction(top_k))

    return PromptBundle(
        system_text=SYSTEM_TEXT,
        user_text='\n\n'.join(sections),
        flags=flags,
        ordering=candidate_set.ordering,
        trajectory_id=test_case.trajectory_id,
        candidate_count=len(candidate_set),
        top_k=top_k,
    )
