"""
Pydantic types for the check-in domain: POIs, check-ins, trajectories and test cases.
"""
import math
from typing import List

from pydantic import BaseModel, root_validator, validator

TRAJECTORY_WINDOW_SECONDS = 24 * 60 * 60


class GeoPoint(BaseModel):
    """A WGS84 position in decimal degrees."""

    lat: float
    lon: float

    class Config:
        extra = "forbid"
        frozen = True

    @validator('lat')
    def validate_lat(cls, v):
        if not math.isfinite(v) or not -90.0 <= v <= 90.0:
            raise ValueError(f'latitude {v} outside [-90, 90]')
        return v

    @validator('lon')
    def validate_lon(cls, v):
        if not math.isfinite(v) or not -180.0 <= v <= 180.0:
            raise ValueError(f'longitude {v} outside [-180, 180]')
        return v

    @property
    def position(self) -> "GeoPoint":
        return GeoPoint(lat=self.lat, lon=self.lon)


class Poi(GeoPoint):
    """A catalog entry; it inherits its coordinates from GeoPoint."""

    poi_id: str
    category: str
    # Carried on every input line but never used for ranking.
    category_id: str = ''

    @validator('poi_id')
    def validate_poi_id(cls, v):
        if not v:
            raise ValueError('poi_id must not be empty')
        return v


class CheckIn(BaseModel):
    user_id: str
    poi_id: str
    utc_time: int
    """Seconds since the epoch, UTC"""
    tz_offset_minutes: int = 0

    class Config:
        extra = "forbid"
        frozen = True


class Trajectory(BaseModel):
    """Check-ins of one user that all fall within 24 hours of the first one."""

    trajectory_id: str
    user_id: str
    checkins: List[CheckIn]

    class Config:
        extra = "forbid"
        frozen = True

    @root_validator(skip_on_failure=True)
    def validate_checkins(cls, values):
        checkins = values['checkins']
        if not checkins:
            raise ValueError('trajectories must hold at least one check-in')

        first = checkins[0].utc_time
        previous = first
        for checkin in checkins:
            if checkin.user_id != values['user_id']:
                raise ValueError('all check-ins of a trajectory must belong to its user')
            if checkin.utc_time < previous:
                raise ValueError('trajectory check-ins must be in time order')
            if checkin.utc_time - first > TRAJECTORY_WINDOW_SECONDS:
                raise ValueError('trajectory check-ins must lie within 24 hours of the first one')
            previous = checkin.utc_time

        return values

    @classmethod
    def make_id(cls, user_id: str, first_utc_time: int) -> str:
        return f'{user_id}-{first_utc_time}'

    @property
    def start_time(self) -> int:
        return self.checkins[0].utc_time

    def __len__(self) -> int:
        return len(self.checkins)


class TestCase(BaseModel):
    """The first k-1 check-ins of a test trajectory plus the POI of check-in k."""

    # Keep pytest from collecting this class.
    __test__ = False

    trajectory_id: str
    user_id: str
    context: List[CheckIn]
    ground_truth_poi: str
    current_position: GeoPoint

    class Config:
        extra = "forbid"
        frozen = True

    @validator('context')
    def validate_context(cls, v):
        if not v:
            raise ValueError('test cases need at least one context check-in')
        return v

    @property
    def start_time(self) -> int:
        return self.context[0].utc_time
