"""Great-circle distances between positions and candidate POIs.

Distances are always computed here and handed to the model as text; the model is
never asked to work them out from coordinates.
"""
from decimal import ROUND_HALF_EVEN, Decimal
from math import atan2, cos, radians, sin, sqrt
from typing import Iterable, List, NewType

from nextpoi.types import GeoPoint

EARTH_RADIUS_KM = 6371.0088
"""Mean Earth radius (IUGG)"""

DistanceKm = NewType('DistanceKm', float)


def haversine_distance(a: GeoPoint, b: GeoPoint) -> DistanceKm:
    # Evaluate in a canonical argument order so d(a, b) == d(b, a) bit for bit.
    if (a.lat, a.lon) > (b.lat, b.lon):
        a, b = b, a

    lat1, lon1, lat2, lon2 = map(radians, (a.lat, a.lon, b.lat, b.lon))
    dlat = lat2 - lat1
    dlon = lon2 - lon1

    h = sin(dlat / 2) ** 2 + cos(lat1) * cos(lat2) * sin(dlon / 2) ** 2
    # Rounding can push h a hair past 1 for antipodes.
    h = min(1.0, max(0.0, h))
    c = 2 * atan2(sqrt(h), sqrt(1 - h))

    return DistanceKm(EARTH_RADIUS_KM * c)


def distances_to_candidates(origin: GeoPoint, pois: Iterable[GeoPoint]) -> List[DistanceKm]:
    """Distance from origin to each POI, in input order."""
    return [haversine_distance(origin, poi) for poi in pois]


def format_distance(distance_km: float) -> str:
    """Two decimals, rounded half-even on the decimal the float reads as.

    The shortest repr is what gets rounded, not the exact binary value: 2.675 is stored as
    2.67499..., yet it prints as "2.68", the same as a hand-rounded annotation would.
    """
    return str(Decimal(repr(float(distance_km))).quantize(Decimal('0.01'), ROUND_HALF_EVEN))
