"""Turn signed delay evidence into distance bounds, regions, and verdicts.

The conversion constant is 0.15 km per microsecond of round-trip time:
light covers 0.3 km/us one way and the signal travels the distance twice,
so the bound is conservative under any real network. Subtracting processing
overhead would tighten radii but risks unsoundness; the default budget
deducts nothing and a nonzero deduction is for experiments only.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .crypto import PkiRegistry
from .model import (
    EARTH_RADIUS_KM,
    FeasibleRegion,
    Geofence,
    GeoPoint,
    haversine_km,
    point_in_geofence,
)

KM_PER_DEG_LAT = EARTH_RADIUS_KM * math.pi / 180.0  # 111.195 km

DEFAULT_RESOLUTION_KM = 5.0
DEFAULT_TIME_SPREAD_US = 10_000_000


class GeosolveError(Exception):
    pass


class EmptyInput(GeosolveError):
    pass


class UnknownIssuerLocation(GeosolveError):
    pass


class EmptyRegion(GeosolveError):
    """The disks have empty intersection: inconsistent or forged evidence."""


class TimeSpreadExceeded(GeosolveError):
    pass


@dataclass(frozen=True)
class OverheadBudget:
    """Delay deducted from measured RTTs before conversion.

    Soundness requires the deduction to stay below the true minimum
    processing time; 0 is the only generally sound value.
    """

    deduction_us: int = 0

    def __post_init__(self) -> None:
        if self.deduction_us < 0:
            raise GeosolveError("deduction must be non-negative")


ZERO_BUDGET = OverheadBudget(0)


def delay_to_distance(rtt_us: int, budget: OverheadBudget = ZERO_BUDGET) -> float:
    """Upper-bound distance for a round-trip time: 0.15 km/us after deduction.

    Computed as 3*us/20 so the table anchor values come out exact in
    floating point.
    """
    effective = max(0, rtt_us - budget.deduction_us)
    return (3 * effective) / 20.0


class RegionOutcome(enum.Enum):
    PROVEN_INSIDE = "ProvenInside"
    NOT_PROVEN = "NotProven"
    PROVEN_OUTSIDE = "ProvenOutside"


@dataclass(frozen=True)
class RegionVerdict:
    outcome: RegionOutcome
    region: FeasibleRegion
    witness: GeoPoint | None = None
    samples_inside: int = 0
    samples_total: int = 0
    area_km2: float = 0.0


def build_region(sms, registry: PkiRegistry, budget: OverheadBudget = ZERO_BUDGET) -> FeasibleRegion:
    """One disk per signed measurement: issuer's registered location, radius
    from its direct minimum delay. Signatures must be verified upstream."""
    sms = list(sms)
    if not sms:
        raise EmptyInput("no signed measurements")
    disks = []
    for sm in sms:
        entry = registry.geoclient_directory.get(sm.issuer)
        if entry is None or entry.location is None:
            raise UnknownIssuerLocation(f"no registered location for issuer {sm.issuer}")
        radius = delay_to_distance(sm.direct.min_rtt_us, budget)
        disks.append((entry.location, max(radius, 1e-6)))
    return FeasibleRegion(tuple(disks))


@dataclass
class RegionGrid:
    """Grid sampling of a feasible region inside its bounding box."""

    lats: np.ndarray
    lons: np.ndarray
    inside: np.ndarray  # boolean matrix [lat, lon]

    def points_inside(self) -> list[GeoPoint]:
        ii, jj = np.nonzero(self.inside)
        return [GeoPoint(float(self.lats[i]), float(self.lons[j])) for i, j in zip(ii, jj)]

    def area_km2(self) -> float:
        if self.lats.size < 2 or self.lons.size < 2:
            return 0.0
        dlat_km = abs(self.lats[1] - self.lats[0]) * KM_PER_DEG_LAT
        dlon_deg = abs(self.lons[1] - self.lons[0])
        row_counts = self.inside.sum(axis=1)
        row_width_km = dlon_deg * KM_PER_DEG_LAT * np.cos(np.radians(self.lats))
        return float(np.sum(row_counts * row_width_km) * dlat_km)


def _bounding_box(region: FeasibleRegion) -> tuple[float, float, float, float]:
    """Intersection of per-disk lat/lon boxes: (lat_lo, lat_hi, lon_lo, lon_hi)."""
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    for center, radius in region.disks:
        dlat = radius / KM_PER_DEG_LAT
        lat_lo = max(lat_lo, center.lat - dlat)
        lat_hi = min(lat_hi, center.lat + dlat)
        cos_lat = math.cos(math.radians(center.lat))
        if cos_lat <= 1e-6 or radius / (KM_PER_DEG_LAT * cos_lat) >= 180.0:
            continue  # disk spans all longitudes at this latitude
        dlon = radius / (KM_PER_DEG_LAT * cos_lat)
        lon_lo = max(lon_lo, center.lon - dlon)
        lon_hi = min(lon_hi, center.lon + dlon)
    return lat_lo, lat_hi, lon_lo, lon_hi


def _haversine_grid(lat_grid: np.ndarray, lon_grid: np.ndarray, center: GeoPoint) -> np.ndarray:
    phi1 = np.radians(lat_grid)
    phi2 = math.radians(center.lat)
    dphi = np.radians(center.lat - lat_grid)
    dlam = np.radians(center.lon - lon_grid)
    s = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * math.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return EARTH_RADIUS_KM * 2.0 * np.arctan2(np.sqrt(s), np.sqrt(1.0 - s))


def sample_region(region: FeasibleRegion, resolution_km: float = DEFAULT_RESOLUTION_KM) -> RegionGrid:
    """Sample the bounding box at `resolution_km` spacing; a point belongs to
    the region when it is inside every disk."""
    if resolution_km <= 0:
        raise GeosolveError("resolution must be positive")
    lat_lo, lat_hi, lon_lo, lon_hi = _bounding_box(region)
    if lat_lo > lat_hi or lon_lo > lon_hi:
        raise EmptyRegion("disk bounding boxes do not overlap")
    dlat = resolution_km / KM_PER_DEG_LAT
    mid_lat = (lat_lo + lat_hi) / 2.0
    cos_mid = max(math.cos(math.radians(mid_lat)), 1e-6)
    dlon = resolution_km / (KM_PER_DEG_LAT * cos_mid)
    lats = np.arange(lat_lo, lat_hi + dlat / 2.0, dlat)
    lons = np.arange(lon_lo, lon_hi + dlon / 2.0, dlon)
    lat_grid, lon_grid = np.meshgrid(lats, lons, indexing="ij")
    inside = np.ones(lat_grid.shape, dtype=bool)
    for center, radius in region.disks:
        inside &= _haversine_grid(lat_grid, lon_grid, center) <= radius
    return RegionGrid(lats=lats, lons=lons, inside=inside)


def _fence_mask(lat_grid: np.ndarray, lon_grid: np.ndarray, fence: Geofence) -> np.ndarray:
    """Vectorized even-odd test over the grid (edges not special-cased;
    a boundary sample classified outside only makes the verdict stricter)."""
    x = lon_grid
    y = lat_grid
    inside = np.zeros(x.shape, dtype=bool)
    pts = [(v.lon, v.lat) for v in fence.vertices]
    n = len(pts)
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1) if y2 != y1 else np.inf
        inside ^= crosses & (x < x_cross)
    return inside


def check_geofence(
    region: FeasibleRegion,
    fence: Geofence,
    resolution_km: float = DEFAULT_RESOLUTION_KM,
) -> RegionVerdict:
    """Conservative grid verdict.

    ProvenInside only when every region sample lies inside the fence;
    NotProven when samples straddle the fence (with an outside witness);
    ProvenOutside when region and fence are disjoint over all samples.
    Raises EmptyRegion when no grid sample survives all disks.
    """
    grid = sample_region(region, resolution_km)
    if not grid.inside.any():
        raise EmptyRegion("no grid sample lies in all disks")
    lat_grid, lon_grid = np.meshgrid(grid.lats, grid.lons, indexing="ij")
    fence_ok = _fence_mask(lat_grid, lon_grid, fence)
    region_pts = grid.inside
    inside_count = int((region_pts & fence_ok).sum())
    total = int(region_pts.sum())
    area = grid.area_km2()
    if inside_count == total:
        return RegionVerdict(RegionOutcome.PROVEN_INSIDE, region, None, inside_count, total, area)
    ii, jj = np.nonzero(region_pts & ~fence_ok)
    witness = GeoPoint(float(grid.lats[ii[0]]), float(grid.lons[jj[0]]))
    if inside_count == 0:
        return RegionVerdict(
            RegionOutcome.PROVEN_OUTSIDE, region, witness, inside_count, total, area
        )
    return RegionVerdict(RegionOutcome.NOT_PROVEN, region, witness, inside_count, total, area)


def trusted_time(sms, spread_tolerance_us: int = DEFAULT_TIME_SPREAD_US) -> int:
    """Median of per-issuer system times, each advanced by half its RTT.

    Raises TimeSpreadExceeded when adjusted times disagree by more than the
    tolerance, which signals a skewed or lying reference clock.
    """
    sms = list(sms)
    if not sms:
        raise EmptyInput("no signed measurements")
    adjusted = sorted(sm.system_time_us + sm.direct.min_rtt_us // 2 for sm in sms)
    if adjusted[-1] - adjusted[0] > spread_tolerance_us:
        raise TimeSpreadExceeded(
            f"adjusted times spread {adjusted[-1] - adjusted[0]} us > {spread_tolerance_us} us"
        )
    n = len(adjusted)
    if n % 2 == 1:
        return adjusted[n // 2]
    return (adjusted[n // 2 - 1] + adjusted[n // 2]) // 2


def region_contains(region: FeasibleRegion, p: GeoPoint) -> bool:
    return all(haversine_km(center, p) <= radius for center, radius in region.disks)


def disk_boundary_points(center: GeoPoint, radius_km: float, count: int = 90) -> list[GeoPoint]:
    """Points of the small circle at `radius_km` around `center` (for export)."""
    out = []
    lat1 = math.radians(center.lat)
    lon1 = math.radians(center.lon)
    ang = radius_km / EARTH_RADIUS_KM
    for k in range(count):
        bearing = 2.0 * math.pi * k / count
        lat2 = math.asin(
            math.sin(lat1) * math.cos(ang) + math.cos(lat1) * math.sin(ang) * math.cos(bearing)
        )
        lon2 = lon1 + math.atan2(
            math.sin(bearing) * math.sin(ang) * math.cos(lat1),
            math.cos(ang) - math.sin(lat1) * math.sin(lat2),
        )
        out.append(GeoPoint(math.degrees(lat2), math.degrees(lon2)))
    return out
