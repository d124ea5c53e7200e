"""Shared domain types, units, and spherical geometry primitives.

Units used throughout the package:
  - delays are non-negative integer microseconds (round-trip unless stated)
  - distances are kilometres on a sphere of radius 6371.0 km
  - timestamps are UTC, integer microseconds since the Unix epoch
"""

from __future__ import annotations

import math
import secrets
from dataclasses import dataclass
from datetime import datetime, timezone

EARTH_RADIUS_KM = 6371.0

# Round-trip distance bound: light covers 0.3 km/us one way, and a probe
# packet travels the path twice.
KM_PER_US_ONEWAY = 0.3
KM_PER_US_RTT = 0.15

# Type aliases for annotation readability; values are validated where they
# enter the system, not wrapped.
DelayMicros = int
DistanceKm = float


class ModelError(ValueError):
    """Invalid domain value (range, degeneracy, ...)."""


@dataclass(frozen=True, order=True)
class NodeId:
    """16-byte opaque node identifier; equality is byte equality."""

    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, bytes) or len(self.value) != 16:
            raise ModelError("NodeId must be exactly 16 bytes")

    @classmethod
    def generate(cls) -> "NodeId":
        return cls(secrets.token_bytes(16))

    @classmethod
    def from_hex(cls, text: str) -> "NodeId":
        return cls(bytes.fromhex(text))

    @classmethod
    def from_name(cls, name: str) -> "NodeId":
        """Deterministic id for configuration files and scenarios."""
        import hashlib

        return cls(hashlib.sha256(name.encode("utf-8")).digest()[:16])

    @property
    def hex(self) -> str:
        return self.value.hex()

    def __str__(self) -> str:
        return self.value.hex()[:8]


@dataclass(frozen=True)
class GeoPoint:
    """Latitude/longitude in degrees; lon is normalized into (-180, 180]."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0:
            raise ModelError(f"latitude {self.lat} outside [-90, 90]")
        if not math.isfinite(self.lon):
            raise ModelError(f"longitude {self.lon} is not finite")
        lon = math.fmod(self.lon, 360.0)
        if lon <= -180.0:
            lon += 360.0
        elif lon > 180.0:
            lon -= 360.0
        object.__setattr__(self, "lon", lon)


@dataclass(frozen=True)
class TimeWindow:
    """Inclusive UTC window [not_before, not_after], microseconds."""

    not_before: int
    not_after: int

    def __post_init__(self) -> None:
        if self.not_before > self.not_after:
            raise ModelError("time window ends before it begins")

    def contains(self, ts_us: int) -> bool:
        return self.not_before <= ts_us <= self.not_after


@dataclass(frozen=True)
class Geofence:
    """Simple polygon over lat/lon; the last vertex implicitly joins the first.

    Limitations (documented, by design): planar lat/lon semantics, no
    antimeridian crossing, no pole-enclosing polygons.
    """

    vertices: tuple[GeoPoint, ...]

    def __post_init__(self) -> None:
        verts = tuple(self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise ModelError("geofence needs at least 3 vertices")
        pts = [(p.lat, p.lon) for p in verts]
        n = len(pts)
        for i in range(n):
            if pts[i] == pts[(i + 1) % n]:
                raise ModelError("geofence has a zero-length edge")
        if abs(_signed_area(pts)) < 1e-12:
            raise ModelError("geofence is degenerate (zero area)")
        if _self_intersects(pts):
            raise ModelError("geofence polygon self-intersects")

    @classmethod
    def from_pairs(cls, pairs) -> "Geofence":
        return cls(tuple(GeoPoint(float(a), float(b)) for a, b in pairs))


@dataclass(frozen=True)
class UsageConstraints:
    """Geofence + time window plus the knobs of one attestation round."""

    geofence: Geofence
    time_window: TimeWindow
    min_geoclients: int
    repetitions: int
    max_report_age_us: int

    def __post_init__(self) -> None:
        if self.min_geoclients < 1:
            raise ModelError("min_geoclients must be positive")
        if self.repetitions < 1:
            raise ModelError("repetitions must be positive")
        if self.max_report_age_us < 0:
            raise ModelError("max_report_age_us must be non-negative")


@dataclass(frozen=True)
class FeasibleRegion:
    """Intersection of distance-bound disks on the sphere."""

    disks: tuple[tuple[GeoPoint, float], ...]

    def __post_init__(self) -> None:
        if not self.disks:
            raise ModelError("feasible region needs at least one disk")
        for _, radius in self.disks:
            if radius <= 0.0:
                raise ModelError("disk radius must be positive")

    def contains(self, p: GeoPoint) -> bool:
        return all(haversine_km(c, p) <= r for c, r in self.disks)


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance on the 6371.0 km sphere."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlam = math.radians(b.lon - a.lon)
    s = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return EARTH_RADIUS_KM * 2.0 * math.atan2(math.sqrt(s), math.sqrt(1.0 - s))


def point_in_geofence(p: GeoPoint, fence: Geofence) -> bool:
    """Even-odd ray-casting containment in the lat/lon plane.

    Boundary points (vertices and edges) count as inside.
    """
    x, y = p.lon, p.lat
    pts = [(v.lon, v.lat) for v in fence.vertices]
    n = len(pts)
    inside = False
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        if _on_segment(x, y, x1, y1, x2, y2):
            return True
        # Cast a ray in +x; count proper crossings using the half-open rule.
        if (y1 > y) != (y2 > y):
            x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < x_cross:
                inside = not inside
    return inside


def _on_segment(px: float, py: float, x1: float, y1: float, x2: float, y2: float) -> bool:
    eps = 1e-9
    cross = (py - y1) * (x2 - x1) - (px - x1) * (y2 - y1)
    if abs(cross) > eps:
        return False
    dot = (px - x1) * (px - x2) + (py - y1) * (py - y2)
    return dot <= eps


def _signed_area(pts: list[tuple[float, float]]) -> float:
    total = 0.0
    n = len(pts)
    for i in range(n):
        y1, x1 = pts[i]
        y2, x2 = pts[(i + 1) % n]
        total += x1 * y2 - x2 * y1
    return total / 2.0


def _orient(ax, ay, bx, by, cx, cy) -> int:
    v = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if abs(v) < 1e-15:
        return 0
    return 1 if v > 0 else -1


def _segments_cross(a, b, c, d) -> bool:
    """Proper intersection of segments ab and cd (shared endpoints excluded)."""
    o1 = _orient(*a, *b, *c)
    o2 = _orient(*a, *b, *d)
    o3 = _orient(*c, *d, *a)
    o4 = _orient(*c, *d, *b)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def _self_intersects(pts: list[tuple[float, float]]) -> bool:
    n = len(pts)
    segs = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue  # adjacent edges share a vertex
            if _segments_cross(*segs[i], *segs[j]):
                return True
    return False


def utc_now_us() -> int:
    """Current UTC wall clock in microseconds since the epoch."""
    return int(datetime.now(timezone.utc).timestamp() * 1_000_000)


def format_rfc3339(ts_us: int) -> str:
    """RFC 3339 with microsecond resolution, UTC."""
    dt = datetime.fromtimestamp(ts_us / 1_000_000, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.%f") + "Z"


def parse_rfc3339(text: str) -> int:
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() * 1_000_000)
