"""Web-Mercator (Bing) tile arithmetic.

Tiles are addressed by ``(zoom, x, y)`` with the origin at the north-west
corner, matching the Bing Maps / slippy-map convention. The modelled
hierarchy spans zooms 13 to 15 but the addressing helpers accept any zoom
up to 23.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

MIN_ZOOM = 13
MAX_ZOOM = 15
MODEL_ZOOMS = (13, 14, 15)

EARTH_RADIUS_M = 6_371_000.0
# Spherical Mercator radius used for projected coordinates (EPSG:3857).
MERCATOR_RADIUS_M = 6_378_137.0
MAX_LATITUDE = 85.05112878

OVERLAP_SAMPLES = 32


@dataclass(frozen=True, order=True)
class TileId:
    zoom: int
    x: int
    y: int

    def __post_init__(self):
        if not 0 <= self.zoom <= 23:
            raise ValueError(f"zoom out of range: {self.zoom}")
        n = 1 << self.zoom
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise ValueError(f"tile coordinates out of range: {self}")

    @property
    def quadkey(self) -> str:
        return quadkey(self)

    def __str__(self) -> str:
        return f"{self.zoom}/{self.x}/{self.y}"


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError("non-finite coordinate")
        if abs(self.lat) > MAX_LATITUDE + 1e-9:
            raise ValueError(f"latitude outside the Web-Mercator band: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class CoverageDisk:
    center: GeoPoint
    radius: float

    def __post_init__(self):
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise ValueError(f"radius must be finite and positive, got {self.radius}")


def quadkey(t: TileId) -> str:
    digits = []
    for i in range(t.zoom, 0, -1):
        mask = 1 << (i - 1)
        digit = 0
        if t.x & mask:
            digit += 1
        if t.y & mask:
            digit += 2
        digits.append(str(digit))
    return "".join(digits)


def parse_quadkey(key: str) -> TileId:
    x = y = 0
    for ch in key:
        if ch not in "0123":
            raise ValueError(f"invalid quadkey digit {ch!r} in {key!r}")
        d = int(ch)
        x = (x << 1) | (d & 1)
        y = (y << 1) | (d >> 1)
    return TileId(len(key), x, y)


def parent(t: TileId) -> TileId:
    if t.zoom <= MIN_ZOOM:
        raise ValueError(f"tile {t} is at or below the zoom floor {MIN_ZOOM}")
    return TileId(t.zoom - 1, t.x // 2, t.y // 2)


def ancestor(t: TileId, zoom: int) -> TileId:
    """Ancestor of ``t`` at a coarser ``zoom`` (``t`` itself when equal)."""
    if zoom > t.zoom:
        raise ValueError(f"zoom {zoom} is finer than tile {t}")
    shift = t.zoom - zoom
    return TileId(zoom, t.x >> shift, t.y >> shift)


def children(t: TileId) -> list[TileId]:
    if t.zoom >= MAX_ZOOM:
        raise ValueError(f"tile {t} is at or above the zoom ceiling {MAX_ZOOM}")
    z, x, y = t.zoom + 1, 2 * t.x, 2 * t.y
    return [TileId(z, x, y), TileId(z, x + 1, y), TileId(z, x, y + 1), TileId(z, x + 1, y + 1)]


def neighbors8(t: TileId) -> list[TileId]:
    n = 1 << t.zoom
    out = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            x, y = t.x + dx, t.y + dy
            # no antimeridian wraparound
            if 0 <= x < n and 0 <= y < n:
                out.append(TileId(t.zoom, x, y))
    return out


def _pixel_to_lonlat(px, py, zoom):
    n = float(1 << zoom)
    lon = px / n * 360.0 - 180.0
    lat = np.degrees(np.arctan(np.sinh(np.pi * (1.0 - 2.0 * py / n))))
    return lon, lat


def tile_bounds(t: TileId) -> tuple[float, float, float, float]:
    """Return ``(west, south, east, north)`` in degrees."""
    west, north = _pixel_to_lonlat(t.x, t.y, t.zoom)
    east, south = _pixel_to_lonlat(t.x + 1, t.y + 1, t.zoom)
    return float(west), float(south), float(east), float(north)


def centroid(t: TileId) -> GeoPoint:
    lon, lat = _pixel_to_lonlat(t.x + 0.5, t.y + 0.5, t.zoom)
    return GeoPoint(float(lat), float(lon))


def lonlat_to_tile(lat: float, lon: float, zoom: int) -> TileId:
    lat = min(max(lat, -MAX_LATITUDE), MAX_LATITUDE)
    n = 1 << zoom
    fx = (lon + 180.0) / 360.0 * n
    s = math.sin(math.radians(lat))
    fy = (0.5 - math.log((1 + s) / (1 - s)) / (4 * math.pi)) * n
    x = min(max(int(math.floor(fx)), 0), n - 1)
    y = min(max(int(math.floor(fy)), 0), n - 1)
    return TileId(zoom, x, y)


def point_to_tile(p: GeoPoint, zoom: int) -> TileId:
    return lonlat_to_tile(p.lat, p.lon, zoom)


def geodesic_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine great-circle distance in meters on a spherical Earth."""
    return float(haversine(a.lat, a.lon, b.lat, b.lon))


def haversine(lat1, lon1, lat2, lon2):
    """Vectorised haversine distance in meters."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def tile_width_m(t: TileId) -> float:
    """East-west extent of the tile in meters at its centre latitude."""
    c = centroid(t)
    return EARTH_RADIUS_M * math.radians(360.0 / (1 << t.zoom)) * math.cos(math.radians(c.lat))


def to_mercator(lon, lat):
    """Project degrees to spherical Mercator meters."""
    lon = np.asarray(lon, dtype=float)
    lat = np.clip(np.asarray(lat, dtype=float), -MAX_LATITUDE, MAX_LATITUDE)
    x = MERCATOR_RADIUS_M * np.radians(lon)
    y = MERCATOR_RADIUS_M * np.log(np.tan(np.pi / 4 + np.radians(lat) / 2))
    return x, y


def from_mercator(x, y):
    lon = np.degrees(np.asarray(x, dtype=float) / MERCATOR_RADIUS_M)
    lat = np.degrees(2 * np.arctan(np.exp(np.asarray(y, dtype=float) / MERCATOR_RADIUS_M)) - np.pi / 2)
    return lon, lat


def tile_bounds_mercator(t: TileId) -> tuple[float, float, float, float]:
    """Return ``(minx, miny, maxx, maxy)`` in Mercator meters."""
    size = 2 * math.pi * MERCATOR_RADIUS_M / (1 << t.zoom)
    origin = math.pi * MERCATOR_RADIUS_M
    minx = t.x * size - origin
    maxy = origin - t.y * size
    return minx, maxy - size, minx + size, maxy


def tile_from_mercator(x: float, y: float, zoom: int) -> tuple[int, int]:
    """Fractional-free tile column/row containing a Mercator coordinate."""
    n = 1 << zoom
    size = 2 * math.pi * MERCATOR_RADIUS_M / n
    origin = math.pi * MERCATOR_RADIUS_M
    tx = min(max(int(math.floor((x + origin) / size)), 0), n - 1)
    ty = min(max(int(math.floor((origin - y) / size)), 0), n - 1)
    return tx, ty


def _sample_grid(t: TileId, samples: int):
    offs = (np.arange(samples) + 0.5) / samples
    px, py = np.meshgrid(t.x + offs, t.y + offs)
    lon, lat = _pixel_to_lonlat(px.ravel(), py.ravel(), t.zoom)
    return lat, lon


def disk_tile_overlap(d: CoverageDisk, t: TileId, samples: int = OVERLAP_SAMPLES) -> float:
    """Fraction of the tile area inside the disk, by subgrid point sampling."""
    lat, lon = _sample_grid(t, samples)
    dist = haversine(d.center.lat, d.center.lon, lat, lon)
    return float(np.count_nonzero(dist <= d.radius)) / dist.size


def tiles_in_bbox(west: float, south: float, east: float, north: float, zoom: int) -> list[TileId]:
    a = lonlat_to_tile(north, west, zoom)
    b = lonlat_to_tile(south, east, zoom)
    return [TileId(zoom, x, y) for y in range(a.y, b.y + 1) for x in range(a.x, b.x + 1)]


def disk_overlaps(d: CoverageDisk, zoom: int, samples: int = OVERLAP_SAMPLES) -> dict[TileId, float]:
    """All tiles at ``zoom`` with nonzero overlap, mapped to their fractions."""
    dlat = math.degrees(d.radius / EARTH_RADIUS_M)
    coslat = max(math.cos(math.radians(d.center.lat)), 1e-12)
    dlon = min(math.degrees(d.radius / (EARTH_RADIUS_M * coslat)), 180.0)
    lat0, lat1 = max(d.center.lat - dlat, -MAX_LATITUDE), min(d.center.lat + dlat, MAX_LATITUDE)
    lon0, lon1 = max(d.center.lon - dlon, -180.0), min(d.center.lon + dlon, 180.0 - 1e-9)
    out = {}
    for t in tiles_in_bbox(lon0, lat0, lon1, lat1, zoom):
        frac = disk_tile_overlap(d, t, samples)
        if frac > 0:
            out[t] = frac
    return out


def sort_tiles(tiles: Iterable[TileId]) -> list[TileId]:
    """Deterministic ordering by (zoom, quadkey)."""
    return sorted(tiles, key=lambda t: (t.zoom, quadkey(t)))
